use crate::error::{ensure_dim, Error, Result};
use crate::tensor::Tensor;

/// Frozen batch-norm statistics for one conv output.
#[derive(Debug, Clone)]
pub struct FrozenBatchNorm {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub epsilon: f32,
}

impl FrozenBatchNorm {
    pub fn identity(channels: usize, epsilon: f32) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            epsilon,
        }
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` applied per channel of an NCHW map.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let [_, c, h, w] = x.nchw();
        let hw = h * w;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            let s = self.gamma[ch] / (self.var[ch] + self.epsilon).sqrt();
            *v = (*v - self.mean[ch]) * s + self.beta[ch];
        }
        out
    }
}

/// Absorbs frozen BN into the preceding convolution:
/// `w' = w * s`, `b' = (b - mean) * s + beta` with `s = gamma / sqrt(var + eps)`.
pub fn fold_batch_norm(weight: &Tensor, bias: Option<&Tensor>, bn: &FrozenBatchNorm) -> Result<(Tensor, Tensor)> {
    let cout = weight.dim(0);
    for (name, v) in [("bn mean", &bn.mean), ("bn var", &bn.var), ("bn gamma", &bn.gamma), ("bn beta", &bn.beta)] {
        ensure_dim("fold_batch_norm", name, cout, v.len())?;
    }
    if let Some(i) = bn.var.iter().position(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "negative batch-norm variance {} at channel {i}",
            bn.var[i]
        )));
    }
    let per_out = weight.numel() / cout.max(1);
    let scale: Vec<f32> = (0..cout)
        .map(|c| bn.gamma[c] / (bn.var[c] + bn.epsilon).sqrt())
        .collect();
    let mut w = weight.clone();
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        *v *= scale[i / per_out];
    }
    let b = Tensor::from_fn(&[cout], |c| {
        let b0 = bias.map_or(0.0, |b| b.data()[c]);
        (b0 - bn.mean[c]) * scale[c] + bn.beta[c]
    });
    Ok((w, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::conv2d;
    use crate::tensor::ConvSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn neutral_bn_leaves_weights() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let (w2, b2) = fold_batch_norm(&w, None, &FrozenBatchNorm::identity(3, 0.0)).unwrap();
        assert_eq!(w2, w);
        assert!(b2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_two_doubles() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::randn(&[3, 2, 1, 1], 1.0, &mut r);
        let mut bn = FrozenBatchNorm::identity(3, 0.0);
        bn.gamma = vec![2.0; 3];
        let (w2, _) = fold_batch_norm(&w, None, &bn).unwrap();
        for (a, b) in w2.data().iter().zip(w.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn negative_variance_rejected() {
        let mut bn = FrozenBatchNorm::identity(2, 1e-5);
        bn.var[1] = -0.1;
        assert!(fold_batch_norm(&Tensor::zeros(&[2, 1, 1, 1]), None, &bn).is_err());
    }

    #[test]
    fn folded_conv_matches_conv_then_bn() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let spec = ConvSpec::new(3, 3, 3);
        let w = Tensor::randn(&spec.weight_dims(), 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        let bn = FrozenBatchNorm {
            mean: (0..3).map(|_| r.gen_range(-1.0..1.0)).collect(),
            var: (0..3).map(|_| r.gen_range(0.2..2.0)).collect(),
            gamma: (0..3).map(|_| r.gen_range(0.5..1.5)).collect(),
            beta: (0..3).map(|_| r.gen_range(-1.0..1.0)).collect(),
            epsilon: 1e-5,
        };
        let (wf, bf) = fold_batch_norm(&w, Some(&b), &bn).unwrap();
        for _ in 0..10 {
            let x = Tensor::randn(&[1, 3, 6, 6], 1.0, &mut r);
            let reference = bn.apply(&conv2d(&x, &w, Some(&b), &spec).unwrap());
            let folded = conv2d(&x, &wf, Some(&bf), &spec).unwrap();
            assert!(reference.max_abs_diff(&folded) <= 1e-5);
        }
    }
}
