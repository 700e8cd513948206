use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Square pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    pub fn out_extent(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        (self.kernel >= 1 && self.stride >= 1 && padded >= self.kernel && self.pad < self.kernel)
            .then(|| (padded - self.kernel) / self.stride + 1)
    }

    fn output_hw(&self, op: &'static str, h: usize, w: usize) -> Result<(usize, usize)> {
        let ho = self
            .out_extent(h)
            .ok_or_else(|| dim_err(op, "height (window vs padded input)", self.kernel, h + 2 * self.pad))?;
        let wo = self
            .out_extent(w)
            .ok_or_else(|| dim_err(op, "width (window vs padded input)", self.kernel, w + 2 * self.pad))?;
        Ok((ho, wo))
    }
}

fn rank4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    if t.rank() != 4 {
        return Err(Error::Shape {
            op,
            msg: format!("expected rank-4 input, got {:?}", t.dims()),
        });
    }
    Ok(t.nchw())
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::new(input.dims(), input.data().iter().map(|&v| v.max(0.0)).collect()).unwrap()
}

pub fn relu_backward(output: &Tensor, grad_out: &[f32]) -> Vec<f32> {
    output
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect()
}

/// Windowed max. Returns the pooled map and the flat input index of each maximum
/// (first maximum in row-major window order wins ties).
pub fn max_pool2d(input: &Tensor, spec: &PoolSpec) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = rank4("max_pool2d", input)?;
    let (ho, wo) = spec.output_hw("max_pool2d", h, w)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..spec.kernel {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..spec.kernel {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

pub fn max_pool2d_backward(input_len: usize, argmax: &[usize], grad_out: &[f32]) -> Vec<f32> {
    let mut g = vec![0.0f32; input_len];
    for (&i, &go) in argmax.iter().zip(grad_out) {
        g[i] += go;
    }
    g
}

/// Windowed mean; padded cells count as zeros (divisor is always `kernel²`).
pub fn avg_pool2d(input: &Tensor, spec: &PoolSpec) -> Result<Tensor> {
    let [n, c, h, w] = rank4("avg_pool2d", input)?;
    let (ho, wo) = spec.output_hw("avg_pool2d", h, w)?;
    let x = input.data();
    let inv = 1.0 / (spec.kernel * spec.kernel) as f32;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f32;
                for_window(spec, h, w, oy, ox, |iy, ix| acc += x[base + iy * w + ix]);
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn avg_pool2d_backward(input: &Tensor, spec: &PoolSpec, grad_out: &[f32]) -> Result<Vec<f32>> {
    let [n, c, h, w] = rank4("avg_pool2d", input)?;
    let (ho, wo) = spec.output_hw("avg_pool2d", h, w)?;
    let inv = 1.0 / (spec.kernel * spec.kernel) as f32;
    let mut g = vec![0.0f32; input.numel()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let go = grad_out[(plane * ho + oy) * wo + ox] * inv;
                for_window(spec, h, w, oy, ox, |iy, ix| g[base + iy * w + ix] += go);
            }
        }
    }
    Ok(g)
}

#[inline]
fn for_window(spec: &PoolSpec, h: usize, w: usize, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
    for ky in 0..spec.kernel {
        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kx in 0..spec.kernel {
            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
            if ix >= 0 && ix < w as isize {
                f(iy as usize, ix as usize);
            }
        }
    }
}

/// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = rank4("global_avg_pool", input)?;
    let hw = h * w;
    let out = input
        .data()
        .chunks_exact(hw.max(1))
        .take(n * c)
        .map(|p| p.iter().sum::<f32>() / hw as f32)
        .collect();
    Tensor::new(&[n, c], out)
}

pub fn global_avg_pool_backward(input_dims: [usize; 4], grad_out: &[f32]) -> Vec<f32> {
    let hw = input_dims[2] * input_dims[3];
    let inv = 1.0 / hw as f32;
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_all_negative() {
        let t = Tensor::full(&[2, 3], -0.5);
        assert!(relu(&t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gap_constant() {
        let t = Tensor::from_fn(&[2, 3, 4, 5], |i| (i / 20) as f32 * 0.5);
        let g = global_avg_pool(&t).unwrap();
        assert_eq!(g.dims(), &[2, 3]);
        for (i, &v) in g.data().iter().enumerate() {
            assert_eq!(v, i as f32 * 0.5);
        }
    }

    #[test]
    fn max_pool_matches_sliding_window() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 1, 7, 7], 1.0, &mut r);
        let spec = PoolSpec::new(3, 2, 0);
        let (y, arg) = max_pool2d(&x, &spec).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3, 3]);
        for oy in 0..3 {
            for ox in 0..3 {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..3 {
                    for dx in 0..3 {
                        m = m.max(x.at(&[0, 0, oy * 2 + dy, ox * 2 + dx]));
                    }
                }
                assert_eq!(y.at(&[0, 0, oy, ox]), m);
                assert_eq!(x.data()[arg[oy * 3 + ox]], m);
            }
        }
        // padded variant halves 224 -> 112 style extents
        let (yp, _) = max_pool2d(&x, &PoolSpec::new(3, 2, 1)).unwrap();
        assert_eq!(yp.dims(), &[1, 1, 4, 4]);
    }

    #[test]
    fn window_larger_than_input() {
        let err = max_pool2d(&Tensor::zeros(&[1, 1, 2, 2]), &PoolSpec::new(3, 1, 0)).unwrap_err();
        assert!(err.to_string().contains("window"));
    }

    #[test]
    fn avg_pool_counts_padding_as_zero() {
        let x = Tensor::full(&[1, 1, 4, 4], 9.0);
        let y = avg_pool2d(&x, &PoolSpec::new(3, 2, 1)).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
    }
}
