//! Fully connected layer `y = x W + b` with `W` stored as `[in, out]`.

use crate::error::{ensure_dim, Error, Result};
use crate::tensor::Tensor;

fn check(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    if input.rank() != 2 || weight.rank() != 2 {
        return Err(Error::Shape {
            op: "fully_connected",
            msg: format!("expected rank-2 input and weight, got {:?} and {:?}", input.dims(), weight.dims()),
        });
    }
    let (n, d) = (input.dim(0), input.dim(1));
    ensure_dim("fully_connected", "inner dimension", d, weight.dim(0))?;
    let m = weight.dim(1);
    if let Some(b) = bias {
        ensure_dim("fully_connected", "bias length", m, b.numel())?;
    }
    Ok((n, d, m))
}

pub fn fully_connected(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d, m) = check(input, weight, bias)?;
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0f32; n * m];
    for (row, orow) in out.chunks_exact_mut(m.max(1)).enumerate().take(n) {
        if let Some(b) = bias {
            orow.copy_from_slice(b.data());
        }
        for (k, &xv) in x[row * d..(row + 1) * d].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in orow.iter_mut().zip(&w[k * m..(k + 1) * m]) {
                *o += xv * wv;
            }
        }
    }
    Tensor::new(&[n, m], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`, each only when requested.
#[allow(clippy::type_complexity)]
pub fn fully_connected_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f32],
    need: [bool; 3],
) -> Result<(Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>)> {
    let (n, d, m) = check(input, weight, None)?;
    ensure_dim("fully_connected backward", "grad length", n * m, grad_out.len())?;
    let x = input.data();
    let w = weight.data();
    let gx = need[0].then(|| {
        let mut gx = vec![0.0f32; n * d];
        for row in 0..n {
            let g = &grad_out[row * m..(row + 1) * m];
            for k in 0..d {
                gx[row * d + k] = w[k * m..(k + 1) * m].iter().zip(g).map(|(a, b)| a * b).sum();
            }
        }
        gx
    });
    let gw = need[1].then(|| {
        let mut gw = vec![0.0f32; d * m];
        for row in 0..n {
            let g = &grad_out[row * m..(row + 1) * m];
            for k in 0..d {
                let xv = x[row * d + k];
                if xv == 0.0 {
                    continue;
                }
                for (a, &b) in gw[k * m..(k + 1) * m].iter_mut().zip(g) {
                    *a += xv * b;
                }
            }
        }
        gw
    });
    let gb = need[2].then(|| {
        let mut gb = vec![0.0f32; m];
        for row in 0..n {
            for (a, &b) in gb.iter_mut().zip(&grad_out[row * m..(row + 1) * m]) {
                *a += b;
            }
        }
        gb
    });
    Ok((gx, gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_zero_bias() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let w = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let y = fully_connected(&x, &w, Some(&Tensor::zeros(&[4]))).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weight_gives_bias_rows() {
        let b = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = fully_connected(&Tensor::full(&[2, 5], 3.0), &Tensor::zeros(&[5, 3]), Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 4], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        let y = fully_connected(&x, &w, Some(&b)).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let mut acc = b.at(&[j]);
                for k in 0..4 {
                    acc += x.at(&[i, k]) * w.at(&[k, j]);
                }
                assert!((y.at(&[i, j]) - acc).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn inner_dimension_mismatch() {
        let err = fully_connected(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[5, 3]), None).unwrap_err();
        assert!(err.to_string().contains("inner dimension"));
    }

    #[test]
    fn empty_batch() {
        let y = fully_connected(&Tensor::zeros(&[0, 4]), &Tensor::zeros(&[4, 3]), None).unwrap();
        assert_eq!(y.dims(), &[0, 3]);
    }
}
