//! Grouped, strided, dilated 2-D cross-correlation.

use crate::error::{dim_err, ensure_dim, Error, Result};
use crate::tensor::{ConvSpec, Tensor};

/// Gradients of [`conv2d`] with respect to each argument.
#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
}

fn geometry(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    if input.rank() != 4 {
        return Err(Error::Shape {
            op: "conv2d",
            msg: format!("input must be rank 4, got {:?}", input.dims()),
        });
    }
    let [n, cin, h, w] = input.nchw();
    ensure_dim("conv2d", "input channels", spec.in_channels, cin)?;
    let wd = spec.weight_dims();
    if weight.dims() != wd {
        let axes = ["weight out_channels", "weight in_channels/groups", "weight kernel_h", "weight kernel_w"];
        let got = weight.nchw();
        for i in 0..4 {
            if got[i] != wd[i] {
                return Err(dim_err("conv2d", axes[i], wd[i], got[i]));
            }
        }
        return Err(Error::Shape {
            op: "conv2d",
            msg: format!("weight must be rank 4 {wd:?}, got {:?}", weight.dims()),
        });
    }
    if let Some(b) = bias {
        ensure_dim("conv2d", "bias length", spec.out_channels, b.numel())?;
    }
    let ho = spec
        .out_extent(h, spec.pad_h, spec.kernel_h)
        .ok_or_else(|| dim_err("conv2d", "height", spec.dilation * (spec.kernel_h - 1) + 1, h + 2 * spec.pad_h))?;
    let wo = spec
        .out_extent(w, spec.pad_w, spec.kernel_w)
        .ok_or_else(|| dim_err("conv2d", "width", spec.dilation * (spec.kernel_w - 1) + 1, w + 2 * spec.pad_w))?;
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout: spec.out_channels,
        ho,
        wo,
    })
}

/// Range of output positions whose tap `k` lands inside `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, tap: usize, pad: usize, stride: usize) -> (usize, usize) {
    // i = o*stride + tap - pad must satisfy 0 <= i < len
    let tap = tap as isize;
    let pad = pad as isize;
    let stride = stride as isize;
    let lo_num = pad - tap;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + stride - 1) / stride };
    let hi_num = len as isize - 1 + pad - tap;
    let hi = if hi_num < 0 { -1 } else { hi_num / stride };
    let lo = lo.max(0) as usize;
    let hi = (hi + 1).clamp(0, out_len as isize) as usize;
    (lo, hi.max(lo))
}

/// Visits every (output row segment, input row segment) pair touched by one kernel tap.
/// The callback gets `(out_offset, in_offset, count)` with the input advancing by `stride`.
#[inline]
fn for_each_tap_row(
    g: &Geometry,
    spec: &ConvSpec,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (oy0, oy1) = valid_range(g.h, g.ho, ky * spec.dilation, spec.pad_h, spec.stride);
    let (ox0, ox1) = valid_range(g.w, g.wo, kx * spec.dilation, spec.pad_w, spec.stride);
    if ox1 <= ox0 {
        return;
    }
    for oy in oy0..oy1 {
        let iy = oy * spec.stride + ky * spec.dilation - spec.pad_h;
        let ix0 = ox0 * spec.stride + kx * spec.dilation - spec.pad_w;
        f(oy * g.wo + ox0, iy * g.w + ix0, ox1 - ox0);
    }
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let g = geometry(input, weight, bias, spec)?;
    let cin_g = g.cin / spec.groups;
    let cout_g = g.cout / spec.groups;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0f32; g.n * g.cout * out_plane];
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let o = &mut out[(n * g.cout + oc) * out_plane..][..out_plane];
            if let Some(b) = bias {
                o.fill(b.data()[oc]);
            }
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xi = &x[(n * g.cin + ic) * in_plane..][..in_plane];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((oc * cin_g + icg) * kh + ky) * kw + kx];
                        for_each_tap_row(&g, spec, ky, kx, |oo, io, len| {
                            let orow = &mut o[oo..oo + len];
                            if spec.stride == 1 {
                                for (a, &b) in orow.iter_mut().zip(&xi[io..io + len]) {
                                    *a += wv * b;
                                }
                            } else {
                                for (a, &b) in orow.iter_mut().zip(xi[io..].iter().step_by(spec.stride)) {
                                    *a += wv * b;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

/// Backward pass of [`conv2d`]. Only the requested gradients are computed.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    spec: &ConvSpec,
    grad_out: &[f32],
    need: [bool; 3],
) -> Result<Conv2dGrads> {
    let g = geometry(input, weight, None, spec)?;
    let cin_g = g.cin / spec.groups;
    let cout_g = g.cout / spec.groups;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    ensure_dim("conv2d backward", "grad length", g.n * g.cout * out_plane, grad_out.len())?;
    let x = input.data();
    let wt = weight.data();
    let mut gx = need[0].then(|| vec![0.0f32; x.len()]);
    let mut gw = need[1].then(|| vec![0.0f32; wt.len()]);
    let gb = (need[2] && has_bias).then(|| {
        let mut gb = vec![0.0f32; g.cout];
        for n in 0..g.n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += grad_out[(n * g.cout + oc) * out_plane..][..out_plane].iter().sum::<f32>();
            }
        }
        gb
    });
    if gx.is_none() && gw.is_none() {
        return Ok(Conv2dGrads { input: None, weight: None, bias: gb });
    }
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let go = &grad_out[(n * g.cout + oc) * out_plane..][..out_plane];
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let base = (n * g.cin + ic) * in_plane;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((oc * cin_g + icg) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let mut dw = 0.0f32;
                        for_each_tap_row(&g, spec, ky, kx, |oo, io, len| {
                            let grow = &go[oo..oo + len];
                            if let Some(gx) = gx.as_mut() {
                                let gxi = &mut gx[base..base + in_plane];
                                if spec.stride == 1 {
                                    for (a, &b) in gxi[io..io + len].iter_mut().zip(grow) {
                                        *a += wv * b;
                                    }
                                } else {
                                    for (a, &b) in gxi[io..].iter_mut().step_by(spec.stride).zip(grow) {
                                        *a += wv * b;
                                    }
                                }
                            }
                            if gw.is_some() {
                                let xi = &x[base..base + in_plane];
                                if spec.stride == 1 {
                                    dw += xi[io..io + len].iter().zip(grow).map(|(a, b)| a * b).sum::<f32>();
                                } else {
                                    dw += xi[io..]
                                        .iter()
                                        .step_by(spec.stride)
                                        .zip(grow)
                                        .map(|(a, b)| a * b)
                                        .sum::<f32>();
                                }
                            }
                        });
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += dw;
                        }
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads { input: gx, weight: gw, bias: gb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-deep loop over (n, oc, oy, ox, ic, ky, kx) with explicit bounds checks.
    fn naive_conv(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, s: &ConvSpec) -> Tensor {
        let [n, cin, h, w] = input.nchw();
        let (ho, wo) = s.output_hw(h, w).unwrap();
        let cin_g = cin / s.groups;
        let cout_g = s.out_channels / s.groups;
        let mut out = Tensor::zeros(&[n, s.out_channels, ho, wo]);
        for b in 0..n {
            for oc in 0..s.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map_or(0.0, |t| t.data()[oc]);
                        for icg in 0..cin_g {
                            let ic = oc / cout_g * cin_g + icg;
                            for ky in 0..s.kernel_h {
                                for kx in 0..s.kernel_w {
                                    let iy = (oy * s.stride + ky * s.dilation) as isize - s.pad_h as isize;
                                    let ix = (ox * s.stride + kx * s.dilation) as isize - s.pad_w as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input.at(&[b, ic, iy as usize, ix as usize])
                                        * weight.at(&[oc, icg, ky, kx]);
                                }
                            }
                        }
                        out.set(&[b, oc, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_1x1() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut r);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let spec = ConvSpec::new(3, 3, 1);
        assert_eq!(conv2d(&x, &w, None, &spec).unwrap(), x);
    }

    #[test]
    fn zero_input_zero_bias() {
        let mut r = rng();
        let w = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut r);
        let spec = ConvSpec::new(2, 4, 3);
        let out = conv2d(&Tensor::zeros(&[1, 2, 6, 6]), &w, Some(&Tensor::zeros(&[4])), &spec).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_loop() {
        let mut r = rng();
        let x = Tensor::randn(&[1, 3, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[4], 1.0, &mut r);
        let spec = ConvSpec::new(3, 4, 3);
        let got = conv2d(&x, &w, Some(&b), &spec).unwrap();
        let want = naive_conv(&x, &w, Some(&b), &spec);
        assert!(got.max_abs_diff(&want) <= 1e-5);
    }

    #[test]
    fn strided_dilated_grouped_match_naive() {
        let mut r = rng();
        for &(cin, cout, k, s, p, d, g, h, w) in &[
            (4, 6, 3, 2, 1, 1, 2, 7, 9),
            (3, 3, 3, 1, 2, 2, 3, 8, 6),
            (2, 4, 1, 2, 0, 1, 1, 5, 5),
            (6, 6, 5, 3, 2, 1, 6, 11, 10),
            (2, 2, 3, 1, 0, 2, 1, 9, 9),
        ] {
            let spec = ConvSpec::new(cin, cout, k)
                .with_stride(s)
                .with_pad(p, p)
                .with_dilation(d)
                .with_groups(g);
            let x = Tensor::randn(&[2, cin, h, w], 1.0, &mut r);
            let wt = Tensor::randn(&spec.weight_dims(), 1.0, &mut r);
            let got = conv2d(&x, &wt, None, &spec).unwrap();
            let want = naive_conv(&x, &wt, None, &spec);
            assert_eq!(got.dims(), want.dims());
            assert!(got.max_abs_diff(&want) <= 1e-5, "spec {spec:?}");
        }
    }

    #[test]
    fn depthwise_equals_per_channel_convolution() {
        let mut r = rng();
        let c = 4;
        let spec = ConvSpec::depthwise(c, 3, 2);
        let x = Tensor::randn(&[1, c, 9, 9], 1.0, &mut r);
        let w = Tensor::randn(&spec.weight_dims(), 1.0, &mut r);
        let out = conv2d(&x, &w, None, &spec).unwrap();
        let single = ConvSpec::new(1, 1, 3).with_stride(2);
        for ch in 0..c {
            let xc = Tensor::new(&[1, 1, 9, 9], x.data()[ch * 81..(ch + 1) * 81].to_vec()).unwrap();
            let wc = Tensor::new(&[1, 1, 3, 3], w.data()[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
            let oc = conv2d(&xc, &wc, None, &single).unwrap();
            assert_eq!(oc.data(), &out.data()[ch * 25..(ch + 1) * 25]);
        }
    }

    #[test]
    fn rectangular_kernels_and_padding() {
        let mut r = rng();
        let spec = ConvSpec::new(2, 3, 1).with_kernel(5, 1).with_pad(2, 0);
        let x = Tensor::randn(&[1, 2, 6, 4], 1.0, &mut r);
        let w = Tensor::randn(&spec.weight_dims(), 1.0, &mut r);
        let got = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(got.dims(), &[1, 3, 6, 4]);
        assert!(got.max_abs_diff(&naive_conv(&x, &w, None, &spec)) <= 1e-5);
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let spec = ConvSpec::new(3, 4, 3);
        let err = conv2d(&Tensor::zeros(&[1, 2, 5, 5]), &Tensor::zeros(&[4, 3, 3, 3]), None, &spec).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let err = conv2d(&Tensor::zeros(&[1, 3, 5, 5]), &Tensor::zeros(&[4, 3, 3, 2]), None, &spec).unwrap_err();
        assert!(err.to_string().contains("kernel_w"), "{err}");
        let tiny = ConvSpec::new(3, 4, 3).with_pad(0, 0);
        let err = conv2d(&Tensor::zeros(&[1, 3, 2, 5]), &Tensor::zeros(&[4, 3, 3, 3]), None, &tiny).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn forward_is_deterministic() {
        let mut r = rng();
        let spec = ConvSpec::new(3, 5, 3).with_stride(2);
        let x = Tensor::randn(&[2, 3, 10, 10], 1.0, &mut r);
        let w = Tensor::randn(&spec.weight_dims(), 1.0, &mut r);
        let a = conv2d(&x, &w, None, &spec).unwrap();
        let b = conv2d(&x, &w, None, &spec).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
