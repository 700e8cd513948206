//! RoI warping: quantized RoI max pooling, quantized PSRoI average pooling
//! and their bilinear "aligned" counterparts.
//!
//! Quantized bins: the RoI is scaled and rounded to integer cells
//! `[round(x1·s), round(x2·s)]` (inclusive, at least one cell), and bin `j`
//! covers `floor(j·bw) .. ceil((j+1)·bw)` of it, clipped to the map.
//!
//! Aligned bins: a RoI coordinate `c` maps to feature coordinate `c·s − 0.5`
//! (cell centres sit on integers). Each bin averages `sr²` bilinear samples
//! at `(i + 0.5)/sr` fractions of the bin; samples outside the map read 0.
//!
//! Position-sensitive variants read channel `a·p² + i·p + j` for output
//! group `a`, bin `(i, j)`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoI {
    pub batch_index: usize,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl RoI {
    pub fn new(batch_index: usize, x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { batch_index, x1, y1, x2, y2 }
    }

    /// Parses `batch x1 y1 x2 y2`.
    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(Error::Format(format!("expected `batch x1 y1 x2 y2`, got {line:?}")));
        }
        let batch_index = f[0].parse().map_err(|_| Error::Format(format!("bad batch index {:?}", f[0])))?;
        let mut c = [0f32; 4];
        for (v, s) in c.iter_mut().zip(&f[1..]) {
            *v = s.parse().map_err(|_| Error::Format(format!("bad coordinate {s:?}")))?;
        }
        Ok(Self::new(batch_index, c[0], c[1], c[2], c[3]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpSpec {
    pub p: usize,
    /// Output channels per bin for position-sensitive pooling.
    pub alpha: usize,
    pub spatial_scale: f32,
    pub aligned: bool,
    pub sampling_ratio: usize,
}

impl WarpSpec {
    pub fn new(p: usize, alpha: usize, spatial_scale: f32) -> Self {
        Self { p, alpha, spatial_scale, aligned: true, sampling_ratio: 2 }
    }

    pub fn quantized(self) -> Self {
        Self { aligned: false, ..self }
    }

    pub fn with_sampling_ratio(self, sampling_ratio: usize) -> Self {
        Self { sampling_ratio, ..self }
    }

    /// `α·p·p`, the channel count a PSRoI input must have.
    pub fn ps_channels(&self) -> usize {
        self.alpha * self.p * self.p
    }

    fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidArgument("pooling size p must be at least 1".into()));
        }
        if !(self.spatial_scale > 0.0 && self.spatial_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("spatial_scale must be positive, got {}", self.spatial_scale)));
        }
        if self.aligned && self.sampling_ratio == 0 {
            return Err(Error::InvalidArgument("sampling_ratio must be at least 1".into()));
        }
        Ok(())
    }
}

fn check(op: &'static str, features: &Tensor, rois: &[RoI], spec: &WarpSpec, ps: bool) -> Result<[usize; 4]> {
    spec.validate()?;
    if features.rank() != 4 {
        return Err(Error::Shape { op, msg: format!("features must be [N,C,H,W], got {:?}", features.dims()) });
    }
    let [n, c, h, w] = features.nchw();
    for (i, r) in rois.iter().enumerate() {
        if r.batch_index >= n {
            return Err(Error::InvalidArgument(format!(
                "{op}: RoI {i} has batch index {} but features hold {n} images",
                r.batch_index
            )));
        }
        let finite = [r.x1, r.y1, r.x2, r.y2].iter().all(|v| v.is_finite());
        if !finite || r.x2 < r.x1 || r.y2 < r.y1 {
            return Err(Error::InvalidArgument(format!("{op}: RoI {i} is malformed: {r:?}")));
        }
    }
    if ps && c != spec.ps_channels() {
        return Err(Error::Shape {
            op,
            msg: format!(
                "{c} channels are not alpha*p*p = {}*{}*{} = {}",
                spec.alpha,
                spec.p,
                spec.p,
                spec.ps_channels()
            ),
        });
    }
    Ok([n, c, h, w])
}

/// Integer bin extents `(start, end)` along one axis, end exclusive: bin `j`
/// spans `floor(j·size/p) .. ceil((j+1)·size/p)` from the rounded RoI start.
pub fn quantized_bins(lo: f32, hi: f32, scale: f32, p: usize, len: usize) -> Vec<(usize, usize)> {
    let start = (lo * scale).round() as i64;
    let end = (hi * scale).round() as i64;
    let size = (end - start + 1).max(1);
    let p = p as i64;
    let clip = |v: i64| v.clamp(0, len as i64) as usize;
    (0..p)
        .map(|j| {
            let s = (j * size).div_euclid(p) + start;
            let e = ((j + 1) * size + p - 1).div_euclid(p) + start;
            (clip(s), clip(e))
        })
        .collect()
}

/// Max pooling over quantized bins. Returns the output and, per output
/// element, the flat input index of its maximum (`u32::MAX` for empty bins).
pub fn roi_pool_with_argmax(features: &Tensor, rois: &[RoI], spec: &WarpSpec) -> Result<(Tensor, Vec<u32>)> {
    let [_, c, h, w] = check("roi_pool", features, rois, spec, false)?;
    let p = spec.p;
    let data = features.data();
    let mut out = vec![0f32; rois.len() * c * p * p];
    let mut arg = vec![u32::MAX; out.len()];
    for (r, roi) in rois.iter().enumerate() {
        let ys = quantized_bins(roi.y1, roi.y2, spec.spatial_scale, p, h);
        let xs = quantized_bins(roi.x1, roi.x2, spec.spatial_scale, p, w);
        for ch in 0..c {
            let plane = (roi.batch_index * c + ch) * h * w;
            for (i, &(hs, he)) in ys.iter().enumerate() {
                for (j, &(ws, we)) in xs.iter().enumerate() {
                    let o = ((r * c + ch) * p + i) * p + j;
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = u32::MAX;
                    for y in hs..he {
                        for x in ws..we {
                            let idx = plane + y * w + x;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    if best_idx != u32::MAX {
                        out[o] = best;
                        arg[o] = best_idx;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[rois.len(), c, p, p], out)?, arg))
}

pub fn roi_pool(features: &Tensor, rois: &[RoI], spec: &WarpSpec) -> Result<Tensor> {
    roi_pool_with_argmax(features, rois, spec).map(|(t, _)| t)
}

pub fn roi_pool_backward(input_len: usize, argmax: &[u32], grad: &[f32]) -> Vec<f32> {
    let mut g = vec![0f32; input_len];
    for (&a, &d) in argmax.iter().zip(grad) {
        if a != u32::MAX {
            g[a as usize] += d;
        }
    }
    g
}

/// Position-sensitive average pooling over quantized bins.
pub fn psroi_pool(features: &Tensor, rois: &[RoI], spec: &WarpSpec) -> Result<Tensor> {
    let [_, c, h, w] = check("psroi_pool", features, rois, spec, true)?;
    let (p, alpha) = (spec.p, spec.alpha);
    let data = features.data();
    let mut out = vec![0f32; rois.len() * alpha * p * p];
    for (r, roi) in rois.iter().enumerate() {
        let ys = quantized_bins(roi.y1, roi.y2, spec.spatial_scale, p, h);
        let xs = quantized_bins(roi.x1, roi.x2, spec.spatial_scale, p, w);
        for a in 0..alpha {
            for (i, &(hs, he)) in ys.iter().enumerate() {
                for (j, &(ws, we)) in xs.iter().enumerate() {
                    let plane = (roi.batch_index * c + (a * p + i) * p + j) * h * w;
                    let mut sum = 0f32;
                    for y in hs..he {
                        for x in ws..we {
                            sum += data[plane + y * w + x];
                        }
                    }
                    let count = (he - hs) * (we - ws);
                    if count > 0 {
                        out[((r * alpha + a) * p + i) * p + j] = sum / count as f32;
                    }
                }
            }
        }
    }
    Tensor::new(&[rois.len(), alpha, p, p], out)
}

pub fn psroi_pool_backward(features_dims: &[usize], rois: &[RoI], spec: &WarpSpec, grad: &[f32]) -> Vec<f32> {
    let (c, h, w) = (features_dims[1], features_dims[2], features_dims[3]);
    let (p, alpha) = (spec.p, spec.alpha);
    let mut g = vec![0f32; features_dims.iter().product()];
    for (r, roi) in rois.iter().enumerate() {
        let ys = quantized_bins(roi.y1, roi.y2, spec.spatial_scale, p, h);
        let xs = quantized_bins(roi.x1, roi.x2, spec.spatial_scale, p, w);
        for a in 0..alpha {
            for (i, &(hs, he)) in ys.iter().enumerate() {
                for (j, &(ws, we)) in xs.iter().enumerate() {
                    let count = (he - hs) * (we - ws);
                    if count == 0 {
                        continue;
                    }
                    let d = grad[((r * alpha + a) * p + i) * p + j] / count as f32;
                    let plane = (roi.batch_index * c + (a * p + i) * p + j) * h * w;
                    for y in hs..he {
                        for x in ws..we {
                            g[plane + y * w + x] += d;
                        }
                    }
                }
            }
        }
    }
    g
}

/// Zero-padded bilinear interpolation weights at feature coordinate `(y, x)`:
/// up to four `(flat offset within the plane, weight)` pairs.
pub fn bilinear_taps(y: f32, x: f32, h: usize, w: usize) -> impl Iterator<Item = (usize, f32)> {
    let (y0, x0) = (y.floor(), x.floor());
    let (ly, lx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x0 + 1, (1.0 - ly) * lx),
        (y0 + 1, x0, ly * (1.0 - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    ]
    .into_iter()
    .filter(move |&(yy, xx, wt)| wt != 0.0 && yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w)
    .map(move |(yy, xx, wt)| (yy as usize * w + xx as usize, wt))
}

/// Single bilinear sample of one plane.
pub fn bilinear(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    bilinear_taps(y, x, h, w).map(|(i, wt)| wt * plane[i]).sum()
}

/// Sample coordinates of bin `j` along one axis, in feature units.
pub fn aligned_samples(lo: f32, hi: f32, scale: f32, p: usize, sr: usize, j: usize) -> Vec<f32> {
    let start = lo * scale - 0.5;
    let bin = (hi - lo) * scale / p as f32;
    (0..sr)
        .map(|s| start + j as f32 * bin + (s as f32 + 0.5) * bin / sr as f32)
        .collect()
}

/// Sparse linear map from features to pooled output: `out[o] = Σ w·f[i]`.
#[derive(Debug, Clone, Default)]
pub struct SamplingPlan {
    /// `(output index, input index, weight)` in output-ascending order.
    entries: Vec<(u32, u32, f32)>,
}

impl SamplingPlan {
    fn build(features_dims: [usize; 4], rois: &[RoI], spec: &WarpSpec, ps: bool) -> Self {
        let [_, c, h, w] = features_dims;
        let (p, sr) = (spec.p, spec.sampling_ratio);
        let groups = if ps { spec.alpha } else { c };
        let norm = 1.0 / (sr * sr) as f32;
        let mut entries = Vec::new();
        for (r, roi) in rois.iter().enumerate() {
            let ys: Vec<Vec<f32>> = (0..p).map(|i| aligned_samples(roi.y1, roi.y2, spec.spatial_scale, p, sr, i)).collect();
            let xs: Vec<Vec<f32>> = (0..p).map(|j| aligned_samples(roi.x1, roi.x2, spec.spatial_scale, p, sr, j)).collect();
            for g in 0..groups {
                for i in 0..p {
                    for j in 0..p {
                        let o = (((r * groups + g) * p + i) * p + j) as u32;
                        let ch = if ps { (g * p + i) * p + j } else { g };
                        let plane = (roi.batch_index * c + ch) * h * w;
                        for &y in &ys[i] {
                            for &x in &xs[j] {
                                for (off, wt) in bilinear_taps(y, x, h, w) {
                                    entries.push((o, (plane + off) as u32, wt * norm));
                                }
                            }
                        }
                    }
                }
            }
        }
        Self { entries }
    }

    fn apply(&self, input: &[f32], out_len: usize) -> Vec<f32> {
        let mut out = vec![0f32; out_len];
        for &(o, i, wt) in &self.entries {
            out[o as usize] += wt * input[i as usize];
        }
        out
    }

    fn transpose_apply(&self, grad: &[f32], in_len: usize) -> Vec<f32> {
        let mut g = vec![0f32; in_len];
        for &(o, i, wt) in &self.entries {
            g[i as usize] += wt * grad[o as usize];
        }
        g
    }
}

fn aligned(op: &'static str, features: &Tensor, rois: &[RoI], spec: &WarpSpec, ps: bool) -> Result<(Tensor, SamplingPlan)> {
    let dims = check(op, features, rois, spec, ps)?;
    let groups = if ps { spec.alpha } else { dims[1] };
    let plan = SamplingPlan::build(dims, rois, spec, ps);
    let out_dims = [rois.len(), groups, spec.p, spec.p];
    let out = plan.apply(features.data(), out_dims.iter().product());
    Ok((Tensor::new(&out_dims, out)?, plan))
}

/// Position-sensitive bilinear pooling without quantization.
pub fn psroi_pool_aligned(features: &Tensor, rois: &[RoI], spec: &WarpSpec) -> Result<Tensor> {
    aligned("psroi_pool_aligned", features, rois, spec, true).map(|(t, _)| t)
}

/// Bilinear average pooling over every channel.
pub fn roi_align(features: &Tensor, rois: &[RoI], spec: &WarpSpec) -> Result<Tensor> {
    aligned("roi_align", features, rois, spec, false).map(|(t, _)| t)
}

/// Gradient of an aligned variant with respect to its features.
pub fn aligned_backward(features_dims: &[usize], rois: &[RoI], spec: &WarpSpec, ps: bool, grad: &[f32]) -> Vec<f32> {
    let dims = [features_dims[0], features_dims[1], features_dims[2], features_dims[3]];
    SamplingPlan::build(dims, rois, spec, ps).transpose_apply(grad, dims.iter().product())
}

impl Tape {
    pub fn roi_pool(&mut self, x: Var, rois: &[RoI], spec: WarpSpec) -> Result<Var> {
        let (out, argmax) = roi_pool_with_argmax(self.value(x), rois, &spec)?;
        Ok(self.custom(
            "roi_pool",
            &[x],
            out,
            Box::new(move |c| Ok(vec![Some(roi_pool_backward(c.inputs[0].numel(), &argmax, c.grad))])),
        ))
    }

    pub fn psroi_pool(&mut self, x: Var, rois: &[RoI], spec: WarpSpec) -> Result<Var> {
        let out = psroi_pool(self.value(x), rois, &spec)?;
        let rois = rois.to_vec();
        Ok(self.custom(
            "psroi_pool",
            &[x],
            out,
            Box::new(move |c| Ok(vec![Some(psroi_pool_backward(c.inputs[0].dims(), &rois, &spec, c.grad))])),
        ))
    }

    pub fn psroi_pool_aligned(&mut self, x: Var, rois: &[RoI], spec: WarpSpec) -> Result<Var> {
        self.aligned_op("psroi_pool_aligned", x, rois, spec, true)
    }

    pub fn roi_align(&mut self, x: Var, rois: &[RoI], spec: WarpSpec) -> Result<Var> {
        self.aligned_op("roi_align", x, rois, spec, false)
    }

    /// PSRoI pooling, aligned or quantized according to `spec.aligned`.
    pub fn psroi_warp(&mut self, x: Var, rois: &[RoI], spec: WarpSpec) -> Result<Var> {
        if spec.aligned {
            self.psroi_pool_aligned(x, rois, spec)
        } else {
            self.psroi_pool(x, rois, spec)
        }
    }

    fn aligned_op(&mut self, op: &'static str, x: Var, rois: &[RoI], spec: WarpSpec, ps: bool) -> Result<Var> {
        let (out, plan) = aligned(op, self.value(x), rois, &spec, ps)?;
        Ok(self.custom(
            op,
            &[x],
            out,
            Box::new(move |c| Ok(vec![Some(plan.transpose_apply(c.grad, c.inputs[0].numel()))])),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[1, 1, h, w], |i| (i % w) as f32)
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let f = Tensor::full(&[1, 2, 10, 10], 3.5);
        let roi = [RoI::new(0, 1.0, 2.0, 7.3, 8.0)];
        let spec = WarpSpec::new(3, 1, 1.0);
        assert!(roi_pool(&f, &roi, &spec.quantized()).unwrap().data().iter().all(|&v| v == 3.5));
        let a = roi_align(&f, &roi, &spec).unwrap();
        assert!(a.data().iter().all(|&v| (v - 3.5).abs() < 1e-6));
    }

    #[test]
    fn roi_covering_p_by_p_cells_copies_them() {
        let f = Tensor::from_fn(&[1, 1, 8, 8], |i| i as f32);
        let out = roi_pool(&f, &[RoI::new(0, 2.0, 3.0, 4.0, 5.0)], &WarpSpec::new(3, 1, 1.0).quantized()).unwrap();
        let want: Vec<f32> = (3..6).flat_map(|y| (2..5).map(move |x| (y * 8 + x) as f32)).collect();
        assert_eq!(out.data(), want.as_slice());
    }

    #[test]
    fn psroi_reads_its_own_channel() {
        let p = 3;
        let f = Tensor::from_fn(&[1, p * p, 6, 6], |i| (i / 36) as f32 * 10.0);
        let spec = WarpSpec::new(p, 1, 1.0);
        let roi = [RoI::new(0, 1.0, 1.0, 5.0, 5.0)];
        for out in [psroi_pool(&f, &roi, &spec.quantized()).unwrap(), psroi_pool_aligned(&f, &roi, &spec).unwrap()] {
            for (k, &v) in out.data().iter().enumerate() {
                assert!((v - 10.0 * k as f32).abs() < 1e-4, "bin {k}: {v}");
            }
        }
    }

    #[test]
    fn psroi_channel_count_checked() {
        let f = Tensor::zeros(&[1, 10, 4, 4]);
        let e = psroi_pool(&f, &[RoI::new(0, 0.0, 0.0, 2.0, 2.0)], &WarpSpec::new(3, 1, 1.0).quantized());
        assert!(matches!(e, Err(Error::Shape { .. })));
    }

    #[test]
    fn batch_index_checked() {
        let f = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(roi_pool(&f, &[RoI::new(1, 0.0, 0.0, 2.0, 2.0)], &WarpSpec::new(2, 1, 1.0).quantized()).is_err());
    }

    #[test]
    fn empty_bin_is_zero_without_gradient() {
        let f = Tensor::full(&[1, 1, 4, 4], 2.0);
        let (out, arg) = roi_pool_with_argmax(&f, &[RoI::new(0, 10.0, 10.0, 12.0, 12.0)], &WarpSpec::new(2, 1, 1.0).quantized()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(arg.iter().all(|&a| a == u32::MAX));
    }

    #[test]
    fn integer_grid_sample_is_raw_value() {
        let f = Tensor::from_fn(&[1, 1, 5, 5], |i| (i * i) as f32);
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(bilinear(f.data(), 5, 5, y as f32, x as f32), f.data()[y * 5 + x]);
            }
        }
    }

    #[test]
    fn unit_roi_blends_four_neighbours() {
        let f = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i * 7) % 5) as f32);
        let spec = WarpSpec::new(1, 1, 1.0).with_sampling_ratio(1);
        // centre of pixel box (1.3, 1.6)-(2.3, 2.6) lands at feature (1.6, 1.3)
        let out = roi_align(&f, &[RoI::new(0, 1.3, 1.6, 2.3, 2.6)], &spec).unwrap();
        let v = |y: usize, x: usize| f.data()[y * 4 + x];
        let (ly, lx) = (0.6f32, 0.3f32);
        let want = (1.0 - ly) * (1.0 - lx) * v(1, 1) + (1.0 - ly) * lx * v(1, 2) + ly * (1.0 - lx) * v(2, 1) + ly * lx * v(2, 2);
        assert!((out.data()[0] - want).abs() < 1e-5);
    }

    #[test]
    fn linear_ramp_gives_bin_centres() {
        let f = ramp(12, 12);
        let spec = WarpSpec::new(4, 1, 1.0);
        let roi = RoI::new(0, 2.0, 2.0, 10.0, 10.0);
        let out = roi_align(&f, &[roi], &spec).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let centre = roi.x1 - 0.5 + (j as f32 + 0.5) * 2.0;
                assert!((out.data()[i * 4 + j] - centre).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn parse_roi_line() {
        assert_eq!(RoI::parse("1 2 3 4.5 6").unwrap(), RoI::new(1, 2.0, 3.0, 4.5, 6.0));
        assert!(RoI::parse("1 2 3").is_err());
    }

    #[test]
    fn zero_rois_give_empty_output() {
        let f = Tensor::zeros(&[1, 18, 4, 4]);
        let out = psroi_pool_aligned(&f, &[], &WarpSpec::new(3, 2, 1.0)).unwrap();
        assert_eq!(out.dims(), &[0, 2, 3, 3]);
    }
}
