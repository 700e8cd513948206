//! Brute-force reference implementations and the equivalence suites that
//! compare the library against them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Check;
use crate::error::Result;
use crate::roi_warp::{psroi_pool, psroi_pool_aligned, roi_align, roi_pool, RoI, WarpSpec};
use crate::rpn::{assign_labels, encode_deltas, gen_anchors, iou, nms, AnchorSpec, BBox, Label, LabelAssignment};
use crate::tensor::Tensor;

pub const POOL_FIXTURES: usize = 100;
pub const NMS_BOXES: usize = 1000;
pub const NMS_THRESHOLDS: [f32; 3] = [0.3, 0.5, 0.7];
pub const ASSIGN_FIXTURES: usize = 50;
pub const SUPERSAMPLE_FIXTURES: usize = 20;
/// Samples per bin and axis of the integration oracle.
pub const SUPERSAMPLE: usize = 64;
/// Norm-relative tolerance of aligned pooling against the integration oracle.
pub const SUPERSAMPLE_TOLERANCE: f64 = 0.02;
/// Sampling ratio of the aligned-pooling fixtures compared to the oracle.
pub const SUPERSAMPLE_RATIO: usize = 16;

/// Runs every oracle suite with fixtures drawn from `seed`.
pub fn oracle_suites(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![pool_suite(&mut rng, false)?, pool_suite(&mut rng, true)?];
    out.extend(nms_suite(&mut rng));
    out.push(assign_suite(&mut rng)?);
    out.push(supersample_suite(&mut rng, true)?);
    out.push(supersample_suite(&mut rng, false)?);
    Ok(out)
}

/// Whether integer cell `t` (relative to the rounded RoI start) lies in bin
/// `j` of `p` over a `size`-cell extent: `floor(j·size/p) <= t < ceil((j+1)·size/p)`.
fn in_bin(t: i64, j: i64, size: i64, p: i64) -> bool {
    j * size < (t + 1) * p && t * p < (j + 1) * size
}

fn rounded_extent(lo: f32, hi: f32, scale: f32) -> (i64, i64) {
    let start = (lo * scale).round() as i64;
    let end = (hi * scale).round() as i64;
    (start, (end - start + 1).max(1))
}

/// Quantized pooling by scanning the whole map for each output bin: max for
/// RoI pooling, mean of the bin's own channel for PSRoI pooling.
pub fn quantized_pool_oracle(features: &Tensor, rois: &[RoI], spec: &WarpSpec, ps: bool) -> Tensor {
    let [_, c, h, w] = features.nchw();
    let p = spec.p;
    let groups = if ps { spec.alpha } else { c };
    let mut out = Tensor::zeros(&[rois.len(), groups, p, p]);
    for (r, roi) in rois.iter().enumerate() {
        let (ys, ysize) = rounded_extent(roi.y1, roi.y2, spec.spatial_scale);
        let (xs, xsize) = rounded_extent(roi.x1, roi.x2, spec.spatial_scale);
        for g in 0..groups {
            for i in 0..p {
                for j in 0..p {
                    let ch = if ps { (g * p + i) * p + j } else { g };
                    let mut best = f32::NEG_INFINITY;
                    let mut sum = 0f32;
                    let mut count = 0usize;
                    for y in 0..h {
                        for x in 0..w {
                            let inside = in_bin(y as i64 - ys, i as i64, ysize, p as i64)
                                && in_bin(x as i64 - xs, j as i64, xsize, p as i64);
                            if inside {
                                let v = features.at(&[roi.batch_index, ch, y, x]);
                                if v > best {
                                    best = v;
                                }
                                sum += v;
                                count += 1;
                            }
                        }
                    }
                    let value = match (count, ps) {
                        (0, _) => 0.0,
                        (_, true) => sum / count as f32,
                        (_, false) => best,
                    };
                    out.set(&[r, g, i, j], value);
                }
            }
        }
    }
    out
}

/// Bilinear surface with zero outside the map, as a sum of tent functions.
fn tent_sample(features: &Tensor, n: usize, ch: usize, y: f64, x: f64) -> f64 {
    let [_, _, h, w] = features.nchw();
    let mut v = 0.0;
    for yy in (y.floor() as i64).max(0)..=((y.floor() as i64) + 1).min(h as i64 - 1) {
        for xx in (x.floor() as i64).max(0)..=((x.floor() as i64) + 1).min(w as i64 - 1) {
            let wy = (1.0 - (y - yy as f64).abs()).max(0.0);
            let wx = (1.0 - (x - xx as f64).abs()).max(0.0);
            v += wy * wx * features.at(&[n, ch, yy as usize, xx as usize]) as f64;
        }
    }
    v
}

/// Mean of the bilinear surface over each bin, integrated with `SUPERSAMPLE²`
/// midpoint samples. Bins start at the half-pixel-shifted RoI corner.
pub fn supersampled_pool_oracle(features: &Tensor, rois: &[RoI], spec: &WarpSpec, ps: bool) -> Tensor {
    let c = features.dim(1);
    let p = spec.p;
    let groups = if ps { spec.alpha } else { c };
    let s = spec.spatial_scale as f64;
    let k = SUPERSAMPLE;
    let mut out = Tensor::zeros(&[rois.len(), groups, p, p]);
    for (r, roi) in rois.iter().enumerate() {
        let (y0, x0) = (roi.y1 as f64 * s - 0.5, roi.x1 as f64 * s - 0.5);
        let bh = (roi.y2 - roi.y1) as f64 * s / p as f64;
        let bw = (roi.x2 - roi.x1) as f64 * s / p as f64;
        for g in 0..groups {
            for i in 0..p {
                for j in 0..p {
                    let ch = if ps { (g * p + i) * p + j } else { g };
                    let mut acc = 0.0;
                    for a in 0..k {
                        let y = y0 + bh * (i as f64 + (a as f64 + 0.5) / k as f64);
                        for b in 0..k {
                            let x = x0 + bw * (j as f64 + (b as f64 + 0.5) / k as f64);
                            acc += tent_sample(features, roi.batch_index, ch, y, x);
                        }
                    }
                    out.set(&[r, g, i, j], (acc / (k * k) as f64) as f32);
                }
            }
        }
    }
    out
}

/// Greedy NMS by forward suppression over a precomputed IoU matrix.
pub fn nms_oracle(boxes: &[BBox], scores: &[f32], thresh: f32) -> Vec<usize> {
    let n = boxes.len();
    let overlap: Vec<Vec<f32>> = boxes.iter().map(|a| boxes.iter().map(|b| iou(a, b)).collect()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    for i in 1..n {
        let mut j = i;
        while j > 0 && scores[order[j]] > scores[order[j - 1]] {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut suppressed = vec![false; n];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &later in &order[pos + 1..] {
            if overlap[i][later] > thresh {
                suppressed[later] = true;
            }
        }
    }
    kept
}

/// Label assignment straight from the definitions, one anchor at a time.
pub fn assign_labels_oracle(anchors: &[BBox], gts: &[BBox], pos: f32, neg: f32) -> Result<LabelAssignment> {
    let mut labels = Vec::with_capacity(anchors.len());
    let mut matched = Vec::with_capacity(anchors.len());
    let mut targets = Vec::with_capacity(anchors.len());
    let gt_best: Vec<f32> = gts
        .iter()
        .map(|g| anchors.iter().map(|a| iou(a, g)).fold(0.0, f32::max))
        .collect();
    for a in anchors {
        if gts.is_empty() {
            labels.push(Label::Negative);
            matched.push(None);
            targets.push([0.0; 4]);
            continue;
        }
        let mut best = 0;
        for g in 1..gts.len() {
            if iou(a, &gts[g]) > iou(a, &gts[best]) {
                best = g;
            }
        }
        let best_iou = iou(a, &gts[best]);
        let attains_gt_best = (0..gts.len()).any(|g| gt_best[g] > 0.0 && iou(a, &gts[g]) == gt_best[g]);
        let label = if best_iou > pos || attains_gt_best {
            Label::Positive
        } else if best_iou < neg {
            Label::Negative
        } else {
            Label::Ignore
        };
        labels.push(label);
        matched.push(Some(best));
        targets.push(if label == Label::Positive { encode_deltas(a, &gts[best])? } else { [0.0; 4] });
    }
    Ok(LabelAssignment { labels, matched, targets })
}

fn random_features<R: Rng>(dims: &[usize], rng: &mut R) -> Tensor {
    if rng.gen_bool(0.5) {
        Tensor::from_fn(dims, |_| rng.gen_range(-4i32..=4) as f32 / 4.0)
    } else {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }
}

fn random_roi<R: Rng>(rng: &mut R, n: usize, h: usize, w: usize, scale: f32) -> RoI {
    let (ih, iw) = (h as f32 / scale, w as f32 / scale);
    let x1 = rng.gen_range(-0.2 * iw..1.1 * iw);
    let y1 = rng.gen_range(-0.2 * ih..1.1 * ih);
    let x2 = x1 + rng.gen_range(0.0..0.9 * iw);
    let y2 = y1 + rng.gen_range(0.0..0.9 * ih);
    RoI::new(rng.gen_range(0..n), x1, y1, x2, y2)
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.dims() == b.dims() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn pool_suite<R: Rng>(rng: &mut R, ps: bool) -> Result<Check> {
    let mut mismatches = 0usize;
    let mut first_bad = None;
    for f in 0..POOL_FIXTURES {
        let p = rng.gen_range(1..=4);
        let alpha = rng.gen_range(1..=3);
        let scale = [1.0, 0.5, 0.25, 1.0 / 16.0][rng.gen_range(0..4)];
        let spec = WarpSpec::new(p, alpha, scale).quantized();
        let c = if ps { spec.ps_channels() } else { rng.gen_range(1..=3) };
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(3..=12), rng.gen_range(3..=12));
        let features = random_features(&[n, c, h, w], rng);
        let rois: Vec<RoI> = (0..rng.gen_range(1..=5)).map(|_| random_roi(rng, n, h, w, scale)).collect();
        let got = if ps { psroi_pool(&features, &rois, &spec)? } else { roi_pool(&features, &rois, &spec)? };
        if !bits_equal(&got, &quantized_pool_oracle(&features, &rois, &spec, ps)) {
            mismatches += 1;
            first_bad.get_or_insert(f);
        }
    }
    let suite = if ps { "psroi_pool" } else { "roi_pool" };
    Ok(Check {
        suite,
        case: format!("{POOL_FIXTURES} fixtures"),
        passed: mismatches == 0,
        metric: mismatches as f64,
        detail: match first_bad {
            None => format!("bit-exact on all {POOL_FIXTURES} fixtures"),
            Some(f) => format!("{mismatches} fixtures differ, first at fixture {f}"),
        },
    })
}

fn nms_suite<R: Rng>(rng: &mut R) -> Vec<Check> {
    let boxes: Vec<BBox> = (0..NMS_BOXES)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..300.0f32), rng.gen_range(0.0..300.0f32));
            let (w, h) = (rng.gen_range(5.0..80.0f32), rng.gen_range(5.0..80.0f32));
            BBox::new(x, y, x + w, y + h)
        })
        .collect();
    // Two-decimal scores create ties, exercising the lower-index rule.
    let scores: Vec<f32> = (0..NMS_BOXES).map(|_| (rng.gen_range(0..100) as f32) / 100.0).collect();
    NMS_THRESHOLDS
        .iter()
        .map(|&t| {
            let got = nms(&boxes, &scores, t);
            let want = nms_oracle(&boxes, &scores, t);
            let same = got == want;
            Check {
                suite: "nms",
                case: format!("{NMS_BOXES} boxes, threshold {t}"),
                passed: same,
                metric: if same { 0.0 } else { 1.0 },
                detail: if same {
                    format!("identical {} kept indices", got.len())
                } else {
                    format!("kept {} vs oracle {}", got.len(), want.len())
                },
            }
        })
        .collect()
}

fn assign_suite<R: Rng>(rng: &mut R) -> Result<Check> {
    let mut mismatches = 0usize;
    for _ in 0..ASSIGN_FIXTURES {
        let spec = AnchorSpec {
            areas: (0..rng.gen_range(1..=3)).map(|_| [16.0f32, 24.0, 32.0, 48.0, 64.0][rng.gen_range(0..5)].powi(2)).collect(),
            ..AnchorSpec::default()
        };
        let (fh, fw) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let anchors = gen_anchors(&spec, fh, fw);
        let (ih, iw) = ((16 * fh) as f32, (16 * fw) as f32);
        let gts: Vec<BBox> = (0..rng.gen_range(0..=5))
            .map(|_| {
                if rng.gen_bool(0.3) {
                    anchors[rng.gen_range(0..anchors.len())]
                } else {
                    let (x, y) = (rng.gen_range(0.0..iw), rng.gen_range(0.0..ih));
                    BBox::new(x, y, x + rng.gen_range(4.0..48.0), y + rng.gen_range(4.0..48.0))
                }
            })
            .collect();
        let (pos, neg) = if rng.gen_bool(0.7) {
            (0.7, 0.3)
        } else {
            let neg = rng.gen_range(0.1..0.5);
            (rng.gen_range(neg..0.9), neg)
        };
        if assign_labels(&anchors, &gts, pos, neg)? != assign_labels_oracle(&anchors, &gts, pos, neg)? {
            mismatches += 1;
        }
    }
    Ok(Check {
        suite: "assign_labels",
        case: format!("{ASSIGN_FIXTURES} configurations"),
        passed: mismatches == 0,
        metric: mismatches as f64,
        detail: format!("{mismatches} of {ASSIGN_FIXTURES} configurations differ"),
    })
}

fn norm_relative(got: &Tensor, want: &Tensor) -> f64 {
    let diff: f64 = got.data().iter().zip(want.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    let norm: f64 = want.data().iter().map(|b| (*b as f64).powi(2)).sum();
    (diff / norm.max(f64::MIN_POSITIVE)).sqrt()
}

fn supersample_suite<R: Rng>(rng: &mut R, ps: bool) -> Result<Check> {
    let mut worst = 0f64;
    for _ in 0..SUPERSAMPLE_FIXTURES {
        let (p, alpha) = (rng.gen_range(1..=3), rng.gen_range(1..=2));
        let scale = [1.0, 0.5][rng.gen_range(0..2)];
        let spec = WarpSpec::new(p, alpha, scale).with_sampling_ratio(SUPERSAMPLE_RATIO);
        let c = if ps { spec.ps_channels() } else { rng.gen_range(1..=2) };
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(3..=8), rng.gen_range(3..=8));
        // Non-negative maps keep bin means away from cancellation, so the
        // relative error measures quadrature rather than a vanishing norm.
        let features = Tensor::from_fn(&[n, c, h, w], |_| rng.gen_range(0.0..1.0));
        let (ih, iw) = (h as f32 / scale, w as f32 / scale);
        let rois: Vec<RoI> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let (x1, y1) = (rng.gen_range(-0.1 * iw..0.5 * iw), rng.gen_range(-0.1 * ih..0.5 * ih));
                let (rw, rh) = (rng.gen_range(0.3 * iw..0.6 * iw), rng.gen_range(0.3 * ih..0.6 * ih));
                RoI::new(rng.gen_range(0..n), x1, y1, x1 + rw, y1 + rh)
            })
            .collect();
        let got = if ps { psroi_pool_aligned(&features, &rois, &spec)? } else { roi_align(&features, &rois, &spec)? };
        worst = worst.max(norm_relative(&got, &supersampled_pool_oracle(&features, &rois, &spec, ps)));
    }
    Ok(Check {
        suite: if ps { "psroi_aligned_integral" } else { "roi_align_integral" },
        case: format!("{SUPERSAMPLE_FIXTURES} fixtures, sampling ratio {SUPERSAMPLE_RATIO}"),
        passed: worst <= SUPERSAMPLE_TOLERANCE,
        metric: worst,
        detail: format!("worst norm-relative error {worst:.2e} vs {SUPERSAMPLE}x{SUPERSAMPLE} integration"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_membership_matches_floor_ceil() {
        for size in 1..20i64 {
            for p in 1..8i64 {
                for j in 0..p {
                    let lo = (j * size) / p;
                    let hi = ((j + 1) * size + p - 1) / p;
                    for t in -3..size + 3 {
                        assert_eq!(in_bin(t, j, size, p), lo <= t && t < hi, "size {size} p {p} j {j} t {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn nms_oracle_example() {
        let boxes = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(1.0, 1.0, 10.0, 10.0), BBox::new(20.0, 0.0, 30.0, 10.0)];
        assert_eq!(nms_oracle(&boxes, &[0.8, 0.9, 0.1], 0.7), vec![1, 2]);
        assert_eq!(nms_oracle(&boxes, &[0.5, 0.5, 0.5], 0.7), vec![0, 2]);
    }

    #[test]
    fn supersampled_constant_map_is_constant_inside() {
        let f = Tensor::full(&[1, 1, 6, 6], 2.0);
        let spec = WarpSpec::new(2, 1, 1.0);
        let out = supersampled_pool_oracle(&f, &[RoI::new(0, 1.0, 1.0, 5.0, 5.0)], &spec, false);
        assert!(out.data().iter().all(|v| (v - 2.0).abs() < 1e-5));
    }

    #[test]
    fn every_suite_passes() {
        let checks = oracle_suites(11).unwrap();
        for c in &checks {
            assert!(c.passed, "{}", c.render());
        }
    }
}
