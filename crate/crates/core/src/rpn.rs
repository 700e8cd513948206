//! Region proposal machinery: anchors, IoU, label assignment, box deltas,
//! NMS, proposal selection and the RPN training loss.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in image pixels; width is `x2 - x1`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x1 + 0.5 * self.width(), self.y1 + 0.5 * self.height())
    }

    pub fn clip(&self, img_h: f32, img_w: f32) -> Self {
        Self {
            x1: self.x1.clamp(0.0, img_w),
            y1: self.y1.clamp(0.0, img_h),
            x2: self.x2.clamp(0.0, img_w),
            y2: self.y2.clamp(0.0, img_h),
        }
    }
}

/// Intersection over union; zero-area boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpec {
    /// Aspect ratios as height / width.
    pub ratios: Vec<f32>,
    /// Anchor areas in square pixels.
    pub areas: Vec<f32>,
    pub stride: usize,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            ratios: vec![0.5, 1.0, 2.0],
            areas: [32.0f32, 64.0, 128.0, 256.0, 512.0].iter().map(|s| s * s).collect(),
            stride: 16,
        }
    }
}

impl AnchorSpec {
    /// Areas shrunk for 64×64 inputs.
    pub fn toy() -> Self {
        Self {
            areas: [8.0f32, 16.0, 32.0].iter().map(|s| s * s).collect(),
            ..Self::default()
        }
    }

    pub fn per_cell(&self) -> usize {
        self.ratios.len() * self.areas.len()
    }
}

/// Anchors for every cell in row-major order; within a cell, ratio-major then area.
pub fn gen_anchors(spec: &AnchorSpec, feat_h: usize, feat_w: usize) -> Vec<BBox> {
    let mut out = Vec::with_capacity(feat_h * feat_w * spec.per_cell());
    let s = spec.stride as f64;
    for y in 0..feat_h {
        for x in 0..feat_w {
            let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            for &r in &spec.ratios {
                for &area in &spec.areas {
                    let w = (area as f64 / r as f64).sqrt();
                    let h = (area as f64 * r as f64).sqrt();
                    out.push(BBox::new(
                        (cx - w / 2.0) as f32,
                        (cy - h / 2.0) as f32,
                        (cx + w / 2.0) as f32,
                        (cy + h / 2.0) as f32,
                    ));
                }
            }
        }
    }
    out
}

/// Largest |tw|, |th| accepted by [`decode_deltas`].
pub const DELTA_CLAMP: f32 = 4.0;

pub fn encode_deltas(anchor: &BBox, gt: &BBox) -> Result<[f32; 4]> {
    let (aw, ah, gw, gh) = (anchor.width(), anchor.height(), gt.width(), gt.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::InvalidArgument(format!("anchor has non-positive size: {anchor:?}")));
    }
    if !(gw > 0.0 && gh > 0.0) {
        return Err(Error::InvalidArgument(format!("ground truth has non-positive size: {gt:?}")));
    }
    let ((ax, ay), (gx, gy)) = (anchor.center(), gt.center());
    Ok([(gx - ax) / aw, (gy - ay) / ah, (gw / aw).ln(), (gh / ah).ln()])
}

pub fn decode_deltas(anchor: &BBox, d: &[f32; 4]) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (ax, ay) = anchor.center();
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = ah * d[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelAssignment {
    pub labels: Vec<Label>,
    /// Highest-IoU ground truth per anchor (lowest index on ties).
    pub matched: Vec<Option<usize>>,
    /// Regression target for positives, zeros elsewhere.
    pub targets: Vec<[f32; 4]>,
}

impl LabelAssignment {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| **l == Label::Positive).map(|(i, _)| i)
    }
}

/// Positive when IoU > `pos` with some gt or when the anchor attains a gt's
/// best (non-zero) IoU; negative when every IoU is below `neg`; else ignored.
pub fn assign_labels(anchors: &[BBox], gts: &[BBox], pos: f32, neg: f32) -> Result<LabelAssignment> {
    if !(0.0 < neg && neg <= pos && pos < 1.0) {
        return Err(Error::InvalidArgument(format!("thresholds must satisfy 0 < neg <= pos < 1, got {neg}, {pos}")));
    }
    let n = anchors.len();
    let mut labels = vec![Label::Negative; n];
    let mut matched = vec![None; n];
    let mut targets = vec![[0f32; 4]; n];
    if gts.is_empty() {
        return Ok(LabelAssignment { labels, matched, targets });
    }
    let ious: Vec<Vec<f32>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    let mut gt_best = vec![0f32; gts.len()];
    for row in &ious {
        for (g, &v) in row.iter().enumerate() {
            gt_best[g] = gt_best[g].max(v);
        }
    }
    for (i, row) in ious.iter().enumerate() {
        let (best_g, best) = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |acc, (g, &v)| if v > acc.1 { (g, v) } else { acc });
        matched[i] = Some(best_g);
        let is_argmax = row.iter().zip(&gt_best).any(|(&v, &b)| b > 0.0 && v == b);
        labels[i] = if best > pos || is_argmax {
            Label::Positive
        } else if best < neg {
            Label::Negative
        } else {
            Label::Ignore
        };
        if labels[i] == Label::Positive {
            targets[i] = encode_deltas(&anchors[i], &gts[best_g])?;
        }
    }
    Ok(LabelAssignment { labels, matched, targets })
}

/// Greedy NMS. Boxes are visited by descending score (ties: lower index
/// first); a box is dropped when its IoU with an already kept box exceeds
/// `thresh`. Returns kept indices in selection order.
pub fn nms(boxes: &[BBox], scores: &[f32], thresh: f32) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let order = sorted_by_score(scores);
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Indices by descending score, stable on ties.
pub fn sorted_by_score(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms_train: usize,
    pub pre_nms_test: usize,
    pub post_nms_train: usize,
    pub post_nms_test: usize,
    pub nms_thresh: f32,
    pub min_size: f32,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            pre_nms_train: 12000,
            pre_nms_test: 6000,
            post_nms_train: 2000,
            post_nms_test: 1000,
            nms_thresh: 0.7,
            min_size: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f32,
}

/// Decodes every anchor, clips to the image, drops boxes with a side below
/// `min_size`, keeps the top pre-NMS candidates, runs NMS and caps the result.
pub fn propose(
    scores: &[f32],
    deltas: &[[f32; 4]],
    anchors: &[BBox],
    image_hw: (usize, usize),
    cfg: &ProposalConfig,
    train: bool,
) -> Result<Vec<Proposal>> {
    if scores.len() != anchors.len() || deltas.len() != anchors.len() {
        return Err(Error::InvalidArgument(format!(
            "propose: {} scores, {} deltas, {} anchors",
            scores.len(),
            deltas.len(),
            anchors.len()
        )));
    }
    let (pre, post) = if train {
        (cfg.pre_nms_train, cfg.post_nms_train)
    } else {
        (cfg.pre_nms_test, cfg.post_nms_test)
    };
    let (h, w) = (image_hw.0 as f32, image_hw.1 as f32);
    let mut boxes = Vec::new();
    let mut kept_scores = Vec::new();
    for i in sorted_by_score(scores) {
        if boxes.len() == pre {
            break;
        }
        let b = decode_deltas(&anchors[i], &deltas[i]).clip(h, w);
        if b.width() >= cfg.min_size && b.height() >= cfg.min_size {
            boxes.push(b);
            kept_scores.push(scores[i]);
        }
    }
    Ok(nms(&boxes, &kept_scores, cfg.nms_thresh)
        .into_iter()
        .take(post)
        .map(|i| Proposal { bbox: boxes[i], score: kept_scores[i] })
        .collect())
}

/// Up to `batch` anchor indices: positives first drawn up to
/// `batch · pos_fraction`, negatives fill the rest. Returned sorted.
pub fn sample_anchors<R: Rng>(labels: &[Label], batch: usize, pos_fraction: f32, rng: &mut R) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Positive).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Negative).collect();
    let n_pos = pos.len().min((batch as f32 * pos_fraction) as usize);
    pos.partial_shuffle(rng, n_pos);
    let n_neg = neg.len().min(batch - n_pos);
    neg.partial_shuffle(rng, n_neg);
    let mut out: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    out.sort_unstable();
    out
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth L1 with transition at 1, and its derivative.
pub fn smooth_l1(x: f32) -> (f32, f32) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Training targets of one image for the RPN loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnTargets {
    /// Sampled anchor indices (cell-major, anchor-minor).
    pub sampled: Vec<usize>,
    pub assignment: LabelAssignment,
}

/// Flat offset of anchor `a` of cell `(y, x)` inside a `[A·k, H, W]` slab.
fn slab_index(anchor: usize, per_cell: usize, k: usize, j: usize, hw: usize) -> usize {
    let (cell, a) = (anchor / per_cell, anchor % per_cell);
    (a * k + j) * hw + cell
}

/// Per-anchor objectness logits `[N, A, H, W]` reordered to anchor order.
pub fn anchor_logits(t: &Tensor, n: usize) -> Vec<f32> {
    let [_, a, h, w] = t.nchw();
    let hw = h * w;
    let base = n * a * hw;
    (0..a * hw).map(|i| t.data()[base + slab_index(i, a, 1, 0, hw)]).collect()
}

/// Per-anchor deltas `[N, 4A, H, W]` reordered to anchor order.
pub fn anchor_deltas(t: &Tensor, n: usize) -> Vec<[f32; 4]> {
    let [_, c, h, w] = t.nchw();
    let (a, hw) = (c / 4, h * w);
    let base = n * c * hw;
    (0..a * hw)
        .map(|i| std::array::from_fn(|j| t.data()[base + slab_index(i, a, 4, j, hw)]))
        .collect()
}

impl Tape {
    /// Binary cross-entropy over sampled anchors plus `reg_weight` times
    /// smooth-L1 on sampled positives, both divided by the total sample count.
    /// Returns `(total, cls, reg)` scalars.
    pub fn rpn_loss(&mut self, logits: Var, deltas: Var, targets: &[RpnTargets], reg_weight: f32) -> Result<(Var, f32, f32)> {
        let ld = self.dims(logits).to_vec();
        let dd = self.dims(deltas).to_vec();
        if ld.len() != 4 || dd.len() != 4 || dd[1] != 4 * ld[1] || ld[0] != targets.len() || ld[2..] != dd[2..] {
            return Err(Error::Shape { op: "rpn_loss", msg: format!("logits {ld:?}, deltas {dd:?}, {} images", targets.len()) });
        }
        let (a, hw) = (ld[1], ld[2] * ld[3]);
        let total: usize = targets.iter().map(|t| t.sampled.len()).sum();
        let norm = 1.0 / total.max(1) as f32;
        let lv = self.value(logits).data();
        let dv = self.value(deltas).data();
        let mut g_logits = vec![0f32; lv.len()];
        let mut g_deltas = vec![0f32; dv.len()];
        let (mut cls, mut reg) = (0f64, 0f64);
        for (n, t) in targets.iter().enumerate() {
            let (lb, db) = (n * a * hw, n * 4 * a * hw);
            for &i in &t.sampled {
                let li = lb + slab_index(i, a, 1, 0, hw);
                let x = lv[li];
                let positive = t.assignment.labels[i] == Label::Positive;
                // softplus(∓x) avoids cancellation for confident logits.
                let (loss, g) = if positive { (softplus(-x as f64), -sigmoid(-x)) } else { (softplus(x as f64), sigmoid(x)) };
                cls += loss;
                g_logits[li] = g * norm;
                if positive {
                    for j in 0..4 {
                        let di = db + slab_index(i, a, 4, j, hw);
                        let (l, d) = smooth_l1(dv[di] - t.assignment.targets[i][j]);
                        reg += l as f64;
                        g_deltas[di] = reg_weight * d * norm;
                    }
                }
            }
        }
        let cls = cls as f32 * norm;
        let reg = reg as f32 * norm;
        let out = Tensor::scalar(cls + reg_weight * reg);
        let v = self.custom(
            "rpn_loss",
            &[logits, deltas],
            out,
            Box::new(move |c| {
                let s = c.grad[0];
                Ok(vec![
                    Some(g_logits.iter().map(|g| g * s).collect()),
                    Some(g_deltas.iter().map(|g| g * s).collect()),
                ])
            }),
        );
        Ok((v, cls, reg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_count_and_shapes() {
        let spec = AnchorSpec::default();
        assert_eq!(spec.per_cell(), 15);
        assert_eq!(gen_anchors(&spec, 50, 75).len(), 56_250);
        let a = gen_anchors(&spec, 1, 1);
        let square = a[5];
        assert!((square.width() - 32.0).abs() < 1e-4 && (square.height() - 32.0).abs() < 1e-4);
        let tall = a[10];
        assert!((tall.width() - 22.627417).abs() < 1e-3);
        assert!((tall.height() - 45.254834).abs() < 1e-3);
        assert_eq!(square.center(), (8.0, 8.0));
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(10.0, 10.0, 20.0, 20.0)), 0.0);
        assert!((iou(&a, &BBox::new(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-6);
        assert_eq!(iou(&BBox::new(1.0, 1.0, 1.0, 5.0), &a), 0.0);
    }

    #[test]
    fn identical_anchor_is_positive_with_zero_target() {
        let g = BBox::new(10.0, 10.0, 30.0, 40.0);
        let far = BBox::new(100.0, 100.0, 120.0, 120.0);
        let r = assign_labels(&[g, far], &[g], 0.7, 0.3).unwrap();
        assert_eq!(r.labels, vec![Label::Positive, Label::Negative]);
        assert_eq!(r.targets[0], [0.0; 4]);
    }

    #[test]
    fn argmax_rule_promotes_weak_best_anchor() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let half = BBox::new(0.0, 0.0, 10.0, 5.0);
        let r = assign_labels(&[half], &[g], 0.7, 0.3).unwrap();
        assert!((iou(&half, &g) - 0.5).abs() < 1e-6);
        assert_eq!(r.labels[0], Label::Positive);
    }

    #[test]
    fn no_gts_all_negative() {
        let r = assign_labels(&[BBox::new(0.0, 0.0, 4.0, 4.0)], &[], 0.7, 0.3).unwrap();
        assert_eq!(r.labels, vec![Label::Negative]);
    }

    #[test]
    fn delta_identities() {
        let a = BBox::new(3.0, 4.0, 20.0, 30.0);
        assert_eq!(encode_deltas(&a, &a).unwrap(), [0.0; 4]);
        assert_eq!(decode_deltas(&a, &[0.0; 4]), a);
        assert!(encode_deltas(&a, &BBox::new(1.0, 1.0, 1.0, 3.0)).is_err());
        let huge = decode_deltas(&a, &[0.0, 0.0, 50.0, -50.0]);
        assert!((huge.width() / a.width() - 4f32.exp()).abs() < 1e-3);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], &[], 0.5).is_empty());
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(0.0, 0.0, 10.0, 8.0);
        assert_eq!(nms(&[a, b], &[0.9, 0.8], 0.7), vec![0]);
        assert_eq!(nms(&[b, a], &[0.8, 0.9], 0.7), vec![1]);
        let c = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(nms(&[a, c], &[0.1, 0.2], 0.7), vec![1, 0]);
        assert_eq!(nms(&[a, a], &[0.5, 0.5], 0.7), vec![0]);
    }

    #[test]
    fn propose_prefix_and_dominant_object() {
        let spec = AnchorSpec::toy();
        let anchors = gen_anchors(&spec, 4, 4);
        let obj = BBox::new(14.0, 18.0, 40.0, 44.0);
        let scores: Vec<f32> = anchors.iter().map(|a| iou(a, &obj)).collect();
        let deltas = vec![[0.0; 4]; anchors.len()];
        let cfg = ProposalConfig { post_nms_test: 3, post_nms_train: 50, ..Default::default() };
        let test = propose(&scores, &deltas, &anchors, (64, 64), &cfg, false).unwrap();
        let train = propose(&scores, &deltas, &anchors, (64, 64), &cfg, true).unwrap();
        assert_eq!(test.len(), 3);
        assert_eq!(&train[..3], test.as_slice());
        assert!(iou(&test[0].bbox, &obj) >= 0.5);
        for p in &train {
            assert!(p.bbox.x1 >= 0.0 && p.bbox.x2 <= 64.0 && p.bbox.y1 >= 0.0 && p.bbox.y2 <= 64.0);
        }
    }

    #[test]
    fn sampling_respects_budget() {
        let mut labels = vec![Label::Negative; 100];
        for l in labels.iter_mut().take(40) {
            *l = Label::Positive;
        }
        labels[99] = Label::Ignore;
        let s = sample_anchors(&labels, 32, 0.5, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.len(), 32);
        assert_eq!(s.iter().filter(|&&i| i < 40).count(), 16);
        assert!(!s.contains(&99));
        let again = sample_anchors(&labels, 32, 0.5, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s, again);
    }

    #[test]
    fn anchor_reordering_matches_layout() {
        // A = 2 anchors per cell on a 1×2 map.
        let t = Tensor::from_fn(&[1, 2, 1, 2], |i| i as f32);
        assert_eq!(anchor_logits(&t, 0), vec![0.0, 2.0, 1.0, 3.0]);
        let d = Tensor::from_fn(&[1, 8, 1, 2], |i| i as f32);
        assert_eq!(anchor_deltas(&d, 0)[1], [8.0, 10.0, 12.0, 14.0]);
    }
}
