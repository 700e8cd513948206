//! Light R-CNN subnet: flatten → FC → ReLU → sibling classification and
//! class-agnostic regression FCs, plus the OHEM-selected multi-task loss.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::rpn::{encode_deltas, iou, smooth_l1, BBox};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub p: usize,
    pub alpha: usize,
    pub fc_width: usize,
    /// Foreground classes; logits have one extra background entry at index 0.
    pub num_classes: usize,
    pub reg_loss_weight: f32,
    pub ohem_keep: usize,
    /// Regression targets are box deltas multiplied by these factors.
    pub delta_weights: [f32; 4],
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { p: 7, alpha: 10, fc_width: 2048, num_classes: 80, reg_loss_weight: 2.0, ohem_keep: 256, delta_weights: [10.0, 10.0, 5.0, 5.0] }
    }
}

impl HeadConfig {
    pub fn in_features(&self) -> usize {
        self.alpha * self.p * self.p
    }

    pub fn logits(&self) -> usize {
        self.num_classes + 1
    }
}

#[derive(Debug, Clone)]
pub struct RcnnHead {
    pub cfg: HeadConfig,
    pub fc: Linear,
    pub cls: Linear,
    pub reg: Linear,
}

impl RcnnHead {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: HeadConfig, rng: &mut R) -> Self {
        let fc = Linear::init(store, "head.fc", cfg.in_features(), cfg.fc_width, rng);
        let cls = Linear::with_std(store, "head.cls", cfg.fc_width, cfg.logits(), 0.01, rng);
        let reg = Linear::with_std(store, "head.reg", cfg.fc_width, 4, 0.001, rng);
        Self { cfg, fc, cls, reg }
    }

    /// `pooled [R, α, p, p]` → `(cls_logits [R, K+1], deltas [R, 4])`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, pooled: Var) -> Result<(Var, Var)> {
        let d = tape.dims(pooled).to_vec();
        let want = [self.cfg.alpha, self.cfg.p, self.cfg.p];
        if d.len() != 4 || d[1..] != want {
            return Err(Error::Shape { op: "head_forward", msg: format!("pooled input {d:?}, expected [R, {want:?}]") });
        }
        let flat = tape.reshape(pooled, &[d[0], self.cfg.in_features()])?;
        let h = self.fc.forward(tape, p, flat)?;
        let h = tape.relu(h);
        Ok((self.cls.forward(tape, p, h)?, self.reg.forward(tape, p, h)?))
    }
}

/// Indices of the `keep` largest losses, largest first, ties to the lower index.
pub fn ohem_select(losses: &[f32], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    order.truncate(keep);
    order
}

/// Log-softmax of one row, in f64.
fn log_softmax(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Second-stage targets for one image: per-RoI label (0 = background) and
/// regression target scaled by `weights` (zero for background).
pub fn assign_rcnn_targets(rois: &[BBox], gts: &[(BBox, usize)], fg_thresh: f32, weights: [f32; 4]) -> Result<(Vec<usize>, Vec<[f32; 4]>)> {
    let mut labels = Vec::with_capacity(rois.len());
    let mut targets = Vec::with_capacity(rois.len());
    for r in rois {
        let best = gts
            .iter()
            .enumerate()
            .map(|(g, (b, _))| (g, iou(r, b)))
            .fold(None, |acc: Option<(usize, f32)>, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        match best {
            Some((g, v)) if v >= fg_thresh => {
                labels.push(gts[g].1);
                let d = encode_deltas(r, &gts[g].0)?;
                targets.push(std::array::from_fn(|j| d[j] * weights[j]));
            }
            _ => {
                labels.push(0);
                targets.push([0.0; 4]);
            }
        }
    }
    Ok((labels, targets))
}

/// Per-RoI loss pieces and the OHEM selection behind a detection loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLoss {
    pub total: f32,
    pub cls: f32,
    pub reg: f32,
    pub per_roi: Vec<f32>,
    pub selected: Vec<usize>,
}

/// `CE + w · smoothL1` per RoI (regression on positives only), OHEM top-k per
/// group (RoIs sharing an entry of `groups` form one image), averaged over
/// the selected RoIs. Also returns the gradients w.r.t. logits and deltas.
pub fn detection_loss(
    logits: &Tensor,
    deltas: &Tensor,
    labels: &[usize],
    targets: &[[f32; 4]],
    groups: &[usize],
    cfg: &HeadConfig,
) -> Result<(DetectionLoss, Vec<f32>, Vec<f32>)> {
    let r = labels.len();
    let k = cfg.logits();
    if logits.dims() != [r, k] || deltas.dims() != [r, 4] || targets.len() != r || groups.len() != r {
        return Err(Error::Shape {
            op: "detection_loss",
            msg: format!("logits {:?}, deltas {:?}, {r} labels, {} targets", logits.dims(), deltas.dims(), targets.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > cfg.num_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..={}", cfg.num_classes)));
    }
    let mut cls_l = vec![0f64; r];
    let mut reg_l = vec![0f64; r];
    let mut lsm = Vec::with_capacity(r);
    for i in 0..r {
        let row = log_softmax(&logits.data()[i * k..(i + 1) * k]);
        cls_l[i] = -row[labels[i]];
        lsm.push(row);
        if labels[i] > 0 {
            reg_l[i] = (0..4).map(|j| smooth_l1(deltas.data()[i * 4 + j] - targets[i][j]).0 as f64).sum();
        }
    }
    let w = cfg.reg_loss_weight as f64;
    let per_roi: Vec<f32> = (0..r).map(|i| (cls_l[i] + w * reg_l[i]) as f32).collect();

    let mut selected = Vec::new();
    let mut images: Vec<usize> = groups.to_vec();
    images.sort_unstable();
    images.dedup();
    for g in images {
        let members: Vec<usize> = (0..r).filter(|&i| groups[i] == g).collect();
        let losses: Vec<f32> = members.iter().map(|&i| per_roi[i]).collect();
        selected.extend(ohem_select(&losses, cfg.ohem_keep).into_iter().map(|j| members[j]));
    }
    selected.sort_unstable();

    let m = selected.len().max(1) as f64;
    let (mut cls, mut reg) = (0f64, 0f64);
    let mut g_logits = vec![0f32; r * k];
    let mut g_deltas = vec![0f32; r * 4];
    for &i in &selected {
        cls += cls_l[i];
        reg += reg_l[i];
        for c in 0..k {
            let pc = lsm[i][c].exp() - if c == labels[i] { 1.0 } else { 0.0 };
            g_logits[i * k + c] = (pc / m) as f32;
        }
        if labels[i] > 0 {
            for j in 0..4 {
                let d = smooth_l1(deltas.data()[i * 4 + j] - targets[i][j]).1 as f64;
                g_deltas[i * 4 + j] = (w * d / m) as f32;
            }
        }
    }
    let (cls, reg) = (cls / m, reg / m);
    let loss = DetectionLoss { total: (cls + w * reg) as f32, cls: cls as f32, reg: reg as f32, per_roi, selected };
    Ok((loss, g_logits, g_deltas))
}

impl Tape {
    pub fn detection_loss(
        &mut self,
        logits: Var,
        deltas: Var,
        labels: &[usize],
        targets: &[[f32; 4]],
        groups: &[usize],
        cfg: &HeadConfig,
    ) -> Result<(Var, DetectionLoss)> {
        let (loss, gl, gd) = detection_loss(self.value(logits), self.value(deltas), labels, targets, groups, cfg)?;
        let v = self.custom(
            "detection_loss",
            &[logits, deltas],
            Tensor::scalar(loss.total),
            Box::new(move |c| {
                let s = c.grad[0];
                Ok(vec![Some(gl.iter().map(|g| g * s).collect()), Some(gd.iter().map(|g| g * s).collect())])
            }),
        );
        Ok((v, loss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> HeadConfig {
        HeadConfig { p: 2, alpha: 1, fc_width: 6, num_classes: 3, ..HeadConfig::default() }
    }

    #[test]
    fn first_fc_size() {
        let mut store = ParamStore::new();
        let head = RcnnHead::init(&mut store, HeadConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.get(head.fc.weight).numel(), 490 * 2048);
        assert_eq!(store.get(head.fc.weight).numel(), 1_003_520);
        assert_eq!(store.get(head.reg.weight).dims(), &[2048, 4]);
    }

    #[test]
    fn zero_input_gives_bias_and_empty_batch_works() {
        let mut store = ParamStore::new();
        let head = RcnnHead::init(&mut store, small(), &mut ChaCha8Rng::seed_from_u64(0));
        *store.get_mut(head.cls.bias) = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        store.get_mut(head.fc.bias).data_mut().fill(0.0);
        for r in [0, 3] {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let x = tape.constant(Tensor::zeros(&[r, 1, 2, 2]));
            let (c, d) = head.forward(&mut tape, &p, x).unwrap();
            assert_eq!(tape.dims(c), &[r, 4]);
            assert_eq!(tape.dims(d), &[r, 4]);
            for row in tape.value(c).data().chunks(4) {
                assert_eq!(row, &[0.5, -1.0, 2.0, 0.25]);
            }
        }
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let logits = Tensor::new(&[2, 4], vec![50.0, 0.0, 0.0, 0.0, 0.0, 0.0, 50.0, 0.0]).unwrap();
        let deltas = Tensor::new(&[2, 4], vec![0.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let (l, _, _) = detection_loss(&logits, &deltas, &[0, 2], &[[0.0; 4], [0.1, 0.2, 0.3, 0.4]], &[0, 0], &small()).unwrap();
        assert!(l.total < 1e-6, "{}", l.total);
    }

    #[test]
    fn background_only_has_no_regression() {
        let logits = Tensor::from_fn(&[3, 4], |i| i as f32 * 0.1);
        let deltas = Tensor::from_fn(&[3, 4], |i| i as f32);
        let (l, _, gd) = detection_loss(&logits, &deltas, &[0, 0, 0], &[[9.0; 4]; 3], &[0; 3], &small()).unwrap();
        assert_eq!(l.reg, 0.0);
        assert!(gd.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ohem_selection() {
        assert_eq!(ohem_select(&[1.0; 100], 256).len(), 100);
        assert_eq!(ohem_select(&[0.1, 0.9, 0.5, 0.9], 3), vec![1, 3, 2]);
    }

    #[test]
    fn unselected_rois_get_no_gradient() {
        let cfg = HeadConfig { ohem_keep: 2, ..small() };
        let logits = Tensor::from_fn(&[4, 4], |i| ((i * 37) % 11) as f32 * 0.3);
        let deltas = Tensor::zeros(&[4, 4]);
        let (l, gl, _) = detection_loss(&logits, &deltas, &[1, 0, 2, 3], &[[0.0; 4]; 4], &[0; 4], &cfg).unwrap();
        assert_eq!(l.selected.len(), 2);
        for i in 0..4 {
            let zero = gl[i * 4..i * 4 + 4].iter().all(|&g| g == 0.0);
            assert_eq!(zero, !l.selected.contains(&i));
        }
    }

    #[test]
    fn rcnn_target_threshold() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let rois = [g, BBox::new(0.0, 0.0, 10.0, 4.0), BBox::new(0.0, 0.0, 10.0, 5.0)];
        let (labels, targets) = assign_rcnn_targets(&rois, &[(g, 2)], 0.5, [1.0; 4]).unwrap();
        assert_eq!(labels, vec![2, 0, 2]);
        assert_eq!(targets[0], [0.0; 4]);
    }
}
