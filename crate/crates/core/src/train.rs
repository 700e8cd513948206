//! Single-process SGD training on synthetic scenes, and detection scoring.
//!
//! Random streams derived from one seed: stream 0 initialises parameters,
//! 1 draws training scenes, 2 samples RPN anchors, 3 draws held-out scenes,
//! 4 draws standalone sample scenes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::config::DetectorConfig;
use crate::detector::{Detection, Detector};
use crate::error::{Error, Result};
use crate::head::assign_rcnn_targets;
use crate::params::ParamStore;
use crate::roi_warp::RoI;
use crate::rpn::{assign_labels, iou, sample_anchors, BBox, RpnTargets};
use crate::scene::{stack_images, SyntheticScene};

/// Environment variable overriding every seed.
pub const SEED_ENV: &str = "LHRCNN_SEED";

/// `LHRCNN_SEED` when set and numeric, else `default`.
pub fn seed_from_env(default: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(default),
    }
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Momentum SGD: `v ← m·v + lr·(g + wd·w)`, `w ← w − v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f32, weight_decay: f32) -> Self {
        let velocity = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { momentum, weight_decay, velocity }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f32>>], lr: f32) {
        for ((t, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            for ((w, &gi), vi) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + lr * (gi + self.weight_decay * *w);
                *w -= *vi;
            }
        }
    }
}

/// Learning rate at iteration `it`: `lr` until `lr_drop_at · iters`, then `lr / 10`.
pub fn lr_at(cfg: &DetectorConfig, it: usize, iters: usize) -> f32 {
    if (it as f32) < cfg.train.lr_drop_at * iters as f32 {
        cfg.train.lr
    } else {
        cfg.train.lr * 0.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f32,
    pub rpn_cls: f32,
    pub rpn_reg: f32,
    pub rcnn_cls: f32,
    pub rcnn_reg: f32,
}

/// One forward/backward pass over `scenes` as a batch, followed by an SGD update.
pub fn train_step(det: &mut Detector, sgd: &mut Sgd, scenes: &[SyntheticScene], lr: f32, sampler: &mut ChaCha8Rng, iteration: usize) -> Result<StepLoss> {
    let cfg = det.cfg.clone();
    let refs: Vec<&SyntheticScene> = scenes.iter().collect();
    let images = stack_images(&refs);
    let hw = (images.dim(2), images.dim(3));
    let mut tape = Tape::new();
    let p = det.params.bind(&mut tape, true);
    let x = tape.constant(images);
    let trunk = det.trunk(&mut tape, &p, x)?;

    let ld = tape.dims(trunk.rpn_logits).to_vec();
    let anchors = det.anchors((ld[2], ld[3]));
    let mut rpn_targets = Vec::with_capacity(scenes.len());
    for s in scenes {
        let gts: Vec<BBox> = s.gts.iter().map(|(b, _)| *b).collect();
        let assignment = assign_labels(&anchors, &gts, cfg.rpn.pos_thresh, cfg.rpn.neg_thresh)?;
        let sampled = sample_anchors(&assignment.labels, cfg.rpn.batch, cfg.rpn.pos_fraction, sampler);
        rpn_targets.push(RpnTargets { sampled, assignment });
    }
    let (rpn_loss, rpn_cls, rpn_reg) = tape.rpn_loss(trunk.rpn_logits, trunk.rpn_deltas, &rpn_targets, cfg.rpn.reg_loss_weight)?;

    let proposals = det.proposals(&tape, &trunk, hw, true)?;
    let (mut rois, mut labels, mut targets, mut groups) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (n, (s, props)) in scenes.iter().zip(&proposals).enumerate() {
        let boxes: Vec<BBox> = props.iter().map(|q| q.bbox).chain(s.gts.iter().map(|(b, _)| *b)).collect();
        let (l, t) = assign_rcnn_targets(&boxes, &s.gts, cfg.train.fg_thresh, cfg.head.delta_weights)?;
        rois.extend(boxes.iter().map(|b| RoI::new(n, b.x1, b.y1, b.x2, b.y2)));
        groups.extend(std::iter::repeat_n(n, boxes.len()));
        labels.extend(l);
        targets.extend(t);
    }
    let s2 = det.stage2(&mut tape, &p, trunk.source, &rois)?;
    let (det_loss, parts) = tape.detection_loss(s2.cls_logits, s2.deltas, &labels, &targets, &groups, &cfg.head)?;
    let total = tape.add(rpn_loss, det_loss)?;
    let value = tape.value(total).data()[0];
    if !value.is_finite() {
        return Err(Error::Diverged { iteration, loss: value });
    }
    tape.backward(total)?;
    let grads: Vec<Option<Vec<f32>>> = p.vars().iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec)).collect();
    drop(tape);
    sgd.step(&mut det.params, &grads, lr);
    Ok(StepLoss { total: value, rpn_cls, rpn_reg, rcnn_cls: parts.cls, rcnn_reg: parts.reg })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLoss>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f32> {
        self.steps.iter().map(|s| s.total).collect()
    }

    fn mean(v: &[StepLoss]) -> f64 {
        v.iter().map(|s| s.total as f64).sum::<f64>() / v.len().max(1) as f64
    }

    pub fn first_window(&self, n: usize) -> f64 {
        Self::mean(&self.steps[..n.min(self.steps.len())])
    }

    pub fn last_window(&self, n: usize) -> f64 {
        Self::mean(&self.steps[self.steps.len().saturating_sub(n)..])
    }

    /// `1 − last/first` over `n`-iteration windows.
    pub fn reduction(&self, n: usize) -> f64 {
        1.0 - self.last_window(n) / self.first_window(n)
    }
}

/// Trains a fresh detector for `iters` steps on scenes drawn from `seed`.
pub fn train_toy(cfg: &DetectorConfig, seed: u64, iters: usize, mut progress: impl FnMut(usize, &StepLoss)) -> Result<(Detector, TrainReport)> {
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    let mut det = Detector::new(cfg.clone(), seed)?;
    let cfg = det.cfg.clone();
    let mut sgd = Sgd::new(&det.params, cfg.train.momentum, cfg.train.weight_decay);
    let mut data = stream(seed, 1);
    let mut sampler = stream(seed, 2);
    let mut report = TrainReport::default();
    for it in 0..iters {
        let scenes: Vec<SyntheticScene> =
            (0..cfg.train.batch).map(|_| SyntheticScene::generate(&cfg.scene, cfg.head.num_classes, &mut data)).collect();
        let step = train_step(&mut det, &mut sgd, &scenes, lr_at(&cfg, it, iters), &mut sampler, it)?;
        progress(it, &step);
        report.steps.push(step);
    }
    Ok((det, report))
}

/// Scenes disjoint from the training stream of the same seed.
pub fn held_out_scenes(cfg: &DetectorConfig, seed: u64, n: usize) -> Vec<SyntheticScene> {
    let mut rng = stream(seed, 3);
    (0..n).map(|_| SyntheticScene::generate(&cfg.scene, cfg.head.num_classes, &mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalReport {
    pub images: usize,
    pub gts: usize,
    pub recalled: usize,
    pub false_positives: usize,
}

impl EvalReport {
    pub fn recall(&self) -> f64 {
        if self.gts == 0 {
            1.0
        } else {
            self.recalled as f64 / self.gts as f64
        }
    }

    pub fn fp_per_image(&self) -> f64 {
        self.false_positives as f64 / self.images.max(1) as f64
    }
}

/// Greedy score-order matching: a detection is a hit when it overlaps a
/// still-unmatched ground truth of its class at IoU ≥ `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[(BBox, usize)], iou_thresh: f32) -> (usize, usize) {
    let mut used = vec![false; gts.len()];
    let mut fp = 0;
    for d in dets {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, (_, c))| !used[*g] && *c == d.class_id)
            .map(|(g, (b, _))| (g, iou(b, &d.bbox)))
            .filter(|&(_, v)| v >= iou_thresh)
            .fold(None, |acc: Option<(usize, f32)>, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        match best {
            Some((g, _)) => used[g] = true,
            None => fp += 1,
        }
    }
    (used.iter().filter(|&&u| u).count(), fp)
}

pub fn evaluate(det: &Detector, scenes: &[SyntheticScene], iou_thresh: f32) -> Result<EvalReport> {
    let mut r = EvalReport::default();
    for s in scenes {
        let dets = det.detect(&s.image)?;
        let (hit, fp) = match_detections(&dets, &s.gts, iou_thresh);
        r.images += 1;
        r.gts += s.gts.len();
        r.recalled += hit;
        r.false_positives += fp;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = DetectorConfig::toy();
        assert_eq!(lr_at(&cfg, 0, 100), 0.01);
        assert_eq!(lr_at(&cfg, 74, 100), 0.01);
        assert!((lr_at(&cfg, 75, 100) - 0.001).abs() < 1e-9);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut store = ParamStore::new();
        let id = store.add("w", crate::Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let mut sgd = Sgd::new(&store, 0.5, 0.1);
        sgd.step(&mut store, &[Some(vec![1.0, 1.0])], 0.1);
        // v = 0.1 * (1 + 0.1 w)
        assert_eq!(store.get(id).data(), &[1.0 - 0.11, -2.0 - 0.08]);
        sgd.step(&mut store, &[Some(vec![0.0, 0.0])], 0.1);
        let w0 = 1.0 - 0.11f32;
        assert!((store.get(id).data()[0] - (w0 - (0.5 * 0.11 + 0.1 * 0.1 * w0))).abs() < 1e-6);
    }

    #[test]
    fn one_iteration_updates_once() {
        let cfg = DetectorConfig::toy();
        let before = Detector::new(cfg.clone(), 5).unwrap().params;
        let (det, report) = train_toy(&cfg, 5, 1, |_, _| {}).unwrap();
        assert_eq!(report.steps.len(), 1);
        assert_ne!(det.params, before);
    }

    #[test]
    fn matching_counts() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let dets = [
            Detection { bbox: g, class_id: 1, score: 0.9 },
            Detection { bbox: g, class_id: 1, score: 0.8 },
            Detection { bbox: g, class_id: 2, score: 0.7 },
        ];
        assert_eq!(match_detections(&dets, &[(g, 1)], 0.5), (1, 2));
    }
}
