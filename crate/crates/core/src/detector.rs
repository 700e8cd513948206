//! End-to-end light-head detector: backbone → RPN → thin maps → PSRoI warp
//! → single-FC head, with inference, itemised cost and toy training.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::{backbone_flops, Backbone, BackboneOptions, BackboneSpec, TinyBackbone};
use crate::config::{BackboneKind, DetectorConfig, FeatureSource};
use crate::cost::{CostItem, CostReport};
use crate::error::{Error, Result};
use crate::head::RcnnHead;
use crate::params::{Bound, ConvLayer, ParamStore};
use crate::roi_warp::RoI;
use crate::rpn::{anchor_deltas, anchor_logits, decode_deltas, gen_anchors, nms, propose, sigmoid, BBox, Proposal};
use crate::tensor::{ConvSpec, Tensor};
use crate::thinmap::{sep_conv_flops, LargeSepConv};

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// In `1..=num_classes`.
    pub class_id: usize,
    pub score: f32,
}

#[derive(Debug, Clone)]
enum FeatureNet {
    Xception(Backbone),
    Tiny(TinyBackbone),
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub params: ParamStore,
    features: FeatureNet,
    rpn_conv: ConvLayer,
    rpn_cls: ConvLayer,
    rpn_reg: ConvLayer,
    thin: LargeSepConv,
    head: RcnnHead,
}

/// Tape handles of a forward pass up to the RPN outputs.
#[derive(Debug, Clone, Copy)]
pub struct Trunk {
    pub c4: Var,
    pub source: Var,
    pub rpn_logits: Var,
    pub rpn_deltas: Var,
}

/// Tape handles of the second stage.
#[derive(Debug, Clone, Copy)]
pub struct Stage2 {
    pub thin: Var,
    pub pooled: Var,
    pub cls_logits: Var,
    pub deltas: Var,
}

impl Detector {
    /// Validates `cfg` and initialises every parameter from `seed`.
    pub fn new(mut cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (features, c4_channels) = match cfg.backbone {
            BackboneKind::Xception => {
                let options = BackboneOptions { stage4: cfg.backbone_stage4, classifier: false, zero_init_residual: cfg.zero_init_residual };
                let bb = Backbone::build(&mut params, BackboneSpec::xception(), options, &mut rng)?;
                let c4 = bb.c4_channels();
                (FeatureNet::Xception(bb), c4)
            }
            BackboneKind::Tiny => (FeatureNet::Tiny(TinyBackbone::build(&mut params, cfg.backbone_stage4, &mut rng)), TinyBackbone::C4_CHANNELS),
        };
        let a = cfg.anchors.per_cell();
        let rpn_conv = ConvLayer::init(&mut params, "rpn.conv", ConvSpec::new(c4_channels, cfg.rpn.channels, 3), true, &mut rng);
        let rpn_cls = ConvLayer::normal(&mut params, "rpn.cls", ConvSpec::new(cfg.rpn.channels, a, 1), 0.01, &mut rng);
        let rpn_reg = ConvLayer::normal(&mut params, "rpn.reg", ConvSpec::new(cfg.rpn.channels, 4 * a, 1), 0.01, &mut rng);
        let thin = LargeSepConv::init(&mut params, "thin_map", cfg.thin, &mut rng)?;
        let head = RcnnHead::init(&mut params, cfg.head, &mut rng);
        Ok(Self { cfg, params, features, rpn_conv, rpn_cls, rpn_reg, thin, head })
    }

    /// Rebuilds a detector from a weights directory (config plus tensors).
    pub fn load(dir: impl AsRef<Path>, cfg: Option<DetectorConfig>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg = match cfg {
            Some(c) => c,
            None => DetectorConfig::load(dir.join(CONFIG_FILE))?,
        };
        let mut det = Self::new(cfg, 0)?;
        det.params.load_dir(dir)?;
        Ok(det)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.params.save_dir(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), self.cfg.render())?;
        Ok(())
    }

    /// Zeroes every R-CNN head parameter.
    pub fn zero_head(&mut self) {
        for id in [self.head.fc.weight, self.head.fc.bias, self.head.cls.weight, self.head.cls.bias, self.head.reg.weight, self.head.reg.bias] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    fn check_image(&self, images: &Tensor) -> Result<(usize, usize)> {
        let d = images.dims();
        if d.len() != 4 || d[1] != 3 {
            return Err(Error::Shape { op: "detect", msg: format!("expected [N,3,H,W] images, got {d:?}") });
        }
        if !d[2].is_multiple_of(32) || !d[3].is_multiple_of(32) || d[2] == 0 || d[3] == 0 {
            return Err(Error::Shape { op: "detect", msg: format!("image size {}x{} is not a positive multiple of 32", d[2], d[3]) });
        }
        Ok((d[2], d[3]))
    }

    pub fn trunk(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<Trunk> {
        let (c4, c5) = match &self.features {
            FeatureNet::Xception(bb) => {
                let taps = bb.forward(tape, p, images)?;
                (taps.c4(), taps.c5())
            }
            FeatureNet::Tiny(t) => t.forward(tape, p, images)?,
        };
        let source = match self.cfg.thin_source {
            FeatureSource::C4 => c4,
            FeatureSource::C5 => c5.ok_or_else(|| Error::Config("thin maps from C5 need the stride-32 stage".into()))?,
        };
        let h = self.rpn_conv.forward(tape, p, c4)?;
        let h = tape.relu(h);
        let rpn_logits = self.rpn_cls.forward(tape, p, h)?;
        let rpn_deltas = self.rpn_reg.forward(tape, p, h)?;
        Ok(Trunk { c4, source, rpn_logits, rpn_deltas })
    }

    /// Anchors of a C4 map of the given size.
    pub fn anchors(&self, c4_hw: (usize, usize)) -> Vec<BBox> {
        gen_anchors(&self.cfg.anchors, c4_hw.0, c4_hw.1)
    }

    /// RPN proposals per image.
    pub fn proposals(&self, tape: &Tape, trunk: &Trunk, image_hw: (usize, usize), train: bool) -> Result<Vec<Vec<Proposal>>> {
        let ld = tape.dims(trunk.rpn_logits).to_vec();
        let anchors = self.anchors((ld[2], ld[3]));
        (0..ld[0])
            .map(|n| {
                let scores: Vec<f32> = anchor_logits(tape.value(trunk.rpn_logits), n).into_iter().map(sigmoid).collect();
                let deltas = anchor_deltas(tape.value(trunk.rpn_deltas), n);
                propose(&scores, &deltas, &anchors, image_hw, &self.cfg.proposals, train)
            })
            .collect()
    }

    pub fn stage2(&self, tape: &mut Tape, p: &Bound, source: Var, rois: &[RoI]) -> Result<Stage2> {
        let thin = self.thin.forward(tape, p, source)?;
        let pooled = tape.psroi_warp(thin, rois, self.cfg.warp)?;
        let (cls_logits, deltas) = self.head.forward(tape, p, pooled)?;
        Ok(Stage2 { thin, pooled, cls_logits, deltas })
    }

    /// Detections for every image of a batch.
    pub fn detect_batch(&self, images: &Tensor) -> Result<Vec<Vec<Detection>>> {
        self.detect_traced(images).map(|(d, _)| d)
    }

    /// Detections of a single `[1, 3, H, W]` image.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let mut all = self.detect_batch(image)?;
        Ok(all.pop().unwrap_or_default())
    }

    /// Detections plus `(op, dims)` of every tensor produced after the thin map.
    pub fn detect_traced(&self, images: &Tensor) -> Result<(Vec<Vec<Detection>>, Vec<(&'static str, Vec<usize>)>)> {
        let image_hw = self.check_image(images)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let trunk = self.trunk(&mut tape, &p, x)?;
        let props = self.proposals(&tape, &trunk, image_hw, false)?;
        let rois: Vec<RoI> = props
            .iter()
            .enumerate()
            .flat_map(|(n, ps)| ps.iter().map(move |q| RoI::new(n, q.bbox.x1, q.bbox.y1, q.bbox.x2, q.bbox.y2)))
            .collect();
        let s2 = self.stage2(&mut tape, &p, trunk.source, &rois)?;
        let trace = tape.trace_since(s2.thin);
        let k = self.cfg.head.logits();
        let logits = tape.value(s2.cls_logits).data();
        let deltas = tape.value(s2.deltas).data();
        let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); images.dim(0)];
        for (i, roi) in rois.iter().enumerate() {
            let probs = softmax(&logits[i * k..(i + 1) * k]);
            let class_id = argmax_first(&probs);
            if class_id == 0 || probs[class_id] < self.cfg.score_thresh {
                continue;
            }
            let d: [f32; 4] = std::array::from_fn(|j| deltas[i * 4 + j] / self.cfg.head.delta_weights[j]);
            let bbox = decode_deltas(&BBox::new(roi.x1, roi.y1, roi.x2, roi.y2), &d).clip(image_hw.0 as f32, image_hw.1 as f32);
            per_image[roi.batch_index].push(Detection { bbox, class_id, score: probs[class_id] });
        }
        let dets = per_image
            .into_iter()
            .map(|d| per_class_nms(d, self.cfg.nms_infer_thresh, self.cfg.max_detections))
            .collect();
        Ok((dets, trace))
    }

    /// Itemised inference cost for one image with `rois` proposals.
    pub fn inference_cost(&self, image_h: usize, image_w: usize, rois: usize) -> CostReport {
        let mut items: Vec<CostItem> = Vec::new();
        let (c4_hw, c5_hw) = ((image_h / 16, image_w / 16), (image_h / 32, image_w / 32));
        match &self.features {
            FeatureNet::Xception(_) => {
                let stage4 = self.cfg.backbone_stage4;
                items.extend(
                    backbone_flops(&BackboneSpec::xception(), image_h, image_w)
                        .items
                        .into_iter()
                        .filter(|i| i.name != "gap" && i.name != "fc" && (stage4 || !i.name.starts_with("stage4")))
                        .map(|mut i| {
                            i.name = format!("backbone.{}", i.name);
                            i
                        }),
                );
            }
            FeatureNet::Tiny(t) => {
                let (mut h, mut w) = (image_h, image_w);
                for (n, l) in t.conv_layers().iter().enumerate() {
                    (h, w) = l.spec.output_hw(h, w).unwrap_or((0, 0));
                    items.push(conv_item(&format!("backbone.conv{}", n + 1), l, h, w));
                }
            }
        }
        for (name, l) in [("rpn.conv", &self.rpn_conv), ("rpn.cls", &self.rpn_cls), ("rpn.reg", &self.rpn_reg)] {
            items.push(conv_item(name, l, c4_hw.0, c4_hw.1));
        }
        let src = if self.cfg.thin_source == FeatureSource::C4 { c4_hw } else { c5_hw };
        items.extend(sep_conv_flops(&self.cfg.thin, src.0, src.1).report.items.into_iter().map(|mut i| {
            i.name = format!("thin_map.{}", i.name);
            i
        }));
        let (r, hc) = (rois as u64, self.cfg.head);
        let sr2 = (self.cfg.warp.sampling_ratio * self.cfg.warp.sampling_ratio) as u64;
        let warp_samples = if self.cfg.warp.aligned { sr2 } else { 1 };
        let (inf, fc, k) = (hc.in_features() as u64, hc.fc_width as u64, hc.logits() as u64);
        let roi_item = |name: &str, macs: u64, params: u64, channels: u64, values: u64, spatial: bool| CostItem {
            name: name.into(),
            macs: r * macs,
            params,
            activations: r * values,
            channels,
            spatial,
            per_roi: true,
        };
        items.push(roi_item("warp.psroi", inf * warp_samples, 0, hc.alpha as u64, inf, true));
        items.push(roi_item("head.fc", inf * fc, inf * fc + fc, fc, fc, false));
        items.push(roi_item("head.cls", fc * k, fc * k + k, k, k, false));
        items.push(roi_item("head.reg", fc * 4, fc * 4 + 4, 4, 4, false));
        CostReport::from_items(items)
    }
}

fn conv_item(name: &str, l: &ConvLayer, h: usize, w: usize) -> CostItem {
    CostItem::map(name, l.spec.macs(h, w), l.param_count(), l.spec.out_channels as u64, h as u64, w as u64)
}

/// Spatial maps after the thin map whose channel count exceeds `limit`.
pub fn post_thin_map_violations(report: &CostReport, limit: u64) -> Vec<&CostItem> {
    let start = report.items.iter().rposition(|i| i.name.starts_with("thin_map.")).map_or(0, |i| i + 1);
    report.items[start..].iter().filter(|i| i.spatial && i.channels > limit).collect()
}

/// Rank-4 tensors in a trace whose channel axis exceeds `limit`.
pub fn traced_violations(trace: &[(&'static str, Vec<usize>)], limit: usize) -> Vec<(&'static str, Vec<usize>)> {
    trace.iter().filter(|(_, d)| d.len() == 4 && d[1] > limit).cloned().collect()
}

pub fn softmax(row: &[f32]) -> Vec<f32> {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f32> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry; the first one wins ties.
fn argmax_first(v: &[f32]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// NMS within each class, then score-descending merge capped at `max`.
pub fn per_class_nms(dets: Vec<Detection>, thresh: f32, max: usize) -> Vec<Detection> {
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut kept = Vec::new();
    for c in classes {
        let group: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        let boxes: Vec<BBox> = group.iter().map(|d| d.bbox).collect();
        let scores: Vec<f32> = group.iter().map(|d| d.score).collect();
        kept.extend(nms(&boxes, &scores, thresh).into_iter().map(|i| *group[i]));
    }
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(max);
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Detector {
        Detector::new(DetectorConfig::toy(), 1).unwrap()
    }

    #[test]
    fn rejects_bad_image_sizes() {
        let d = toy();
        assert!(d.detect(&Tensor::zeros(&[1, 3, 48, 64])).is_err());
        assert!(d.detect(&Tensor::zeros(&[1, 1, 64, 64])).is_err());
    }

    #[test]
    fn zero_head_detects_nothing() {
        let mut d = toy();
        d.cfg.score_thresh = 1e-6;
        d.zero_head();
        let img = Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 31) % 17) as f32 / 17.0);
        assert!(d.detect(&img).unwrap().is_empty());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut d = toy();
        d.cfg.score_thresh = 0.0;
        let img = Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 7) % 13) as f32 / 13.0);
        assert_eq!(d.detect(&img).unwrap(), d.detect(&img).unwrap());
    }

    #[test]
    fn structural_guarantee_holds_for_both_presets() {
        let d = toy();
        let img = Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 7) % 13) as f32 / 13.0);
        let (_, trace) = d.detect_traced(&img).unwrap();
        assert!(traced_violations(&trace, 490).is_empty());
        assert!(trace.iter().any(|(op, _)| *op == "psroi_pool_aligned"));
        let s = Detector::new(DetectorConfig::setting_s(), 0).unwrap();
        let cost = s.inference_cost(800, 1216, 1000);
        assert!(post_thin_map_violations(&cost, 490).is_empty());
        assert_eq!(cost.item("warp.psroi").unwrap().channels, 10);
    }

    #[test]
    fn per_class_nms_keeps_other_classes() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let dets = vec![
            Detection { bbox: b, class_id: 1, score: 0.9 },
            Detection { bbox: b, class_id: 1, score: 0.8 },
            Detection { bbox: b, class_id: 2, score: 0.7 },
        ];
        let kept = per_class_nms(dets, 0.5, 100);
        assert_eq!(kept.iter().map(|d| d.class_id).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn save_load_round_trip() {
        let d = toy();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let e = Detector::load(dir.path(), None).unwrap();
        assert_eq!(e.params, d.params);
        assert_eq!(e.cfg, d.cfg);
    }
}
