//! Detector configuration and its `key = value` text format.
//!
//! ```text
//! preset = toy
//! head.fc_width = 256
//! anchors.areas = 64, 256, 1024
//! ```
//!
//! `preset` (if present) is applied first, then every other line in file
//! order. Unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::roi_warp::WarpSpec;
use crate::rpn::{AnchorSpec, ProposalConfig};
use crate::thinmap::LargeSepConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Xception,
    /// Plain stride-2 conv stack, for quick experiments.
    Tiny,
}

impl FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xception" => Ok(Self::Xception),
            "tiny" => Ok(Self::Tiny),
            _ => Err(Error::Config(format!("unknown backbone {s:?} (xception|tiny)"))),
        }
    }
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Xception => "xception",
            Self::Tiny => "tiny",
        }
    }
}

/// Backbone output feeding the thin-map generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    C4,
    C5,
}

impl FeatureSource {
    pub fn stride(self) -> usize {
        match self {
            Self::C4 => 16,
            Self::C5 => 32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::C4 => "c4",
            Self::C5 => "c5",
        }
    }
}

impl FromStr for FeatureSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c4" => Ok(Self::C4),
            "c5" => Ok(Self::C5),
            _ => Err(Error::Config(format!("unknown feature source {s:?} (c4|c5)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnConfig {
    pub channels: usize,
    pub pos_thresh: f32,
    pub neg_thresh: f32,
    /// Anchors sampled per image for the loss.
    pub batch: usize,
    pub pos_fraction: f32,
    pub reg_loss_weight: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Images per step.
    pub batch: usize,
    /// Fraction of `iters` after which the learning rate drops 10×.
    pub lr_drop_at: f32,
    pub seed: u64,
    /// Second-stage foreground IoU.
    pub fg_thresh: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub noise: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub backbone: BackboneKind,
    pub backbone_stage4: bool,
    pub zero_init_residual: bool,
    pub anchors: AnchorSpec,
    pub thin_source: FeatureSource,
    pub thin: LargeSepConvSpec,
    pub warp: WarpSpec,
    pub head: HeadConfig,
    pub rpn: RpnConfig,
    pub proposals: ProposalConfig,
    pub nms_infer_thresh: f32,
    pub score_thresh: f32,
    pub max_detections: usize,
    pub train: TrainConfig,
    pub scene: SceneConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::setting_s()
    }
}

impl DetectorConfig {
    /// Fast detector: Xception-like backbone, thin maps from C5 by a
    /// `k = 15`, `C_mid = 64`, `C_out = 490` separable conv, aligned PSRoI 7×7.
    pub fn setting_s() -> Self {
        Self {
            backbone: BackboneKind::Xception,
            backbone_stage4: true,
            zero_init_residual: false,
            anchors: AnchorSpec::default(),
            thin_source: FeatureSource::C5,
            thin: LargeSepConvSpec::setting_s(),
            warp: WarpSpec::new(7, 10, 1.0 / 32.0),
            head: HeadConfig::default(),
            rpn: RpnConfig {
                channels: 256,
                pos_thresh: 0.7,
                neg_thresh: 0.3,
                batch: 256,
                pos_fraction: 0.5,
                reg_loss_weight: 1.0,
            },
            proposals: ProposalConfig::default(),
            nms_infer_thresh: 0.5,
            score_thresh: 0.05,
            max_detections: 100,
            train: TrainConfig {
                iters: 500,
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
                batch: 2,
                lr_drop_at: 0.75,
                seed: 0,
                fg_thresh: 0.5,
            },
            scene: SceneConfig { image_size: 800, min_objects: 1, max_objects: 2, min_side: 32, max_side: 512, noise: 0.1 },
        }
    }

    /// Desk-scale detector for 64×64 synthetic scenes: thin maps from C4
    /// (4×4 at stride 16), stride-32 stage dropped, anchors {8², 16², 32²}.
    pub fn toy() -> Self {
        let s = Self::setting_s();
        Self {
            backbone_stage4: false,
            zero_init_residual: true,
            anchors: AnchorSpec::toy(),
            thin_source: FeatureSource::C4,
            thin: LargeSepConvSpec { k: 3, c_in: 288, c_mid: 64, c_out: 490, single_branch: false, bias: true },
            warp: WarpSpec::new(7, 10, 1.0 / 16.0),
            head: HeadConfig {
                fc_width: 256,
                num_classes: 2,
                ohem_keep: 128,
                delta_weights: [5.0, 5.0, 2.5, 2.5],
                ..HeadConfig::default()
            },
            rpn: RpnConfig { channels: 128, batch: 32, reg_loss_weight: 5.0, ..s.rpn },
            proposals: ProposalConfig {
                pre_nms_train: 144,
                pre_nms_test: 144,
                post_nms_train: 64,
                post_nms_test: 16,
                ..ProposalConfig::default()
            },
            score_thresh: 0.5,
            scene: SceneConfig { image_size: 64, min_objects: 1, max_objects: 2, min_side: 16, max_side: 32, noise: 0.1 },
            ..s
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "setting_s" => Ok(Self::setting_s()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (setting_s|toy)"))),
        }
    }

    /// Backbone channels at the thin-map source.
    pub fn source_channels(&self) -> usize {
        match (self.backbone, self.thin_source) {
            (BackboneKind::Xception, FeatureSource::C4) => 288,
            (BackboneKind::Xception, FeatureSource::C5) => 576,
            (BackboneKind::Tiny, FeatureSource::C4) => 128,
            (BackboneKind::Tiny, FeatureSource::C5) => 256,
        }
    }

    /// Cross-module consistency; fills in derived fields (`thin.c_in`,
    /// `warp.spatial_scale`).
    pub fn validate(&mut self) -> Result<()> {
        self.thin.c_in = self.source_channels();
        self.warp.spatial_scale = 1.0 / self.thin_source.stride() as f32;
        self.thin.validate().map_err(|e| Error::Config(e.to_string()))?;
        let alpha = self.thin.thin_alpha(self.warp.p)?;
        if alpha != self.warp.alpha || alpha != self.head.alpha || self.warp.p != self.head.p {
            return Err(Error::Config(format!(
                "thin.c_out = {} gives alpha {alpha}, but warp has alpha {} p {}, head has alpha {} p {}",
                self.thin.c_out, self.warp.alpha, self.warp.p, self.head.alpha, self.head.p
            )));
        }
        if self.thin_source == FeatureSource::C5 && !self.backbone_stage4 {
            return Err(Error::Config("thin.source = c5 needs backbone.stage4 = true".into()));
        }
        if self.anchors.stride != 16 {
            return Err(Error::Config(format!("anchors.stride must match the C4 stride 16, got {}", self.anchors.stride)));
        }
        if self.anchors.per_cell() == 0 {
            return Err(Error::Config("anchors need at least one ratio and one area".into()));
        }
        if self.head.delta_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("head.delta_weights must be positive".into()));
        }
        if self.head.num_classes == 0 || self.head.fc_width == 0 || self.head.ohem_keep == 0 {
            return Err(Error::Config("head.num_classes, head.fc_width and head.ohem_keep must be positive".into()));
        }
        if !(0.0 < self.rpn.neg_thresh && self.rpn.neg_thresh <= self.rpn.pos_thresh && self.rpn.pos_thresh < 1.0) {
            return Err(Error::Config("rpn thresholds must satisfy 0 < neg <= pos < 1".into()));
        }
        if self.train.batch == 0 || !(0.0..=1.0).contains(&self.train.lr_drop_at) {
            return Err(Error::Config("train.batch must be positive and train.lr_drop_at in [0, 1]".into()));
        }
        let s = &self.scene;
        if !s.image_size.is_multiple_of(32) || s.min_side < 8 || s.min_side > s.max_side || s.max_side > s.image_size {
            return Err(Error::Config(format!("scene geometry is inconsistent: {s:?}")));
        }
        if s.min_objects > s.max_objects {
            return Err(Error::Config("data.min_objects exceeds data.max_objects".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim().to_string();
            if entries.iter().any(|(_, e, _)| *e == k) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
            entries.push((i + 1, k, v.trim().to_string()));
        }
        let mut cfg = match entries.iter().find(|(_, k, _)| k == "preset") {
            Some((_, _, v)) => Self::preset(v)?,
            None => Self::default(),
        };
        for (line, k, v) in entries.iter().filter(|(_, k, _)| k != "preset") {
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {line}: {k}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("cannot parse {v:?}")))
        }
        fn list(v: &str) -> Result<Vec<f32>> {
            v.split(',').map(|s| p(s.trim())).collect()
        }
        match key {
            "backbone.kind" => self.backbone = v_parse(value)?,
            "backbone.stage4" => self.backbone_stage4 = p(value)?,
            "backbone.zero_init_residual" => self.zero_init_residual = p(value)?,
            "anchors.ratios" => self.anchors.ratios = list(value)?,
            "anchors.areas" => self.anchors.areas = list(value)?,
            "anchors.stride" => self.anchors.stride = p(value)?,
            "thin.source" => self.thin_source = v_parse(value)?,
            "thin.k" => self.thin.k = p(value)?,
            "thin.c_mid" => self.thin.c_mid = p(value)?,
            "thin.c_out" => self.thin.c_out = p(value)?,
            "thin.single_branch" => self.thin.single_branch = p(value)?,
            "thin.bias" => self.thin.bias = p(value)?,
            "warp.p" => self.warp.p = p(value)?,
            "warp.alpha" => self.warp.alpha = p(value)?,
            "warp.aligned" => self.warp.aligned = p(value)?,
            "warp.sampling_ratio" => self.warp.sampling_ratio = p(value)?,
            "head.p" => self.head.p = p(value)?,
            "head.alpha" => self.head.alpha = p(value)?,
            "head.fc_width" => self.head.fc_width = p(value)?,
            "head.num_classes" => self.head.num_classes = p(value)?,
            "head.reg_loss_weight" => self.head.reg_loss_weight = p(value)?,
            "head.ohem_keep" => self.head.ohem_keep = p(value)?,
            "head.delta_weights" => {
                let v = list(value)?;
                self.head.delta_weights = v.try_into().map_err(|_| Error::Config("head.delta_weights needs 4 values".into()))?;
            }
            "rpn.channels" => self.rpn.channels = p(value)?,
            "rpn.pos_thresh" => self.rpn.pos_thresh = p(value)?,
            "rpn.neg_thresh" => self.rpn.neg_thresh = p(value)?,
            "rpn.batch" => self.rpn.batch = p(value)?,
            "rpn.pos_fraction" => self.rpn.pos_fraction = p(value)?,
            "rpn.reg_loss_weight" => self.rpn.reg_loss_weight = p(value)?,
            "proposals.pre_nms_train" => self.proposals.pre_nms_train = p(value)?,
            "proposals.pre_nms_test" => self.proposals.pre_nms_test = p(value)?,
            "proposals.post_nms_train" => self.proposals.post_nms_train = p(value)?,
            "proposals.post_nms_test" => self.proposals.post_nms_test = p(value)?,
            "proposals.nms_thresh" => self.proposals.nms_thresh = p(value)?,
            "proposals.min_size" => self.proposals.min_size = p(value)?,
            "infer.nms_thresh" => self.nms_infer_thresh = p(value)?,
            "infer.score_thresh" => self.score_thresh = p(value)?,
            "infer.max_detections" => self.max_detections = p(value)?,
            "train.iters" => self.train.iters = p(value)?,
            "train.lr" => self.train.lr = p(value)?,
            "train.momentum" => self.train.momentum = p(value)?,
            "train.weight_decay" => self.train.weight_decay = p(value)?,
            "train.batch" => self.train.batch = p(value)?,
            "train.lr_drop_at" => self.train.lr_drop_at = p(value)?,
            "train.seed" => self.train.seed = p(value)?,
            "train.fg_thresh" => self.train.fg_thresh = p(value)?,
            "data.image_size" => self.scene.image_size = p(value)?,
            "data.min_objects" => self.scene.min_objects = p(value)?,
            "data.max_objects" => self.scene.max_objects = p(value)?,
            "data.min_side" => self.scene.min_side = p(value)?,
            "data.max_side" => self.scene.max_side = p(value)?,
            "data.noise" => self.scene.noise = p(value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Every key with its current value, parseable by [`DetectorConfig::parse`].
    pub fn render(&self) -> String {
        let join = |v: &[f32]| v.iter().map(f32::to_string).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("backbone.kind", self.backbone.name().into());
        kv("backbone.stage4", self.backbone_stage4.to_string());
        kv("backbone.zero_init_residual", self.zero_init_residual.to_string());
        kv("anchors.ratios", join(&self.anchors.ratios));
        kv("anchors.areas", join(&self.anchors.areas));
        kv("anchors.stride", self.anchors.stride.to_string());
        kv("thin.source", self.thin_source.name().into());
        kv("thin.k", self.thin.k.to_string());
        kv("thin.c_mid", self.thin.c_mid.to_string());
        kv("thin.c_out", self.thin.c_out.to_string());
        kv("thin.single_branch", self.thin.single_branch.to_string());
        kv("thin.bias", self.thin.bias.to_string());
        kv("warp.p", self.warp.p.to_string());
        kv("warp.alpha", self.warp.alpha.to_string());
        kv("warp.aligned", self.warp.aligned.to_string());
        kv("warp.sampling_ratio", self.warp.sampling_ratio.to_string());
        kv("head.p", self.head.p.to_string());
        kv("head.alpha", self.head.alpha.to_string());
        kv("head.fc_width", self.head.fc_width.to_string());
        kv("head.num_classes", self.head.num_classes.to_string());
        kv("head.reg_loss_weight", self.head.reg_loss_weight.to_string());
        kv("head.ohem_keep", self.head.ohem_keep.to_string());
        kv("head.delta_weights", join(&self.head.delta_weights));
        kv("rpn.channels", self.rpn.channels.to_string());
        kv("rpn.pos_thresh", self.rpn.pos_thresh.to_string());
        kv("rpn.neg_thresh", self.rpn.neg_thresh.to_string());
        kv("rpn.batch", self.rpn.batch.to_string());
        kv("rpn.pos_fraction", self.rpn.pos_fraction.to_string());
        kv("rpn.reg_loss_weight", self.rpn.reg_loss_weight.to_string());
        kv("proposals.pre_nms_train", self.proposals.pre_nms_train.to_string());
        kv("proposals.pre_nms_test", self.proposals.pre_nms_test.to_string());
        kv("proposals.post_nms_train", self.proposals.post_nms_train.to_string());
        kv("proposals.post_nms_test", self.proposals.post_nms_test.to_string());
        kv("proposals.nms_thresh", self.proposals.nms_thresh.to_string());
        kv("proposals.min_size", self.proposals.min_size.to_string());
        kv("infer.nms_thresh", self.nms_infer_thresh.to_string());
        kv("infer.score_thresh", self.score_thresh.to_string());
        kv("infer.max_detections", self.max_detections.to_string());
        kv("train.iters", self.train.iters.to_string());
        kv("train.lr", self.train.lr.to_string());
        kv("train.momentum", self.train.momentum.to_string());
        kv("train.weight_decay", self.train.weight_decay.to_string());
        kv("train.batch", self.train.batch.to_string());
        kv("train.lr_drop_at", self.train.lr_drop_at.to_string());
        kv("train.seed", self.train.seed.to_string());
        kv("train.fg_thresh", self.train.fg_thresh.to_string());
        kv("data.image_size", self.scene.image_size.to_string());
        kv("data.min_objects", self.scene.min_objects.to_string());
        kv("data.max_objects", self.scene.max_objects.to_string());
        kv("data.min_side", self.scene.min_side.to_string());
        kv("data.max_side", self.scene.max_side.to_string());
        kv("data.noise", self.scene.noise.to_string());
        s
    }
}

fn v_parse<T: FromStr<Err = Error>>(v: &str) -> Result<T> {
    v.parse()
}
