//! Xception-like fast backbone.
//!
//! | layer   | output (224 input) | op                          | channels |
//! |---------|--------------------|-----------------------------|----------|
//! | conv1   | 112×112            | 3×3 / 2                     | 24       |
//! | maxpool | 56×56              | 3×3 / 2                     | 24       |
//! | stage2  | 28×28              | 1 stride-2 + 3 stride-1     | 144      |
//! | stage3  | 14×14              | 1 stride-2 + 7 stride-1     | 288      |
//! | stage4  | 7×7                | 1 stride-2 + 3 stride-1     | 576      |
//! | gap, fc | 1×1                |                             | 1000     |
//!
//! Bottleneck: 1×1 reduce to `channels/4` → ReLU → 3×3 channel-wise conv
//! (carries the stride) → 1×1 expand; post-activation ReLU after the merge.
//! Stride-1 blocks add an identity shortcut. Stride-2 blocks concatenate a
//! 3×3/2 average pool of the input with an expand branch producing the
//! remaining `channels - in_channels` maps.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::cost::{CostItem, CostReport};
use crate::error::{Error, Result};
use crate::ops::PoolSpec;
use crate::params::{Bound, ConvLayer, Linear, ParamStore};
use crate::tensor::ConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    /// Stride-1 blocks after the single stride-2 block.
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub bottleneck_divisor: usize,
    pub classes: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::xception()
    }
}

impl BackboneSpec {
    pub fn xception() -> Self {
        Self {
            stem_channels: 24,
            stages: vec![
                StageSpec { channels: 144, repeats: 3 },
                StageSpec { channels: 288, repeats: 7 },
                StageSpec { channels: 576, repeats: 3 },
            ],
            bottleneck_divisor: 4,
            classes: 1000,
        }
    }

    /// Every channel count multiplied by `factor`.
    pub fn widened(&self, factor: usize) -> Self {
        Self {
            stem_channels: self.stem_channels * factor,
            stages: self
                .stages
                .iter()
                .map(|s| StageSpec { channels: s.channels * factor, repeats: s.repeats })
                .collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut cin = self.stem_channels;
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels <= cin || s.channels % self.bottleneck_divisor != 0 {
                return Err(Error::Config(format!(
                    "stage {} channels {} must exceed input {cin} and divide by {}",
                    i + 2,
                    s.channels,
                    self.bottleneck_divisor
                )));
            }
            cin = s.channels;
        }
        Ok(())
    }

    /// Every layer in evaluation order, for a given input size.
    /// Pure arithmetic; zero-channel stages simply cost nothing.
    pub fn layer_plan(&self, h: usize, w: usize) -> Vec<PlannedLayer> {
        let mut plan = Vec::new();
        let stem = ConvSpec::new(3, self.stem_channels, 3).with_stride(2);
        let (mut h, mut w) = stem.output_hw(h, w).unwrap_or((0, 0));
        plan.push(PlannedLayer::conv("conv1", stem, h, w));
        let pool = PoolSpec::new(3, 2, 1);
        h = pool.out_extent(h).unwrap_or(0);
        w = pool.out_extent(w).unwrap_or(0);
        plan.push(PlannedLayer::pool("maxpool", self.stem_channels, 9, h, w));
        let mut cin = self.stem_channels;
        for (si, stage) in self.stages.iter().enumerate() {
            let mid = stage.channels / self.bottleneck_divisor;
            for b in 0..=stage.repeats {
                let stride = if b == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{b}", si + 2);
                let reduce = ConvSpec::new(cin, mid, 1);
                plan.push(PlannedLayer::conv(&format!("{name}.reduce"), reduce, h, w));
                let dw = ConvSpec::depthwise(mid, 3, stride);
                let (ho, wo) = dw.output_hw(h, w).unwrap_or((0, 0));
                plan.push(PlannedLayer::conv(&format!("{name}.depthwise"), dw, ho, wo));
                let expand_out = if b == 0 { stage.channels - cin.min(stage.channels) } else { stage.channels };
                plan.push(PlannedLayer::conv(&format!("{name}.expand"), ConvSpec::new(mid, expand_out, 1), ho, wo));
                if b == 0 {
                    plan.push(PlannedLayer::pool(&format!("{name}.shortcut_avgpool"), cin.min(stage.channels), 9, ho, wo));
                }
                h = ho;
                w = wo;
                cin = stage.channels;
            }
        }
        plan.push(PlannedLayer::pool("gap", cin, (h * w) as u64, 1, 1));
        plan.push(PlannedLayer {
            name: "fc".into(),
            macs: (cin * self.classes) as u64,
            params: (cin * self.classes + self.classes) as u64,
            out_channels: self.classes,
            out_h: 1,
            out_w: 1,
            conv: None,
        });
        plan
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedLayer {
    pub name: String,
    pub macs: u64,
    pub params: u64,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub conv: Option<ConvSpec>,
}

impl PlannedLayer {
    fn conv(name: &str, spec: ConvSpec, out_h: usize, out_w: usize) -> Self {
        Self {
            name: name.into(),
            macs: (out_h * out_w * spec.out_channels * spec.fan_in()) as u64,
            params: spec.param_count(true),
            out_channels: spec.out_channels,
            out_h,
            out_w,
            conv: Some(spec),
        }
    }

    fn pool(name: &str, channels: usize, window: u64, out_h: usize, out_w: usize) -> Self {
        Self {
            name: name.into(),
            macs: window * (channels * out_h * out_w) as u64,
            params: 0,
            out_channels: channels,
            out_h,
            out_w,
            conv: None,
        }
    }
}

/// Analytic MAC count of the classification network at `h×w`.
/// Convolutions count `k²·C_in/groups·C_out·H'·W'`, pooling windows one per
/// contributing cell, the FC `C·classes`; bias, BN and activations are free.
pub fn backbone_flops(spec: &BackboneSpec, h: usize, w: usize) -> CostReport {
    CostReport::from_items(
        spec.layer_plan(h, w)
            .into_iter()
            .map(|l| CostItem {
                activations: (l.out_channels * l.out_h * l.out_w) as u64,
                channels: l.out_channels as u64,
                spatial: l.out_h * l.out_w > 1,
                per_roi: false,
                name: l.name,
                macs: l.macs,
                params: l.params,
            })
            .collect(),
    )
}

/// Classification backbone (with GAP and FC) built from a seed, with its own store.
pub fn build_backbone(seed: u64) -> (Backbone, ParamStore) {
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let bb = Backbone::build(&mut store, BackboneSpec::xception(), BackboneOptions::default(), &mut rng)
        .expect("the default spec is valid");
    (bb, store)
}

#[derive(Debug, Clone)]
enum Shortcut {
    Identity,
    PoolConcat,
}

#[derive(Debug, Clone)]
struct Block {
    reduce: ConvLayer,
    depthwise: ConvLayer,
    expand: ConvLayer,
    shortcut: Shortcut,
}

impl Block {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.reduce.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.depthwise.forward(tape, p, h)?;
        let h = self.expand.forward(tape, p, h)?;
        let merged = match self.shortcut {
            Shortcut::Identity => tape.add(x, h)?,
            Shortcut::PoolConcat => {
                let s = tape.avg_pool2d(x, PoolSpec::new(3, 2, 1))?;
                tape.concat_channels(s, h)?
            }
        };
        Ok(tape.relu(merged))
    }
}

/// Which parts of the network to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneOptions {
    /// Build the stride-32 stage (C5).
    pub stage4: bool,
    /// Build GAP + FC classification head.
    pub classifier: bool,
    /// Zero the expand conv of identity-shortcut blocks so every residual
    /// branch starts as identity; equivalent to a zero BN scale folded in.
    pub zero_init_residual: bool,
}

impl Default for BackboneOptions {
    fn default() -> Self {
        Self { stage4: true, classifier: true, zero_init_residual: false }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub options: BackboneOptions,
    stem: ConvLayer,
    stages: Vec<Vec<Block>>,
    fc: Option<Linear>,
}

/// Named intermediate outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct BackboneTaps {
    pub conv1: Var,
    pub maxpool: Var,
    /// Stage outputs in order (stage2, stage3, stage4 when built).
    pub stages: Vec<Var>,
    pub logits: Option<Var>,
}

impl BackboneTaps {
    /// Stride-16 map.
    pub fn c4(&self) -> Var {
        self.stages[1]
    }

    /// Stride-32 map, when the last stage was built.
    pub fn c5(&self) -> Option<Var> {
        self.stages.get(2).copied()
    }
}

impl Backbone {
    pub fn build<R: Rng>(store: &mut ParamStore, spec: BackboneSpec, options: BackboneOptions, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let stem = ConvLayer::init(store, "backbone.conv1", ConvSpec::new(3, spec.stem_channels, 3).with_stride(2), true, rng);
        let mut cin = spec.stem_channels;
        let n_stages = if options.stage4 { spec.stages.len() } else { spec.stages.len().min(2) };
        let mut stages = Vec::new();
        for (si, stage) in spec.stages.iter().take(n_stages).enumerate() {
            let mid = stage.channels / spec.bottleneck_divisor;
            let mut blocks = Vec::new();
            for b in 0..=stage.repeats {
                let name = format!("backbone.stage{}.block{b}", si + 2);
                let stride = if b == 0 { 2 } else { 1 };
                let reduce = ConvLayer::init(store, &format!("{name}.reduce"), ConvSpec::new(cin, mid, 1), true, rng);
                let depthwise = ConvLayer::init(store, &format!("{name}.depthwise"), ConvSpec::depthwise(mid, 3, stride), true, rng);
                let (expand_out, shortcut) = if b == 0 {
                    (stage.channels - cin, Shortcut::PoolConcat)
                } else {
                    (stage.channels, Shortcut::Identity)
                };
                let expand_spec = ConvSpec::new(mid, expand_out, 1);
                let expand = if b > 0 && options.zero_init_residual {
                    ConvLayer::zeros(store, &format!("{name}.expand"), expand_spec, true)
                } else {
                    ConvLayer::init(store, &format!("{name}.expand"), expand_spec, true, rng)
                };
                blocks.push(Block { reduce, depthwise, expand, shortcut });
                cin = stage.channels;
            }
            stages.push(blocks);
        }
        let fc = (options.classifier && options.stage4).then(|| Linear::init(store, "backbone.fc", cin, spec.classes, rng));
        Ok(Self { spec, options, stem, stages, fc })
    }

    /// Channels of the stride-16 and stride-32 outputs.
    pub fn c4_channels(&self) -> usize {
        self.spec.stages[1].channels
    }

    pub fn c5_channels(&self) -> usize {
        self.spec.stages[2].channels
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut v = vec![&self.stem];
        for b in self.stages.iter().flatten() {
            v.extend([&b.reduce, &b.depthwise, &b.expand]);
        }
        v
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<BackboneTaps> {
        let dims = tape.dims(image).to_vec();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::Shape { op: "backbone", msg: format!("expected [N,3,H,W] image, got {dims:?}") });
        }
        let conv1 = self.stem.forward(tape, p, image)?;
        let conv1 = tape.relu(conv1);
        let maxpool = tape.max_pool2d(conv1, PoolSpec::new(3, 2, 1))?;
        let mut x = maxpool;
        let mut outs = Vec::new();
        for stage in &self.stages {
            for block in stage {
                x = block.forward(tape, p, x)?;
            }
            outs.push(x);
        }
        let logits = match &self.fc {
            Some(fc) => {
                let g = tape.global_avg_pool(x)?;
                Some(fc.forward(tape, p, g)?)
            }
            None => None,
        };
        Ok(BackboneTaps { conv1, maxpool, stages: outs, logits })
    }
}

/// Plain stack of 3×3 stride-2 convolutions with ReLU: 16, 32, 64, 128 (C4)
/// and optionally 256 (C5) channels.
#[derive(Debug, Clone)]
pub struct TinyBackbone {
    convs: Vec<ConvLayer>,
}

impl TinyBackbone {
    pub const C4_CHANNELS: usize = 128;
    pub const C5_CHANNELS: usize = 256;

    pub fn build<R: Rng>(store: &mut ParamStore, stage4: bool, rng: &mut R) -> Self {
        let widths: &[usize] = if stage4 { &[3, 16, 32, 64, 128, 256] } else { &[3, 16, 32, 64, 128] };
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, c)| ConvLayer::init(store, &format!("tiny.conv{}", i + 1), ConvSpec::new(c[0], c[1], 3).with_stride(2), true, rng))
            .collect();
        Self { convs }
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        self.convs.iter().collect()
    }

    /// `(C4, C5)` outputs.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<(Var, Option<Var>)> {
        let mut x = image;
        let mut c4 = None;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(tape, p, x)?;
            x = tape.relu(x);
            if i == 3 {
                c4 = Some(x);
            }
        }
        let c4 = c4.expect("at least four convolutions");
        Ok((c4, (self.convs.len() > 4).then_some(x)))
    }
}
