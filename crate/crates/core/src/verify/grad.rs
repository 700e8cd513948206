//! Central-difference gradient suites over every differentiable operator.
//!
//! Fixtures keep each ReLU input, smooth-L1 knot and OHEM cut away from the
//! finite-difference stencil, so every check probes a locally smooth function.
//! Convolution and FC fixtures live on a quarter grid with biases offset by
//! 1/32, which makes their forward passes exact in 32-bit arithmetic.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Check;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::head::{assign_rcnn_targets, DetectionLoss, HeadConfig, RcnnHead};
use crate::ops::fully_connected;
use crate::params::{Bound, ConvLayer, ParamId, ParamStore};
use crate::roi_warp::{RoI, WarpSpec};
use crate::rpn::{anchor_deltas, anchor_logits, assign_labels, gen_anchors, sample_anchors, AnchorSpec, BBox, Label, RpnTargets};
use crate::tensor::{ConvSpec, Tensor};
use crate::thinmap::{LargeSepConv, LargeSepConvSpec};

pub const GRAD_TOLERANCE: f64 = 1e-2;
/// Random shapes per operator.
pub const CASES: usize = 3;

/// Step for functions linear along every input element, where the central
/// difference is exact for any step and a long one keeps rounding small.
const EPS_LINEAR: f32 = 1.0;
/// Step for ReLU networks on quarter-grid fixtures, below the 1/32 kink margin.
const EPS_RELU: f32 = 1.0 / 128.0;
/// Step for smooth losses.
const EPS_SMOOTH: f32 = 1.0 / 64.0;
/// Minimum distance of ReLU inputs, smooth-L1 knots and OHEM cuts from the
/// fixture point for fixtures that are not on the quarter grid.
const KNOT_MARGIN: f32 = 0.1;
/// ReLU margin of head fixtures. With pooled values and FC weights within
/// ±1, one stencil step moves a pre-activation by at most `EPS_SMOOTH`.
const HEAD_RELU_MARGIN: f32 = 2.0 * EPS_SMOOTH;
/// Minimum gap between the smallest kept and the largest dropped per-RoI
/// loss. One stencil step moves the per-RoI losses of the confident head
/// fixtures by well under a tenth of this.
const OHEM_MARGIN: f32 = 0.02;
/// Loss ceiling for head fixtures. Rounding of the loss and of the logits it
/// is computed from stays far below the tolerance at the 1e-4 floor when the
/// loss and its sensitivity to each logit are small.
const MAX_LOSS: f32 = 0.125;
/// Softmax curvature decays with the logit gap, which bounds the truncation
/// error of the central differences.
const MIN_LOGIT_GAP: f32 = 2.0;
const MAX_DRAWS: usize = 500;

/// Runs every gradient suite with fixtures drawn from `seed`.
pub fn gradient_suites(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    out.extend(conv_suite(&mut rng)?);
    out.extend(depthwise_suite(&mut rng)?);
    out.extend(dilated_suite(&mut rng)?);
    out.extend(fc_suite(&mut rng)?);
    out.extend(sep_conv_suite(&mut rng)?);
    out.extend(aligned_suite(&mut rng, true)?);
    out.extend(aligned_suite(&mut rng, false)?);
    out.extend(head_suite(&mut rng)?);
    out.extend(full_loss_suite(&mut rng)?);
    Ok(out)
}

fn quarter<R: Rng>(rng: &mut R) -> f32 {
    rng.gen_range(-4i32..=4) as f32 / 4.0
}

/// Multiples of 1/4 in `[-1, 1]`.
fn quarters<R: Rng>(dims: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(dims, |_| quarter(rng))
}

/// Quarter-grid values shifted by 1/32. A quarter-grid dot product plus such
/// a bias lies on `1/32 + Z/16`, at least 1/32 away from zero.
fn offset_bias<R: Rng>(n: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(&[n], |_| quarter(rng) + 1.0 / 32.0)
}

fn leaves(tape: &mut Tape, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect()
}

fn to_check(suite: &'static str, case: String, r: &GradCheckReport) -> Check {
    Check {
        suite,
        case,
        passed: r.passed(),
        metric: r.max_rel_error,
        detail: match r.worst {
            Some((input, element)) => format!(
                "{} elements, max rel error {:.2e} (tolerance {:.0e}) at input {input} element {element}: analytic {:.6e}, numeric {:.6e}",
                r.elements_checked, r.max_rel_error, r.tolerance, r.analytic_at_worst, r.numeric_at_worst
            ),
            None => "no elements".to_string(),
        },
    }
}

/// Checks `Σ r ⊙ forward(inputs)` with quarter-grid readout weights `r`.
fn check_readout<R, F>(suite: &'static str, case: String, inputs: &[Tensor], eps: f32, rng: &mut R, forward: F) -> Result<Check>
where
    R: Rng,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let numel = {
        let mut t = Tape::new();
        let v = leaves(&mut t, inputs);
        let y = forward(&mut t, &v)?;
        t.value(y).numel()
    };
    let weights: Vec<f32> = (0..numel).map(|_| quarter(rng)).collect();
    let r = grad_check(
        |t, v| {
            let y = forward(t, v)?;
            t.weighted_sum(y, weights.clone())
        },
        inputs,
        eps,
        GRAD_TOLERANCE,
    )?;
    Ok(to_check(suite, case, &r))
}

fn conv_case<R: Rng>(suite: &'static str, x_dims: [usize; 4], spec: ConvSpec, rng: &mut R) -> Result<Check> {
    let x = quarters(&x_dims, rng);
    let w = quarters(&spec.weight_dims(), rng);
    let b = offset_bias(spec.out_channels, rng);
    let case = format!(
        "x{x_dims:?} w{:?} stride {} pad {}x{} dilation {} groups {}",
        spec.weight_dims(),
        spec.stride,
        spec.pad_h,
        spec.pad_w,
        spec.dilation,
        spec.groups
    );
    check_readout(suite, case, &[x, w, b], EPS_RELU, rng, move |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
        Ok(t.relu(y))
    })
}

fn conv_suite<R: Rng>(rng: &mut R) -> Result<Vec<Check>> {
    (0..CASES)
        .map(|_| {
            let (n, c, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(4..=7), rng.gen_range(4..=7));
            let k = [1, 3][rng.gen_range(0..2)];
            let spec = ConvSpec::new(c, co, k)
                .with_stride(rng.gen_range(1..=2))
                .with_pad(rng.gen_range(0..=1), rng.gen_range(0..=1));
            conv_case("conv2d", [n, c, h, w], spec, rng)
        })
        .collect()
}

fn depthwise_suite<R: Rng>(rng: &mut R) -> Result<Vec<Check>> {
    (0..CASES)
        .map(|_| {
            let (n, c) = (rng.gen_range(1..=2), rng.gen_range(2..=4));
            let (h, w) = (rng.gen_range(4..=7), rng.gen_range(4..=7));
            let spec = ConvSpec::depthwise(c, 3, rng.gen_range(1..=2));
            conv_case("conv2d_depthwise", [n, c, h, w], spec, rng)
        })
        .collect()
}

fn dilated_suite<R: Rng>(rng: &mut R) -> Result<Vec<Check>> {
    (0..CASES)
        .map(|_| {
            let (n, c, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(5..=8), rng.gen_range(5..=8));
            let pad = rng.gen_range(0..=2);
            let spec = ConvSpec::new(c, co, 3).with_dilation(2).with_pad(pad, pad);
            conv_case("conv2d_dilated", [n, c, h, w], spec, rng)
        })
        .collect()
}

fn fc_suite<R: Rng>(rng: &mut R) -> Result<Vec<Check>> {
    (0..CASES)
        .map(|_| {
            let (b, i, o) = (rng.gen_range(1..=4), rng.gen_range(2..=8), rng.gen_range(1..=5));
            let inputs = [quarters(&[b, i], rng), quarters(&[i, o], rng), offset_bias(o, rng)];
            let case = format!("x[{b}, {i}] w[{i}, {o}]");
            check_readout("fully_connected", case, &inputs, EPS_RELU, rng, |t, v| {
                let y = t.fully_connected(v[0], v[1], Some(v[2]))?;
                Ok(t.relu(y))
            })
        })
        .collect()
}

/// Replaces every tensor of `store` with quarter-grid values.
fn quarter_store<R: Rng>(store: &mut ParamStore, rng: &mut R) {
    for t in store.tensors_mut() {
        *t = quarters(t.dims(), rng);
    }
}

fn sep_conv_suite<R: Rng>(rng: &mut R) -> Result<Vec<Check>> {
    let mut out = Vec::with_capacity(CASES);
    for i in 0..CASES {
        let (x_dims, spec) = if i == 0 {
            let spec = LargeSepConvSpec { k: 5, c_in: 8, c_mid: 4, c_out: 10, single_branch: false, bias: true };
            ([1, 8, 9, 9], spec)
        } else {
            let c_in = rng.gen_range(1..=3);
            let spec = LargeSepConvSpec {
                k: [3, 5][rng.gen_range(0..2)],
                c_in,
                c_mid: rng.gen_range(1..=4),
                c_out: rng.gen_range(2..=6),
                single_branch: rng.gen_bool(0.5),
                bias: true,
            };
            ([rng.gen_range(1..=2), c_in, rng.gen_range(4..=7), rng.gen_range(4..=7)], spec)
        };
        let mut store = ParamStore::new();
        let block = LargeSepConv::init(&mut store, "sep", spec, rng)?;
        quarter_store(&mut store, rng);
        let mut inputs = vec![quarters(&x_dims, rng)];
        inputs.extend(store.iter().map(|(_, _, t)| t.clone()));
        let case = format!(
            "x{x_dims:?} k {} mid {} out {} {}",
            spec.k,
            spec.c_mid,
            spec.c_out,
            if spec.single_branch { "one branch" } else { "two branches" }
        );
        out.push(check_readout("large_sep_conv", case, &inputs, EPS_LINEAR, rng, |t, v| {
            block.forward(t, &Bound::from(v[1..].to_vec()), v[0])
        })?);
    }
    Ok(out)
}

fn random_roi<R: Rng>(rng: &mut R, batch: usize, h: usize, w: usize, scale: f32) -> RoI {
    let (ih, iw) = (h as f32 / scale, w as f32 / scale);
    let x1 = rng.gen_range(-0.1 * iw..0.8 * iw);
    let y1 = rng.gen_range(-0.1 * ih..0.8 * ih);
    let x2 = x1 + rng.gen_range(0.3 * iw / w as f32..0.6 * iw);
    let y2 = y1 + rng.gen_range(0.3 * ih / h as f32..0.6 * ih);
    RoI::new(rng.gen_range(0..batch), x1, y1, x2, y2)
}

fn aligned_suite<R: Rng>(rng: &mut R, ps: bool) -> Result<Vec<Check>> {
    let suite = if ps { "psroi_pool_aligned" } else { "roi_align" };
    (0..CASES)
        .map(|_| {
            let (p, alpha) = (rng.gen_range(2..=3), rng.gen_range(1..=2));
            let scale = [1.0, 0.5][rng.gen_range(0..2)];
            let spec = WarpSpec::new(p, alpha, scale).with_sampling_ratio(rng.gen_range(1..=2));
            let c = if ps { spec.ps_channels() } else { rng.gen_range(1..=3) };
            let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(4..=7), rng.gen_range(4..=7));
            let rois: Vec<RoI> = (0..rng.gen_range(1..=3)).map(|_| random_roi(rng, n, h, w, scale)).collect();
            let case = format!("features[{n}, {c}, {h}, {w}] p {p} scale {scale} sr {} rois {}", spec.sampling_ratio, rois.len());
            let features = quarters(&[n, c, h, w], rng);
            check_readout(suite, case, &[features], EPS_LINEAR, rng, move |t, v| {
                if ps {
                    t.psroi_pool_aligned(v[0], &rois, spec)
                } else {
                    t.roi_align(v[0], &rois, spec)
                }
            })
        })
        .collect()
}

/// Distance of the OHEM cut from a tie, per image: the gap between the
/// smallest kept and the largest dropped per-RoI loss.
fn ohem_gap(per_roi: &[f32], groups: &[usize], keep: usize) -> f32 {
    let mut gap = f32::INFINITY;
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    for g in ids {
        let mut l: Vec<f32> = per_roi.iter().zip(groups).filter(|(_, &gg)| gg == g).map(|(&v, _)| v).collect();
        l.sort_by(|a, b| b.total_cmp(a));
        if keep > 0 && keep < l.len() {
            gap = gap.min(l[keep - 1] - l[keep]);
        }
    }
    gap
}

/// Smallest distance of a positive's regression residual from the
/// smooth-L1 knots at ±1.
fn knot_gap(deltas: &[f32], targets: &[[f32; 4]], positive: impl Fn(usize) -> bool) -> f32 {
    targets
        .iter()
        .enumerate()
        .filter(|(i, _)| positive(*i))
        .flat_map(|(i, t)| (0..4).map(move |j| ((deltas[i * 4 + j] - t[j]).abs() - 1.0).abs()))
        .fold(f32::INFINITY, f32::min)
}

fn min_abs(values: &[f32]) -> f32 {
    values.iter().fold(f32::INFINITY, |a, v| a.min(v.abs()))
}

/// Head fixtures and their second-stage supervision.
struct HeadFixture {
    head: RcnnHead,
    labels: Vec<usize>,
    targets: Vec<[f32; 4]>,
    groups: Vec<usize>,
}

impl HeadFixture {
    /// `(loss, logits, deltas, loss parts)`.
    fn loss(&self, tape: &mut Tape, p: &Bound, pooled: Var) -> Result<(Var, Var, Var, DetectionLoss)> {
        let (logits, deltas) = self.head.forward(tape, p, pooled)?;
        let (loss, parts) = tape.detection_loss(logits, deltas, &self.labels, &self.targets, &self.groups, &self.head.cfg)?;
        Ok((loss, logits, deltas, parts))
    }

    /// Labels every RoI with its own argmax. The first two positives of each
    /// group get regression residuals of 0.22 and 0.15 per coordinate, later
    /// ones none, which spreads the per-RoI losses across the OHEM cut.
    fn agree_with<R: Rng>(&mut self, logits: &[f32], deltas: &[f32], rng: &mut R) {
        let k = self.head.cfg.logits();
        let mut rank = std::collections::HashMap::new();
        for (r, row) in logits.chunks(k).enumerate() {
            let label = (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            self.labels[r] = label;
            self.targets[r] = [0.0; 4];
            if label > 0 {
                let j = rank.entry(self.groups[r]).or_insert(0usize);
                let residual = [0.22, 0.15].get(*j).copied().unwrap_or(0.0);
                self.targets[r] = near(&deltas[r * 4..r * 4 + 4], residual, rng);
                *j += 1;
            }
        }
    }

    /// Whether a forward pass keeps ReLU inputs `relu_margin` and smooth-L1
    /// residuals `KNOT_MARGIN` from their knots, the OHEM cut `OHEM_MARGIN` from a tie,
    /// and every RoI's top logit `MIN_LOGIT_GAP` ahead of the runner-up.
    fn within_margins(&self, store: &ParamStore, pooled: &Tensor, logits: &Tensor, deltas: &Tensor, parts: &DetectionLoss, relu_margin: f32) -> Result<bool> {
        let flat = pooled.clone().reshape(&[pooled.dim(0), self.head.cfg.in_features()])?;
        let pre = fully_connected(&flat, store.get(self.head.fc.weight), Some(store.get(self.head.fc.bias)))?;
        let relu = min_abs(pre.data()) >= relu_margin;
        let knots = knot_gap(deltas.data(), &self.targets, |i| self.labels[i] > 0);
        let cut = ohem_gap(&parts.per_roi, &self.groups, self.head.cfg.ohem_keep);
        let gap = top_two_gap(logits.data(), self.head.cfg.logits());
        Ok(relu && knots >= KNOT_MARGIN && cut >= OHEM_MARGIN && gap >= MIN_LOGIT_GAP && parts.total <= MAX_LOSS)
    }
}

/// Moves each coordinate by `residual` with a random sign.
fn near<R: Rng>(d: &[f32], residual: f32, rng: &mut R) -> [f32; 4] {
    std::array::from_fn(|j| d[j] + if rng.gen() { residual } else { -residual })
}

/// Smallest gap between the two largest logits of any row.
fn top_two_gap(logits: &[f32], k: usize) -> f32 {
    logits
        .chunks(k)
        .map(|row| {
            let mut r = row.to_vec();
            r.sort_by(|a, b| b.total_cmp(a));
            r[0] - r[1]
        })
        .fold(f32::INFINITY, f32::min)
}

/// Mild weights keep the curvature of the loss low; class biases 4 apart
/// make most RoIs confident.
fn init_head<R: Rng>(store: &mut ParamStore, cfg: HeadConfig, rng: &mut R) -> Result<RcnnHead> {
    let head = RcnnHead::init(store, cfg, rng);
    for (id, std) in [(head.fc.weight, 0.25), (head.fc.bias, 0.5), (head.cls.weight, 0.25), (head.reg.weight, 0.25), (head.reg.bias, 0.1)] {
        let t = store.get_mut(id);
        *t = Tensor::randn(t.dims(), std, rng);
    }
    let mut lead: Vec<f32> = (0..cfg.logits()).map(|c| 4.0 - 4.0 * c as f32).collect();
    lead.shuffle(rng);
    let t = store.get_mut(head.cls.bias);
    *t = Tensor::new(t.dims(), lead)?;
    Ok(head)
}

fn head_suite<R: Rng>(rng: &mut R) -> Result<Vec<Check>> {
    (0..CASES)
        .map(|_| {
            let cfg = HeadConfig {
                p: rng.gen_range(2..=3),
                alpha: rng.gen_range(1..=2),
                fc_width: rng.gen_range(3..=6),
                num_classes: rng.gen_range(2..=3),
                ohem_keep: 2,
                reg_loss_weight: 1.0,
                ..HeadConfig::default()
            };
            let groups = vec![0, 0, 0, 1, 1, 1];
            let r = groups.len();
            let (store, fixture, pooled) = draw(rng, |rng| {
                let mut store = ParamStore::new();
                let head = init_head(&mut store, cfg, rng)?;
                let mut fixture = HeadFixture { head, labels: vec![0; r], targets: vec![[0.0; 4]; r], groups: groups.clone() };
                let pooled = quarters(&[r, cfg.alpha, cfg.p, cfg.p], rng);
                let pass = |fixture: &HeadFixture| -> Result<(Tensor, Tensor, DetectionLoss)> {
                    let mut tape = Tape::new();
                    let p = store.bind(&mut tape, false);
                    let x = tape.constant(pooled.clone());
                    let (_, logits, deltas, parts) = fixture.loss(&mut tape, &p, x)?;
                    Ok((tape.value(logits).clone(), tape.value(deltas).clone(), parts))
                };
                let (logits, deltas, _) = pass(&fixture)?;
                fixture.agree_with(logits.data(), deltas.data(), rng);
                let (logits, deltas, parts) = pass(&fixture)?;
                let unit = store.get(fixture.head.fc.weight).data().iter().all(|w| w.abs() <= 1.0);
                let ok = unit && fixture.within_margins(&store, &pooled, &logits, &deltas, &parts, HEAD_RELU_MARGIN)?;
                Ok(ok.then(|| (store.clone(), fixture, pooled.clone())))
            })?;
            let fg = fixture.labels.iter().filter(|&&l| l > 0).count();
            let mut inputs = vec![pooled];
            inputs.extend(store.iter().map(|(_, _, t)| t.clone()));
            let case = format!(
                "pooled[{r}, {}, {p}, {p}] fc {} classes {} ohem {} ({fg} fg)",
                cfg.alpha,
                cfg.fc_width,
                cfg.num_classes,
                cfg.ohem_keep,
                p = cfg.p
            );
            let report = grad_check(
                |t, v| fixture.loss(t, &Bound::from(v[1..].to_vec()), v[0]).map(|(l, ..)| l),
                &inputs,
                EPS_SMOOTH,
                GRAD_TOLERANCE,
            )?;
            Ok(to_check("head", case, &report))
        })
        .collect()
}

/// Draws fixtures until `make` accepts one.
fn draw<R: Rng, T>(rng: &mut R, mut make: impl FnMut(&mut R) -> Result<Option<T>>) -> Result<T> {
    for _ in 0..MAX_DRAWS {
        if let Some(t) = make(rng)? {
            return Ok(t);
        }
    }
    Err(Error::InvalidArgument(format!("no fixture within the margins in {MAX_DRAWS} draws")))
}

/// Feature map → RPN (conv, ReLU, objectness and box branches) and thin map →
/// aligned PSRoI → head, with the joint RPN and detection loss.
struct FullNet {
    rpn_conv: ConvLayer,
    rpn_cls: ConvLayer,
    rpn_reg: ConvLayer,
    thin: LargeSepConv,
    warp: WarpSpec,
    rpn_reg_weight: f32,
    rpn_targets: Vec<RpnTargets>,
    rois: Vec<RoI>,
    second: HeadFixture,
}

struct FullPass {
    total: Var,
    rpn_logits: Var,
    rpn_deltas: Var,
    logits: Var,
    pooled: Var,
    deltas: Var,
    parts: DetectionLoss,
}

impl FullNet {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<FullPass> {
        let h = self.rpn_conv.forward(tape, p, x)?;
        let h = tape.relu(h);
        let rpn_logits = self.rpn_cls.forward(tape, p, h)?;
        let rpn_deltas = self.rpn_reg.forward(tape, p, h)?;
        let (rpn, _, _) = tape.rpn_loss(rpn_logits, rpn_deltas, &self.rpn_targets, self.rpn_reg_weight)?;
        let thin = self.thin.forward(tape, p, x)?;
        let pooled = tape.psroi_pool_aligned(thin, &self.rois, self.warp)?;
        let (det, logits, deltas, parts) = self.second.loss(tape, p, pooled)?;
        let total = tape.add(rpn, det)?;
        Ok(FullPass { total, rpn_logits, rpn_deltas, logits, pooled, deltas, parts })
    }
}

fn set_quarters<R: Rng>(store: &mut ParamStore, layer: &ConvLayer, rng: &mut R) {
    let t = store.get_mut(layer.weight);
    *t = quarters(t.dims(), rng);
    if let Some(b) = layer.bias {
        let t = store.get_mut(b);
        *t = quarters(t.dims(), rng);
    }
}

fn set_normal<R: Rng>(store: &mut ParamStore, ids: &[ParamId], std: f32, rng: &mut R) {
    for &id in ids {
        let t = store.get_mut(id);
        *t = Tensor::randn(t.dims(), std, rng);
    }
}

/// Shifts by up to `amount` and resizes by up to `amount / 2` per axis.
fn jitter<R: Rng>(b: &BBox, rng: &mut R, amount: f32) -> BBox {
    let (dx, dy) = (rng.gen_range(-amount..amount), rng.gen_range(-amount..amount));
    let (dw, dh) = (rng.gen_range(-amount..amount) / 4.0, rng.gen_range(-amount..amount) / 4.0);
    BBox::new(b.x1 + dx - dw, b.y1 + dy - dh, b.x2 + dx + dw, b.y2 + dy + dh)
}

fn full_fixture<R: Rng>(rng: &mut R) -> Result<Option<(ParamStore, FullNet, Tensor)>> {
    let (c, m) = (rng.gen_range(2..=3), rng.gen_range(2..=3));
    let (fh, fw) = (rng.gen_range(3..=4), rng.gen_range(3..=4));
    let anchors_spec = AnchorSpec { areas: vec![16.0 * 16.0, 32.0 * 32.0], ..AnchorSpec::default() };
    let a = anchors_spec.per_cell();
    let (p, alpha) = (2, rng.gen_range(1..=2));
    let warp = WarpSpec::new(p, alpha, 1.0 / 16.0);
    // Unit regression weights keep the loss value, and with it the rounding
    // noise of the finite differences, small. OHEM keeps all six RoIs; the
    // cut itself is exercised by the head suite.
    let head_cfg = HeadConfig {
        p,
        alpha,
        fc_width: rng.gen_range(3..=4),
        num_classes: 2,
        reg_loss_weight: 1.0,
        ohem_keep: 6,
        delta_weights: [1.0; 4],
    };

    let mut store = ParamStore::new();
    let rpn_conv = ConvLayer::init(&mut store, "rpn.conv", ConvSpec::new(c, m, 3), true, rng);
    let rpn_cls = ConvLayer::normal(&mut store, "rpn.cls", ConvSpec::new(m, a, 1), 0.25, rng);
    let rpn_reg = ConvLayer::normal(&mut store, "rpn.reg", ConvSpec::new(m, 4 * a, 1), 0.3, rng);
    let thin_spec = LargeSepConvSpec { k: 3, c_in: c, c_mid: 2, c_out: alpha * p * p, single_branch: false, bias: true };
    let thin = LargeSepConv::init(&mut store, "thin", thin_spec, rng)?;
    let head = init_head(&mut store, head_cfg, rng)?;
    set_quarters(&mut store, &rpn_conv, rng);
    let b = rpn_conv.bias.expect("rpn conv has a bias");
    *store.get_mut(b) = offset_bias(m, rng);
    // Eighth-grid thin weights in [-1/2, 1/2] keep the pooled values, and the
    // loss curvature along the FC weights, moderate.
    for layer in thin.layers() {
        set_quarters(&mut store, layer, rng);
        store.get_mut(layer.weight).data_mut().iter_mut().for_each(|w| *w /= 2.0);
    }
    let t = store.get_mut(rpn_cls.bias.expect("bias"));
    *t = Tensor::from_fn(t.dims(), |_| if rng.gen() { 4.0 } else { -4.0 });
    set_normal(&mut store, &[rpn_reg.bias.expect("bias")], 0.2, rng);

    let (ih, iw) = ((16 * fh) as f32, (16 * fw) as f32);
    let gts: Vec<(BBox, usize)> = (0..rng.gen_range(1..=2))
        .map(|_| {
            let (w, h) = (rng.gen_range(16.0..40.0f32), rng.gen_range(16.0..40.0f32));
            let (x, y) = (rng.gen_range(0.0..iw - w), rng.gen_range(0.0..ih - h));
            (BBox::new(x, y, x + w, y + h), rng.gen_range(1..=2))
        })
        .collect();
    let gt_boxes: Vec<BBox> = gts.iter().map(|(b, _)| *b).collect();
    let anchors = gen_anchors(&anchors_spec, fh, fw);
    let assignment = assign_labels(&anchors, &gt_boxes, 0.7, 0.3)?;
    let sampled = sample_anchors(&assignment.labels, 16, 0.5, rng);
    let rpn_targets = vec![RpnTargets { sampled, assignment }];

    let mut boxes = gt_boxes.clone();
    boxes.extend(gt_boxes.iter().map(|b| jitter(b, rng, 4.0)));
    while boxes.len() < 6 {
        let g = boxes[rng.gen_range(0..gt_boxes.len())];
        boxes.push(jitter(&g, rng, 12.0).clip(ih, iw));
    }
    let (labels, targets) = assign_rcnn_targets(&boxes, &gts, 0.5, head_cfg.delta_weights)?;
    let rois: Vec<RoI> = boxes.iter().map(|b| RoI::new(0, b.x1, b.y1, b.x2, b.y2)).collect();
    let groups = vec![0; rois.len()];
    let second = HeadFixture { head, labels, targets, groups };
    let mut net = FullNet { rpn_conv, rpn_cls, rpn_reg, thin, warp, rpn_reg_weight: 1.0, rpn_targets, rois, second };
    let x = quarters(&[1, c, fh, fw], rng);
    agree_with_predictions(&mut net, &store, &x, rng)?;

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let pass = net.forward(&mut tape, &bound, xv)?;
    let t = &net.rpn_targets[0];
    let rpn_d: Vec<f32> = anchor_deltas(tape.value(pass.rpn_deltas), 0).into_iter().flatten().collect();
    let sampled_pos = |i: usize| t.sampled.contains(&i) && t.assignment.labels[i] == Label::Positive;
    // One step on an FC weight moves its pre-activation by the pooled value times the step.
    let pooled_max = tape.value(pass.pooled).data().iter().fold(0f32, |a, v| a.max(v.abs()));
    let relu_margin = KNOT_MARGIN.max(2.0 * EPS_SMOOTH * pooled_max);
    let second = net.second.within_margins(&store, tape.value(pass.pooled), tape.value(pass.logits), tape.value(pass.deltas), &pass.parts, relu_margin)?;
    let rpn_logits = anchor_logits(tape.value(pass.rpn_logits), 0);
    let rpn_gap = t.sampled.iter().map(|&i| rpn_logits[i].abs()).fold(f32::INFINITY, f32::min);
    let first = knot_gap(&rpn_d, &t.assignment.targets, sampled_pos) >= KNOT_MARGIN && rpn_gap >= MIN_LOGIT_GAP;
    let small = tape.value(pass.total).data()[0] <= MAX_LOSS;
    Ok((first && second && small).then_some((store, net, x)))
}

/// Relabels the sampled anchors and the RoIs after the network's own
/// predictions and puts regression targets near the predicted deltas.
/// The loss and its sensitivity to rounded intermediates stay small.
fn agree_with_predictions<R: Rng>(net: &mut FullNet, store: &ParamStore, x: &Tensor, rng: &mut R) -> Result<()> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let pass = net.forward(&mut tape, &bound, xv)?;
    let rpn_logits = anchor_logits(tape.value(pass.rpn_logits), 0);
    let rpn_deltas = anchor_deltas(tape.value(pass.rpn_deltas), 0);
    let t = &mut net.rpn_targets[0];
    for &i in &t.sampled {
        let positive = rpn_logits[i] > 0.0;
        t.assignment.labels[i] = if positive { Label::Positive } else { Label::Negative };
        t.assignment.targets[i] = if positive { near(&rpn_deltas[i], rng.gen_range(0.05..0.2), rng) } else { [0.0; 4] };
    }
    net.second.agree_with(tape.value(pass.logits).data(), tape.value(pass.deltas).data(), rng);
    Ok(())
}

fn full_loss_suite<R: Rng>(rng: &mut R) -> Result<Vec<Check>> {
    (0..CASES)
        .map(|_| {
            let (store, net, x) = draw(rng, |rng| full_fixture(rng))?;
            let fg = net.second.labels.iter().filter(|&&l| l > 0).count();
            let case = format!(
                "features{:?} anchors {} sampled {} rois {} ({fg} fg)",
                x.dims(),
                net.rpn_targets[0].assignment.labels.len(),
                net.rpn_targets[0].sampled.len(),
                net.rois.len()
            );
            let mut inputs = vec![x];
            inputs.extend(store.iter().map(|(_, _, t)| t.clone()));
            let value = {
                let mut tape = Tape::new();
                let v = leaves(&mut tape, &inputs);
                let total = net.forward(&mut tape, &Bound::from(v[1..].to_vec()), v[0])?.total;
                tape.value(total).data()[0]
            };
            let case = format!("{case} loss {value:.4}");
            let report = grad_check(
                |t, v| net.forward(t, &Bound::from(v[1..].to_vec()), v[0]).map(|p| p.total),
                &inputs,
                EPS_SMOOTH,
                GRAD_TOLERANCE,
            )?;
            Ok(to_check("full_loss", case, &report))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_bias_keeps_quarter_grid_sums_off_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = quarters(&[64], &mut rng);
        let w = quarters(&[64], &mut rng);
        let b = offset_bias(64, &mut rng);
        for i in 0..64 {
            let z: f32 = x.data()[..i].iter().zip(&w.data()[..i]).map(|(a, b)| a * b).sum::<f32>() + b.data()[i];
            assert!(z.abs() >= 1.0 / 32.0);
        }
    }

    #[test]
    fn ohem_gap_measures_the_cut() {
        assert_eq!(ohem_gap(&[3.0, 1.0, 2.0], &[0, 0, 0], 1), 1.0);
        assert_eq!(ohem_gap(&[3.0, 1.0], &[0, 0], 2), f32::INFINITY);
    }

    #[test]
    fn every_suite_passes() {
        let checks = gradient_suites(7).unwrap();
        for c in &checks {
            assert!(c.passed, "{}", c.render());
        }
        assert_eq!(checks.len(), 9 * CASES);
    }
}

