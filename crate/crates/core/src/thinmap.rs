//! Thin feature maps from a large separable convolution.
//!
//! Two branches, `(k×1 → 1×k)` and `(1×k → k×1)`, each through `c_mid`
//! channels, summed. No nonlinearity inside a branch, so each branch is a
//! rank-factored linear `k×k` map.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::cost::{CostItem, CostReport};
use crate::error::{Error, Result};
use crate::params::{Bound, ConvLayer, ParamStore};
use crate::tensor::ConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LargeSepConvSpec {
    pub k: usize,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    /// Only the `(k×1 → 1×k)` branch.
    pub single_branch: bool,
    pub bias: bool,
}

impl LargeSepConvSpec {
    /// Fast-detector setting: `k = 15`, `C_mid = 64`, `C_out = 490` on 576 input channels.
    pub fn setting_s() -> Self {
        Self {
            k: 15,
            c_in: 576,
            c_mid: 64,
            c_out: 490,
            single_branch: false,
            bias: true,
        }
    }

    pub fn pad(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn branches(&self) -> usize {
        if self.single_branch {
            1
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("large separable conv needs an odd kernel, got k = {}", self.k)));
        }
        if self.c_in == 0 || self.c_mid == 0 || self.c_out == 0 {
            return Err(Error::InvalidArgument(format!("large separable conv channels must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Checks `C_out == α·p·p` with `α <= 10` and returns α.
    pub fn thin_alpha(&self, p: usize) -> Result<usize> {
        let pp = p * p;
        if pp == 0 || !self.c_out.is_multiple_of(pp) {
            return Err(Error::Config(format!("thin map C_out {} is not a multiple of p*p = {pp}", self.c_out)));
        }
        let alpha = self.c_out / pp;
        if alpha > 10 {
            return Err(Error::Config(format!("thin map alpha {alpha} exceeds 10")));
        }
        Ok(alpha)
    }

    fn column(&self, cin: usize, cout: usize) -> ConvSpec {
        ConvSpec::new(cin, cout, 1).with_kernel(self.k, 1).with_pad(self.pad(), 0)
    }

    fn row(&self, cin: usize, cout: usize) -> ConvSpec {
        ConvSpec::new(cin, cout, 1).with_kernel(1, self.k).with_pad(0, self.pad())
    }

    /// `(name, spec)` of every conv in evaluation order.
    pub fn convs(&self) -> Vec<(&'static str, ConvSpec)> {
        let mut v = vec![
            ("branch_a.kx1", self.column(self.c_in, self.c_mid)),
            ("branch_a.1xk", self.row(self.c_mid, self.c_out)),
        ];
        if !self.single_branch {
            v.push(("branch_b.1xk", self.row(self.c_in, self.c_mid)));
            v.push(("branch_b.kx1", self.column(self.c_mid, self.c_out)));
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct LargeSepConv {
    pub spec: LargeSepConvSpec,
    a1: ConvLayer,
    a2: ConvLayer,
    b: Option<(ConvLayer, ConvLayer)>,
}

impl LargeSepConv {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, spec: LargeSepConvSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let convs = spec.convs();
        let mut layers = convs
            .iter()
            .map(|(n, s)| ConvLayer::init(store, &format!("{name}.{n}"), *s, spec.bias, rng));
        let a1 = layers.next().unwrap();
        let a2 = layers.next().unwrap();
        let b = match (layers.next(), layers.next()) {
            (Some(b1), Some(b2)) => Some((b1, b2)),
            _ => None,
        };
        Ok(Self { spec, a1, a2, b })
    }

    pub fn layers(&self) -> Vec<&ConvLayer> {
        let mut v = vec![&self.a1, &self.a2];
        if let Some((b1, b2)) = &self.b {
            v.push(b1);
            v.push(b2);
        }
        v
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let a = self.a1.forward(tape, p, x)?;
        let a = self.a2.forward(tape, p, a)?;
        match &self.b {
            Some((b1, b2)) => {
                let b = b1.forward(tape, p, x)?;
                let b = b2.forward(tape, p, b)?;
                tape.add(a, b)
            }
            None => Ok(a),
        }
    }
}

/// Cost of the separable block and of the dense `k×k` conv it replaces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SepConvCost {
    pub report: CostReport,
    pub dense_kxk_macs: u64,
}

impl SepConvCost {
    pub fn ratio_to_dense(&self) -> f64 {
        self.report.macs as f64 / self.dense_kxk_macs as f64
    }
}

/// `branches · H·W · (k·C_in·C_mid + k·C_mid·C_out)` against `H·W·k²·C_in·C_out`.
pub fn sep_conv_flops(spec: &LargeSepConvSpec, h: usize, w: usize) -> SepConvCost {
    let (k, hw) = (spec.k as u64, (h * w) as u64);
    let (ci, cm, co) = (spec.c_in as u64, spec.c_mid as u64, spec.c_out as u64);
    let b = |c: u64| if spec.bias { c } else { 0 };
    let mut items = Vec::new();
    let names: &[(&str, &str)] = if spec.single_branch {
        &[("branch_a.kx1", "branch_a.1xk")]
    } else {
        &[("branch_a.kx1", "branch_a.1xk"), ("branch_b.1xk", "branch_b.kx1")]
    };
    for (first, second) in names {
        items.push(CostItem::map(*first, hw * k * ci * cm, k * ci * cm + b(cm), cm, h as u64, w as u64));
        items.push(CostItem::map(*second, hw * k * cm * co, k * cm * co + b(co), co, h as u64, w as u64));
    }
    SepConvCost {
        report: CostReport::from_items(items),
        dense_kxk_macs: hw * k * k * ci * co,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn even_kernel_rejected() {
        let mut s = LargeSepConvSpec::setting_s();
        s.k = 14;
        assert!(s.validate().is_err());
        assert!(LargeSepConv::init(&mut ParamStore::new(), "t", s, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn setting_s_channels_and_cost() {
        let s = LargeSepConvSpec::setting_s();
        assert_eq!(s.thin_alpha(7).unwrap(), 10);
        assert_eq!(s.c_out, 10 * 7 * 7);
        let per_position = sep_conv_flops(&s, 1, 1).report.macs;
        assert_eq!(per_position, 2 * (15 * 576 * 64 + 15 * 64 * 490));
        assert_eq!(per_position, 2_046_720);
        let c = sep_conv_flops(&s, 38, 50);
        assert_eq!(c.report.macs, 2_046_720 * 1900);
        assert_eq!(c.dense_kxk_macs, 15 * 15 * 576 * 490 * 1900);
    }

    #[test]
    fn zero_mid_channels_cost_nothing() {
        let mut s = LargeSepConvSpec::setting_s();
        s.c_mid = 0;
        assert_eq!(sep_conv_flops(&s, 38, 50).report.macs, 0);
    }

    #[test]
    fn separable_is_cheaper_exactly_below_the_crossover() {
        for single_branch in [false, true] {
            let branches = if single_branch { 1 } else { 2 };
            for k in [1usize, 3, 7, 15] {
                for (c_in, c_out) in [(8usize, 8usize), (576, 490), (64, 10)] {
                    for c_mid in [1usize, 2, 4, 16, 64, 128, 256, 1024] {
                        let spec = LargeSepConvSpec { k, c_in, c_mid, c_out, single_branch, bias: false };
                        let cost = sep_conv_flops(&spec, 5, 3);
                        let cheaper = cost.report.macs < cost.dense_kxk_macs;
                        assert_eq!(cheaper, branches * c_mid * (c_in + c_out) < k * c_in * c_out, "{spec:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn thin_alpha_limits() {
        let mut s = LargeSepConvSpec::setting_s();
        s.c_out = 11 * 49;
        assert!(s.thin_alpha(7).is_err());
        s.c_out = 491;
        assert!(s.thin_alpha(7).is_err());
    }

    #[test]
    fn preserves_spatial_shape() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3, 5, 7] {
            let spec = LargeSepConvSpec { k, c_in: 3, c_mid: 2, c_out: 4, single_branch: false, bias: true };
            let mut store = ParamStore::new();
            let m = LargeSepConv::init(&mut store, "t", spec, &mut r).unwrap();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let x = tape.constant(Tensor::randn(&[2, 3, 5, 6], 1.0, &mut r));
            let y = m.forward(&mut tape, &p, x).unwrap();
            assert_eq!(tape.dims(y), &[2, 4, 5, 6]);
        }
    }
}
