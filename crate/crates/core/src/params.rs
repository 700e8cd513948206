//! Named parameter storage and the weights-directory format
//! (`manifest.txt` of `name file` lines next to one LHT1 file per tensor).

use std::fs;
use std::ops::Index;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{fold_batch_norm, FrozenBatchNorm};
use crate::tensor::{ConvSpec, Tensor};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape variables for every parameter of a store, in store order.
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Binds externally created variables, one per store entry in store order.
impl From<Vec<Var>> for Bound {
    fn from(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect())
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (i, (name, t)) in self.names.iter().zip(&self.tensors).enumerate() {
            let file = format!("{i:04}.lht");
            t.save(dir.join(&file))?;
            manifest.push_str(&format!("{name} {file}\n"));
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    /// Reads a weights directory. Every listed tensor must already exist in `self`
    /// with identical dims, and every parameter of `self` must be listed.
    pub fn load_dir(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let manifest = fs::read_to_string(dir.join(MANIFEST))?;
        let mut seen = vec![false; self.tensors.len()];
        for (lineno, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(name), Some(file), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format(format!("manifest line {}: expected `name file`", lineno + 1)));
            };
            let id = self
                .find(name)
                .ok_or_else(|| Error::Format(format!("manifest names unknown parameter {name}")))?;
            let t = Tensor::load(dir.join(file))?;
            if t.dims() != self.tensors[id.0].dims() {
                return Err(Error::Format(format!(
                    "parameter {name}: file has dims {:?}, model expects {:?}",
                    t.dims(),
                    self.tensors[id.0].dims()
                )));
            }
            self.tensors[id.0] = t;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("manifest is missing parameter {}", self.names[i])));
        }
        Ok(())
    }
}

/// Convolution with folded batch-norm parameters (weight plus optional bias).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvLayer {
    /// He-initialised conv with identity frozen BN folded in.
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, spec: ConvSpec, bias: bool, rng: &mut R) -> Self {
        let w = Tensor::he_normal(&spec.weight_dims(), spec.fan_in(), rng);
        let (w, b) = fold_batch_norm(&w, None, &FrozenBatchNorm::identity(spec.out_channels, 1e-5))
            .expect("identity statistics have matching lengths");
        Self::from_tensors(store, name, spec, w, bias.then_some(b))
    }

    /// Gaussian weights with a fixed standard deviation, zero bias.
    pub fn normal<R: Rng>(store: &mut ParamStore, name: &str, spec: ConvSpec, std: f32, rng: &mut R) -> Self {
        let w = Tensor::randn(&spec.weight_dims(), std, rng);
        Self::from_tensors(store, name, spec, w, Some(Tensor::zeros(&[spec.out_channels])))
    }

    pub fn zeros(store: &mut ParamStore, name: &str, spec: ConvSpec, bias: bool) -> Self {
        let w = Tensor::zeros(&spec.weight_dims());
        let b = bias.then(|| Tensor::zeros(&[spec.out_channels]));
        Self::from_tensors(store, name, spec, w, b)
    }

    fn from_tensors(store: &mut ParamStore, name: &str, spec: ConvSpec, w: Tensor, b: Option<Tensor>) -> Self {
        let weight = store.add(format!("{name}.weight"), w);
        let bias = b.map(|b| store.add(format!("{name}.bias"), b));
        Self { spec, weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.spec)
    }

    pub fn param_count(&self) -> u64 {
        self.spec.param_count(self.bias.is_some())
    }
}

/// Fully connected layer with weight `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let w = Tensor::he_normal(&[in_features, out_features], in_features, rng);
        Self::from_tensors(store, name, w, Tensor::zeros(&[out_features]))
    }

    pub fn with_std<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        std: f32,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::randn(&[in_features, out_features], std, rng);
        Self::from_tensors(store, name, w, Tensor::zeros(&[out_features]))
    }

    fn from_tensors(store: &mut ParamStore, name: &str, w: Tensor, b: Tensor) -> Self {
        let (in_features, out_features) = (w.dim(0), w.dim(1));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.fully_connected(x, p[self.weight], Some(p[self.bias]))
    }
}
