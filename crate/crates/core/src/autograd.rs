//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every op evaluates eagerly and, when any input requires a gradient, stores a
//! closure mapping the output gradient to input gradients. Backward walks the
//! tape in reverse creation order, so accumulation order is fixed.

use crate::error::{Error, Result};
use crate::ops::{self, PoolSpec};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f32],
    /// Which inputs want a gradient; closures may return `None` for the rest.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Result<Vec<Option<Vec<f32>>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `(op name, dims)` of every node created after `since` (exclusive).
    pub fn trace_since(&self, since: Var) -> Vec<(&'static str, Vec<usize>)> {
        self.nodes[since.0 + 1..]
            .iter()
            .map(|n| (n.op, n.value.dims().to_vec()))
            .collect()
    }

    /// Records an op computed outside the tape. `backward` must return one entry per input.
    pub fn custom(&mut self, op: &'static str, inputs: &[Var], output: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: output,
            inputs: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                msg: format!("loss must be a scalar, got {:?}", self.nodes[loss.0].value.dims()),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let ctx = BackwardCtx {
                    inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                    output: &node.value,
                    grad: &g,
                    needs,
                };
                let input_grads = bw(&ctx)?;
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
                for (v, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; node.value.numel()]));
            }
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let has_bias = b.is_some();
        Ok(self.custom(
            "conv2d",
            &inputs,
            out,
            Box::new(move |c| {
                let need = [c.needs[0], c.needs[1], has_bias && c.needs[2]];
                let g = ops::conv2d_backward(c.inputs[0], c.inputs[1], has_bias, &spec, c.grad, need)?;
                let mut v = vec![g.input, g.weight];
                if has_bias {
                    v.push(g.bias);
                }
                Ok(v)
            }),
        ))
    }

    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::fully_connected(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let has_bias = b.is_some();
        Ok(self.custom(
            "fully_connected",
            &inputs,
            out,
            Box::new(move |c| {
                let need = [c.needs[0], c.needs[1], has_bias && c.needs[2]];
                let (gx, gw, gb) = ops::fully_connected_backward(c.inputs[0], c.inputs[1], c.grad, need)?;
                let mut v = vec![gx, gw];
                if has_bias {
                    v.push(gb);
                }
                Ok(v)
            }),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.custom(
            "relu",
            &[x],
            out,
            Box::new(|c| Ok(vec![Some(ops::pool::relu_backward(c.output, c.grad))])),
        )
    }

    pub fn max_pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d(self.value(x), &spec)?;
        Ok(self.custom(
            "max_pool2d",
            &[x],
            out,
            Box::new(move |c| {
                Ok(vec![Some(ops::pool::max_pool2d_backward(
                    c.inputs[0].numel(),
                    &argmax,
                    c.grad,
                ))])
            }),
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let out = ops::avg_pool2d(self.value(x), &spec)?;
        Ok(self.custom(
            "avg_pool2d",
            &[x],
            out,
            Box::new(move |c| Ok(vec![Some(ops::pool::avg_pool2d_backward(c.inputs[0], &spec, c.grad)?)])),
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        Ok(self.custom(
            "global_avg_pool",
            &[x],
            out,
            Box::new(|c| Ok(vec![Some(ops::pool::global_avg_pool_backward(c.inputs[0].nchw(), c.grad))])),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::Shape {
                op: "add",
                msg: format!("{:?} vs {:?}", ta.dims(), tb.dims()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.dims(), data)?;
        Ok(self.custom(
            "add",
            &[a, b],
            out,
            Box::new(|c| Ok(vec![Some(c.grad.to_vec()), Some(c.grad.to_vec())])),
        ))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.dims(), t.data().iter().map(|v| v * s).collect()).unwrap();
        self.custom(
            "scale",
            &[x],
            out,
            Box::new(move |c| Ok(vec![Some(c.grad.iter().map(|g| g * s).collect())])),
        )
    }

    /// Concatenates two NCHW maps along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = ta.nchw();
        let [nb, cb, hb, wb] = tb.nchw();
        if ta.rank() != 4 || tb.rank() != 4 || (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape {
                op: "concat_channels",
                msg: format!("{:?} vs {:?}", ta.dims(), tb.dims()),
            });
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (pa + pb));
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&tb.data()[i * pb..(i + 1) * pb]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], data)?;
        Ok(self.custom(
            "concat_channels",
            &[a, b],
            out,
            Box::new(move |c| {
                let mut ga = Vec::with_capacity(n * pa);
                let mut gb = Vec::with_capacity(n * pb);
                for i in 0..n {
                    let row = &c.grad[i * (pa + pb)..(i + 1) * (pa + pb)];
                    ga.extend_from_slice(&row[..pa]);
                    gb.extend_from_slice(&row[pa..]);
                }
                Ok(vec![Some(ga), Some(gb)])
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(dims)?;
        Ok(self.custom("reshape", &[x], out, Box::new(|c| Ok(vec![Some(c.grad.to_vec())]))))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let n = self.value(x).numel();
        self.custom(
            "sum",
            &[x],
            Tensor::scalar(s as f32),
            Box::new(move |c| Ok(vec![Some(vec![c.grad[0]; n])])),
        )
    }

    /// `sum_i w_i x_i`, accumulated in `f64`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != weights.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                msg: format!("{} values vs {} weights", t.numel(), weights.len()),
            });
        }
        let s: f64 = t.data().iter().zip(&weights).map(|(&a, &b)| a as f64 * b as f64).sum();
        Ok(self.custom(
            "weighted_sum",
            &[x],
            Tensor::scalar(s as f32),
            Box::new(move |c| Ok(vec![Some(weights.iter().map(|w| w * c.grad[0]).collect())])),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_shared_input() {
        // loss = sum(relu(x) + x) => dx = 1[x>0] + 1
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[3], vec![-1.0, 2.0, 0.5]).unwrap(), true);
        let r = t.relu(x);
        let s = t.add(r, x).unwrap();
        let l = t.sum(s);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2], 1.0));
        let w = t.leaf(Tensor::full(&[2], 3.0), true);
        let s = t.add(x, w).unwrap();
        let l = t.sum(s);
        t.backward(l).unwrap();
        assert!(t.grad(x).is_none());
        assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]), true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn concat_splits_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), true);
        let b = t.leaf(Tensor::full(&[1, 2, 2, 2], 2.0), true);
        let c = t.concat_channels(a, b).unwrap();
        assert_eq!(t.dims(c), &[1, 3, 2, 2]);
        let w: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let l = t.weighted_sum(c, w).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.grad(b).unwrap()[7], 11.0);
    }
}
