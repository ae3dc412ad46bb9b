//! Reverse-mode gradient tape.
//!
//! Each recorded node owns a backward closure that maps the gradients of its
//! outputs to gradients of its inputs. Values live on the tape for the
//! duration of one step; a tape is never shared between threads.

use crate::error::{Error, Result};
use crate::ops::{self, Reduction};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure gets to see.
pub struct BackwardCtx<'a> {
    grads: Vec<Tensor>,
    inputs: Vec<&'a Tensor>,
    outputs: Vec<&'a Tensor>,
}

impl BackwardCtx<'_> {
    /// Gradient flowing into output `k` (zeros if nothing consumed it).
    pub fn grad(&self, k: usize) -> &Tensor {
        &self.grads[k]
    }

    pub fn input(&self, k: usize) -> &Tensor {
        self.inputs[k]
    }

    pub fn output(&self, k: usize) -> &Tensor {
        self.outputs[k]
    }
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    inputs: Vec<Var>,
    outputs: Vec<Var>,
    backward: BackwardFn,
}

#[derive(Default)]
pub struct GradTape {
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn alloc(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.values.push(t);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.alloc(t, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.alloc(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Records a node. Nothing is kept for backward when no input is
    /// differentiable.
    pub fn push(&mut self, inputs: &[Var], outputs: Vec<Tensor>, backward: BackwardFn) -> Vec<Var> {
        let rg = inputs.iter().any(|v| self.requires_grad[v.0]);
        let outs: Vec<Var> = outputs.into_iter().map(|t| self.alloc(t, rg)).collect();
        if rg {
            self.nodes.push(Node { inputs: inputs.to_vec(), outputs: outs.clone(), backward });
        }
        outs
    }

    pub fn push1(&mut self, inputs: &[Var], output: Tensor, backward: BackwardFn) -> Var {
        self.push(inputs, vec![output], backward)[0]
    }

    /// Copies a value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.values[v.0].clone();
        self.constant(t)
    }

    /// Reverse sweep from a scalar `root` seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let seed = Tensor::ones(self.values[root.0].shape());
        if seed.numel() != 1 {
            return Err(Error::config(format!(
                "backward root must be a scalar, got shape {:?}",
                self.values[root.0].shape()
            )));
        }
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.values[root.0].shape() {
            return Err(crate::error::shape_mismatch("backward seed", seed.shape(), self.values[root.0].shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[root.0] = Some(seed);
        for node in self.nodes.iter().rev() {
            if node.outputs.iter().all(|o| grads[o.0].is_none()) {
                continue;
            }
            let ctx = BackwardCtx {
                grads: node
                    .outputs
                    .iter()
                    .map(|o| grads[o.0].clone().unwrap_or_else(|| Tensor::zeros(self.values[o.0].shape())))
                    .collect(),
                inputs: node.inputs.iter().map(|v| &self.values[v.0]).collect(),
                outputs: node.outputs.iter().map(|v| &self.values[v.0]).collect(),
            };
            let input_grads = (node.backward)(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.requires_grad[v.0] {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.values[v.0].shape());
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ---- recorded operations -------------------------------------------

    pub fn conv3d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = ops::conv3d(self.value(x), self.value(kernel), stride, padding)?;
        Ok(self.push1(
            &[x, kernel],
            y,
            Box::new(move |ctx| {
                let (gx, gw) = ops::conv3d_backward(ctx.input(0), ctx.input(1), ctx.grad(0), stride, padding)
                    .expect("shapes validated in forward");
                vec![Some(gx), Some(gw)]
            }),
        ))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let y = ops::add_channel_bias(self.value(x), self.value(bias))?;
        Ok(self.push1(
            &[x, bias],
            y,
            Box::new(|ctx| {
                vec![Some(ctx.grad(0).clone()), Some(ops::add_channel_bias_backward(ctx.input(0).shape(), ctx.grad(0)))]
            }),
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = ops::silu(self.value(x));
        self.push1(&[x], y, Box::new(|ctx| vec![Some(ops::silu_backward(ctx.input(0), ctx.grad(0)))]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push1(&[x], y, Box::new(|ctx| vec![Some(ops::relu_backward(ctx.input(0), ctx.grad(0)))]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push1(&[a, b], y, Box::new(|ctx| vec![Some(ctx.grad(0).clone()), Some(ctx.grad(0).clone())])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push1(
            &[a, b],
            y,
            Box::new(|ctx| {
                let g = ctx.grad(0);
                vec![ops::mul(g, ctx.input(1)).ok(), ops::mul(g, ctx.input(0)).ok()]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = ops::scale(self.value(a), s);
        self.push1(&[a], y, Box::new(move |ctx| vec![Some(ops::scale(ctx.grad(0), s))]))
    }

    pub fn powi(&mut self, a: Var, k: i32) -> Var {
        let y = ops::powi(self.value(a), k);
        self.push1(&[a], y, Box::new(move |ctx| vec![Some(ops::powi_backward(ctx.input(0), k, ctx.grad(0)))]))
    }

    pub fn reduce_spatial(&mut self, x: Var, kind: Reduction) -> Result<Var> {
        let y = ops::reduce_spatial(self.value(x), kind)?;
        Ok(self.push1(
            &[x],
            y,
            Box::new(move |ctx| vec![Some(ops::reduce_spatial_backward(ctx.input(0), kind, ctx.grad(0)))]),
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = ops::softmax(self.value(x));
        self.push1(&[x], y, Box::new(|ctx| vec![Some(ops::softmax_backward(ctx.output(0), ctx.grad(0)))]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push1(
            &[a, b],
            y,
            Box::new(|ctx| {
                let (ga, gb) = ops::matmul_backward(ctx.input(0), ctx.input(1), ctx.grad(0)).expect("validated");
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let y = ops::upsample2(self.value(x))?;
        Ok(self.push1(&[x], y, Box::new(|ctx| vec![Some(ops::upsample2_backward(ctx.grad(0)))])))
    }

    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let y = ops::downsample2(self.value(x))?;
        Ok(self.push1(&[x], y, Box::new(|ctx| vec![Some(ops::downsample2_backward(ctx.grad(0)))])))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ca = self.value(a).dim(1);
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push1(
            &[a, b],
            y,
            Box::new(move |ctx| {
                let (ga, gb) = ops::concat_channels_backward(ca, ctx.grad(0));
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let original = self.value(x).shape().to_vec();
        Ok(self.push1(
            &[x],
            y,
            Box::new(move |ctx| vec![Some(ctx.grad(0).reshape(&original).expect("same element count"))]),
        ))
    }

    /// `sum(x * weights)` for a constant weight tensor; the usual way to turn a
    /// tensor-valued op into a scalar for gradient checking.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(crate::error::shape_mismatch("weighted_sum", self.value(x).shape(), weights.shape()));
        }
        let y = Tensor::scalar(self.value(x).dot(weights));
        let w = weights.clone();
        Ok(self.push1(&[x], y, Box::new(move |ctx| vec![Some(ops::scale(&w, ctx.grad(0).item()))])))
    }

    pub fn add_scalars(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::config("add_scalars expects scalar terms"));
            }
            total += w * self.value(v).item();
        }
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push1(
            &vars,
            Tensor::scalar(total),
            Box::new(move |ctx| {
                let g = ctx.grad(0).item();
                weights.iter().enumerate().map(|(k, w)| Some(Tensor::full(ctx.input(k).shape(), g * w))).collect()
            }),
        ))
    }
}
