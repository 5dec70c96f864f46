//! Reverse-mode differentiation over a topologically ordered node list.
//!
//! A tape is confined to one forward/backward pass on one thread. Nodes are
//! appended during the forward pass (so insertion order is a topological
//! order) and `backward` walks them in exact reverse order, accumulating
//! gradients additively. Scalar nodes carry a double-precision shadow value
//! used for loss reporting and finite-difference checks.

use super::conv;
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::linops::{CallCounter, FbpPlan, LinearOperator, SubsetPartition};
use std::sync::Arc;

pub type NodeId = usize;

enum Payload {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Prelu {
        x: NodeId,
        alpha: NodeId,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    ScaleByScalar {
        x: NodeId,
        s: NodeId,
    },
    MulConst {
        x: NodeId,
        c: f32,
    },
    LinOp {
        x: NodeId,
        op: Arc<LinearOperator>,
        subset: Option<(Arc<SubsetPartition>, usize)>,
        adjoint: bool,
    },
    Fbp {
        b: NodeId,
        op: Arc<LinearOperator>,
        plan: Arc<FbpPlan>,
    },
    Rotate {
        x: NodeId,
        quarter_turns: u8,
    },
    SqNorm {
        x: NodeId,
    },
    Dot {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
}

struct Node {
    payload: Payload,
    value: Tensor,
    scalar_f64: Option<f64>,
}

/// Forward graph plus operator-call accounting.
pub struct Tape {
    nodes: Vec<Node>,
    pub counter: CallCounter,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counter: CallCounter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Double-precision value of a scalar node (loss reporting).
    pub fn scalar_f64(&self, id: NodeId) -> f64 {
        let node = &self.nodes[id];
        node.scalar_f64.unwrap_or(node.value.item() as f64)
    }

    fn push(&mut self, payload: Payload, value: Tensor) -> NodeId {
        self.push_scalar(payload, value, None)
    }

    fn push_scalar(&mut self, payload: Payload, value: Tensor, scalar: Option<f64>) -> NodeId {
        self.nodes.push(Node {
            payload,
            value,
            scalar_f64: scalar,
        });
        self.nodes.len() - 1
    }

    /// Constant input node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Payload::Leaf { param: None }, value)
    }

    /// Parameter node; its gradient accumulates into the bound entry.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        self.push(
            Payload::Leaf { param: Some(id) },
            params.value(id).clone(),
        )
    }

    /// Same-padded stride-1 cross-correlation plus bias.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (ci, h, wd) = self.value(x).chw();
        let wdims = self.value(w).dims().to_vec();
        if wdims.len() != 4 || wdims[1] != ci {
            return Err(Error::Autodiff(format!(
                "conv kernel {wdims:?} does not accept {ci} input channels"
            )));
        }
        let (co, kh, kw) = (wdims[0], wdims[2], wdims[3]);
        if self.value(b).len() != co {
            return Err(Error::Autodiff("bias length mismatch".into()));
        }
        let out = conv::forward(
            self.value(x).data(),
            (ci, h, wd),
            self.value(w).data(),
            (co, kh, kw),
            self.value(b).data(),
        );
        Ok(self.push(
            Payload::Conv2d { x, w, b },
            Tensor::new(vec![co, h, wd], out),
        ))
    }

    /// PReLU with one trainable slope per channel.
    pub fn prelu(&mut self, x: NodeId, alpha: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw();
        if self.value(alpha).len() != c {
            return Err(Error::Autodiff("prelu slope count mismatch".into()));
        }
        let mut out = self.value(x).data().to_vec();
        let alphas = self.value(alpha).data().to_vec();
        for ch in 0..c {
            let a = alphas[ch];
            for v in out[ch * h * w..(ch + 1) * h * w].iter_mut() {
                if *v < 0.0 {
                    *v *= a;
                }
            }
        }
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(Payload::Prelu { x, alpha }, Tensor::new(dims, out)))
    }

    /// Channel-stacks tensors of identical spatial shape, argument order.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Autodiff("concat of no tensors".into()));
        }
        let (_, h, w) = self.value(xs[0]).chw();
        let mut total_c = 0;
        for &id in xs {
            let (c, hh, ww) = self.value(id).chw();
            if (hh, ww) != (h, w) {
                return Err(Error::Autodiff("concat spatial shape mismatch".into()));
            }
            total_c += c;
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for &id in xs {
            data.extend_from_slice(self.value(id).data());
        }
        Ok(self.push(
            Payload::Concat { xs: xs.to_vec() },
            Tensor::new(vec![total_c, h, w], data),
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::Autodiff("add shape mismatch".into()));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let dims = self.value(a).dims().to_vec();
        let scalar = match (self.nodes[a].scalar_f64, self.nodes[b].scalar_f64) {
            (Some(x), Some(y)) => Some(x + y),
            _ => None,
        };
        Ok(self.push_scalar(Payload::Add { a, b }, Tensor::new(dims, data), scalar))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::Autodiff("sub shape mismatch".into()));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let dims = self.value(a).dims().to_vec();
        Ok(self.push(Payload::Sub { a, b }, Tensor::new(dims, data)))
    }

    /// Multiplies a tensor by a scalar node (e.g. a trainable step size).
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::Autodiff("scale factor must be a scalar".into()));
        }
        let sv = self.value(s).item();
        let data: Vec<f32> = self.value(x).data().iter().map(|&v| sv * v).collect();
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(Payload::ScaleByScalar { x, s }, Tensor::new(dims, data)))
    }

    pub fn mul_const(&mut self, x: NodeId, c: f32) -> NodeId {
        let data: Vec<f32> = self.value(x).data().iter().map(|&v| c * v).collect();
        let dims = self.value(x).dims().to_vec();
        let scalar = self.nodes[x].scalar_f64.map(|v| v * c as f64);
        self.push_scalar(Payload::MulConst { x, c }, Tensor::new(dims, data), scalar)
    }

    /// Differentiable operator application: forward value per the operator,
    /// backward propagation through the exact transpose.
    pub fn linop(
        &mut self,
        x: NodeId,
        op: &Arc<LinearOperator>,
        subset: Option<(&Arc<SubsetPartition>, usize)>,
        adjoint: bool,
    ) -> Result<NodeId> {
        let value = match (subset, adjoint) {
            (None, false) => op.apply(self.value(x).data())?,
            (None, true) => op.adjoint(self.value(x).data())?,
            (Some((part, i)), false) => op.apply_subset(self.value(x).data(), part, i)?,
            (Some((part, i)), true) => op.adjoint_subset(self.value(x).data(), part, i)?,
        };
        match (subset, adjoint) {
            (None, false) => self.counter.count_forward(op.rows()),
            (None, true) => self.counter.count_adjoint(op.rows()),
            (Some((part, _)), false) => self.counter.count_forward(part.q()),
            (Some((part, _)), true) => self.counter.count_adjoint(part.q()),
        }
        Ok(self.push(
            Payload::LinOp {
                x,
                op: Arc::clone(op),
                subset: subset.map(|(p, i)| (Arc::clone(p), i)),
                adjoint,
            },
            Tensor::from_flat(value),
        ))
    }

    /// Differentiable filtered backprojection. The ramp filter is
    /// self-adjoint per angle, so the backward pass is
    /// `scale * filter(A g)`.
    pub fn fbp(
        &mut self,
        b: NodeId,
        op: &Arc<LinearOperator>,
        plan: &Arc<FbpPlan>,
    ) -> Result<NodeId> {
        let recon = plan.reconstruct(op, self.value(b).data())?;
        self.counter.count_adjoint(op.rows());
        Ok(self.push(
            Payload::Fbp {
                b,
                op: Arc::clone(op),
                plan: Arc::clone(plan),
            },
            Tensor::from_flat(recon),
        ))
    }

    /// Exact multiple-of-90-degree counterclockwise rotation of each channel.
    pub fn rotate90(&mut self, x: NodeId, quarter_turns: u8) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw();
        if h != w {
            return Err(Error::Autodiff("rotation requires a square image".into()));
        }
        let out = rotate_chw(self.value(x).data(), c, h, quarter_turns % 4);
        let dims = self.value(x).dims().to_vec();
        Ok(self.push(
            Payload::Rotate {
                x,
                quarter_turns: quarter_turns % 4,
            },
            Tensor::new(dims, out),
        ))
    }

    /// Squared Euclidean norm reduced in double precision.
    pub fn sq_norm(&mut self, x: NodeId) -> NodeId {
        let acc: f64 = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum();
        self.push_scalar(Payload::SqNorm { x }, Tensor::scalar(acc as f32), Some(acc))
    }

    /// Inner product reduced in double precision.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Autodiff("dot length mismatch".into()));
        }
        let acc: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        Ok(self.push_scalar(Payload::Dot { a, b }, Tensor::scalar(acc as f32), Some(acc)))
    }

    /// Shape cast sharing the same data (gradient passes through).
    pub fn reshape(&mut self, x: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        if dims.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Autodiff("reshape length mismatch".into()));
        }
        let value = self.value(x).reshaped(dims);
        Ok(self.push(Payload::Reshape { x }, value))
    }

    /// Reverse-mode sweep from a scalar loss node. Returns per-node
    /// gradients; use [`Gradients`] plus [`Tape::accumulate_param_grads`] to
    /// fold them into a parameter set. Operator work done by the backward
    /// pass is added to the call counter.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        let mut backward_counter = CallCounter::default();
        for id in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            match &self.nodes[id].payload {
                Payload::Leaf { .. } => {
                    grads[id] = Some(gy);
                    continue;
                }
                Payload::Conv2d { x, w, b } => {
                    let (ci, h, wd) = self.value(*x).chw();
                    let wdims = self.value(*w).dims();
                    let shape_k = (wdims[0], wdims[2], wdims[3]);
                    let dx = conv::backward_input(gy.data(), (ci, h, wd), self.value(*w).data(), shape_k);
                    let (dw, db) =
                        conv::backward_weight(self.value(*x).data(), gy.data(), (ci, h, wd), shape_k);
                    accumulate(&mut grads, *x, &Tensor::new(self.value(*x).dims().to_vec(), dx));
                    accumulate(&mut grads, *w, &Tensor::new(wdims.to_vec(), dw));
                    accumulate(&mut grads, *b, &Tensor::new(vec![shape_k.0], db));
                }
                Payload::Prelu { x, alpha } => {
                    let (c, h, w) = self.value(*x).chw();
                    let xs = self.value(*x).data();
                    let alphas = self.value(*alpha).data();
                    let mut dx = vec![0.0f32; xs.len()];
                    let mut da = vec![0.0f32; c];
                    for ch in 0..c {
                        let a = alphas[ch];
                        let mut acc = 0.0f64;
                        for idx in ch * h * w..(ch + 1) * h * w {
                            if xs[idx] >= 0.0 {
                                dx[idx] = gy.data()[idx];
                            } else {
                                dx[idx] = a * gy.data()[idx];
                                acc += gy.data()[idx] as f64 * xs[idx] as f64;
                            }
                        }
                        da[ch] = acc as f32;
                    }
                    accumulate(&mut grads, *x, &Tensor::new(self.value(*x).dims().to_vec(), dx));
                    accumulate(&mut grads, *alpha, &Tensor::new(vec![c], da));
                }
                Payload::Concat { xs } => {
                    let (_, h, w) = self.value(id).chw();
                    let mut offset = 0;
                    for &src in xs {
                        let (c, _, _) = self.value(src).chw();
                        let span = c * h * w;
                        let gpiece = Tensor::new(
                            self.value(src).dims().to_vec(),
                            gy.data()[offset..offset + span].to_vec(),
                        );
                        accumulate(&mut grads, src, &gpiece);
                        offset += span;
                    }
                }
                Payload::Add { a, b } => {
                    accumulate_shaped(&mut grads, *a, gy.data(), self.value(*a).dims());
                    accumulate_shaped(&mut grads, *b, gy.data(), self.value(*b).dims());
                }
                Payload::Sub { a, b } => {
                    accumulate_shaped(&mut grads, *a, gy.data(), self.value(*a).dims());
                    let neg: Vec<f32> = gy.data().iter().map(|&v| -v).collect();
                    accumulate_shaped(&mut grads, *b, &neg, self.value(*b).dims());
                }
                Payload::ScaleByScalar { x, s } => {
                    let sv = self.value(*s).item();
                    let dx: Vec<f32> = gy.data().iter().map(|&v| sv * v).collect();
                    accumulate_shaped(&mut grads, *x, &dx, self.value(*x).dims());
                    let ds: f64 = gy
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &xv)| g as f64 * xv as f64)
                        .sum();
                    accumulate(&mut grads, *s, &Tensor::scalar(ds as f32));
                }
                Payload::MulConst { x, c } => {
                    let dx: Vec<f32> = gy.data().iter().map(|&v| c * v).collect();
                    accumulate_shaped(&mut grads, *x, &dx, self.value(*x).dims());
                }
                Payload::LinOp {
                    x,
                    op,
                    subset,
                    adjoint,
                } => {
                    let g = match (subset, adjoint) {
                        (None, false) => {
                            backward_counter.count_adjoint(op.rows());
                            op.adjoint(gy.data())?
                        }
                        (None, true) => {
                            backward_counter.count_forward(op.rows());
                            op.apply(gy.data())?
                        }
                        (Some((part, i)), false) => {
                            backward_counter.count_adjoint(part.q());
                            op.adjoint_subset(gy.data(), part, *i)?
                        }
                        (Some((part, i)), true) => {
                            backward_counter.count_forward(part.q());
                            op.apply_subset(gy.data(), part, *i)?
                        }
                    };
                    accumulate_shaped(&mut grads, *x, &g, self.value(*x).dims());
                }
                Payload::Fbp { b, op, plan } => {
                    backward_counter.count_forward(op.rows());
                    let forwarded = op.apply(gy.data())?;
                    let filtered = plan.filter_sinogram(&forwarded)?;
                    let scale = plan.scale();
                    let gb: Vec<f32> = filtered.iter().map(|&v| (v as f64 * scale) as f32).collect();
                    accumulate_shaped(&mut grads, *b, &gb, self.value(*b).dims());
                }
                Payload::Rotate { x, quarter_turns } => {
                    let (c, h, _) = self.value(*x).chw();
                    let inv = (4 - quarter_turns) % 4;
                    let dx = rotate_chw(gy.data(), c, h, inv);
                    accumulate_shaped(&mut grads, *x, &dx, self.value(*x).dims());
                }
                Payload::SqNorm { x } => {
                    let gscalar = gy.item();
                    let dx: Vec<f32> = self
                        .value(*x)
                        .data()
                        .iter()
                        .map(|&v| 2.0 * gscalar * v)
                        .collect();
                    accumulate_shaped(&mut grads, *x, &dx, self.value(*x).dims());
                }
                Payload::Dot { a, b } => {
                    let gscalar = gy.item();
                    let da: Vec<f32> = self
                        .value(*b)
                        .data()
                        .iter()
                        .map(|&v| gscalar * v)
                        .collect();
                    let db: Vec<f32> = self
                        .value(*a)
                        .data()
                        .iter()
                        .map(|&v| gscalar * v)
                        .collect();
                    accumulate_shaped(&mut grads, *a, &da, self.value(*a).dims());
                    accumulate_shaped(&mut grads, *b, &db, self.value(*b).dims());
                }
                Payload::Reshape { x } => {
                    accumulate_shaped(&mut grads, *x, gy.data(), self.value(*x).dims());
                }
            }
            grads[id] = Some(gy);
        }
        self.counter.forward_rows += backward_counter.forward_rows;
        self.counter.adjoint_rows += backward_counter.adjoint_rows;
        Ok(Gradients { grads })
    }

    /// Adds every parameter-leaf gradient into the parameter set. Calling
    /// this twice without zeroing doubles the stored gradients.
    pub fn accumulate_param_grads(&self, grads: &Gradients, params: &mut ParamSet) {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Payload::Leaf { param: Some(pid) } = node.payload {
                if let Some(g) = grads.of(id) {
                    params.accumulate_grad(pid, g);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: &Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (dst, src) in existing.data_mut().iter_mut().zip(g.data()) {
                *dst += src;
            }
        }
        slot @ None => *slot = Some(g.clone()),
    }
}

fn accumulate_shaped(grads: &mut [Option<Tensor>], id: NodeId, data: &[f32], dims: &[usize]) {
    match &mut grads[id] {
        Some(existing) => {
            for (dst, src) in existing.data_mut().iter_mut().zip(data) {
                *dst += src;
            }
        }
        slot @ None => *slot = Some(Tensor::new(dims.to_vec(), data.to_vec())),
    }
}

/// Counterclockwise rotation by `k` quarter turns of each `n x n` channel:
/// one turn maps `out[i][j] = in[j][n-1-i]`.
pub fn rotate_chw(data: &[f32], c: usize, n: usize, k: u8) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    for ch in 0..c {
        let src = &data[ch * n * n..(ch + 1) * n * n];
        let dst = &mut out[ch * n * n..(ch + 1) * n * n];
        match k {
            0 => dst.copy_from_slice(src),
            1 => {
                for i in 0..n {
                    for j in 0..n {
                        dst[i * n + j] = src[j * n + (n - 1 - i)];
                    }
                }
            }
            2 => {
                for i in 0..n {
                    for j in 0..n {
                        dst[i * n + j] = src[(n - 1 - i) * n + (n - 1 - j)];
                    }
                }
            }
            3 => {
                for i in 0..n {
                    for j in 0..n {
                        dst[i * n + j] = src[(n - 1 - j) * n + i];
                    }
                }
            }
            _ => unreachable!("quarter turns reduced mod 4"),
        }
    }
    out
}
