//! Define-by-run reverse-mode differentiation.
//!
//! A [`Ctx`] records every op applied to values that depend on parameters.
//! Values that do not depend on parameters (input images, targets) are
//! constants and never enter the tape. With recording disabled the tape stays
//! empty and intermediate values are freed as soon as their `Var` drops.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::params::{BufferId, Grads, ParamId, ParamStore};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// A value flowing through the graph.
#[derive(Clone, Debug)]
pub struct Var {
    node: Option<usize>,
    value: Arc<Tensor>,
}

impl Var {
    pub fn constant(value: Tensor) -> Self {
        Self {
            node: None,
            value: Arc::new(value),
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.value.dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }
}

/// Max-pool argmax locations, kept for index unpooling.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    pub indices: Arc<Vec<u32>>,
    /// `(n, c, h, w)` of the tensor that was pooled.
    pub source_dims: (usize, usize, usize, usize),
}

enum Op {
    Param(ParamId),
    Conv {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Arc<Tensor>,
        wv: Arc<Tensor>,
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: Option<usize>,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        gv: Arc<Tensor>,
    },
    BatchNormEval {
        x: Option<usize>,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<f32>,
        scale: Vec<f32>,
    },
    Relu {
        x: usize,
        y: Arc<Tensor>,
    },
    Sigmoid {
        x: usize,
        y: Arc<Tensor>,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
    },
    Mul {
        a: Option<usize>,
        b: Option<usize>,
        av: Arc<Tensor>,
        bv: Arc<Tensor>,
    },
    Scale {
        x: usize,
        s: f32,
    },
    Concat {
        parts: Vec<(Option<usize>, usize)>,
    },
    MaxPool {
        x: usize,
        idx: Arc<Vec<u32>>,
    },
    Unpool {
        x: usize,
        idx: Arc<Vec<u32>>,
    },
    Upsample {
        x: usize,
    },
    L2Normalize {
        x: usize,
        y: Arc<Tensor>,
        norms: Vec<f32>,
    },
    Injected {
        x: usize,
        grad: Tensor,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

struct BnUpdate {
    mean: BufferId,
    var: BufferId,
    batch_mean: Vec<f32>,
    batch_var: Vec<f32>,
}

pub const BN_MOMENTUM: f32 = 0.1;

/// Pending batch-norm running-statistic updates of one training pass.
pub struct BnUpdates(Vec<BnUpdate>);

impl BnUpdates {
    pub fn apply(self, store: &mut ParamStore) {
        for u in self.0 {
            for (r, b) in store
                .buffer_mut(u.mean)
                .data_mut()
                .iter_mut()
                .zip(&u.batch_mean)
            {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in store
                .buffer_mut(u.var)
                .data_mut()
                .iter_mut()
                .zip(&u.batch_var)
            {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// Forward-pass context: parameter access, training flag and the tape.
pub struct Ctx<'a> {
    store: &'a ParamStore,
    train: bool,
    record: bool,
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'a> Ctx<'a> {
    /// Training context: batch statistics in batch norm, tape recording on.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::new(store, true, true)
    }

    /// Inference context: running statistics, no tape.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, false, false)
    }

    pub fn new(store: &'a ParamStore, train: bool, record: bool) -> Self {
        Self {
            store,
            train,
            record,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        self.push_shared(op, Arc::new(value))
    }

    fn push_shared(&self, op: Op, value: Arc<Tensor>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
        });
        Var {
            node: Some(nodes.len() - 1),
            value,
        }
    }

    fn constant(value: Tensor) -> Var {
        Var::constant(value)
    }

    pub fn param(&self, id: ParamId) -> Var {
        if !self.record {
            return Var {
                node: None,
                value: self.store.param(id).shared_value(),
            };
        }
        if let Some(v) = self.param_vars.borrow().get(&id) {
            return v.clone();
        }
        let value = self.store.param(id).shared_value();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Param(id),
            shape: value.shape().to_vec(),
        });
        let v = Var {
            node: Some(nodes.len() - 1),
            value,
        };
        drop(nodes);
        self.param_vars.borrow_mut().insert(id, v.clone());
        v
    }

    pub fn conv2d(&self, x: &Var, weight: ParamId, bias: Option<ParamId>) -> Result<Var> {
        let (n, cin, h, w) = x.dims4();
        let wv = self.param(weight);
        let ws = wv.shape();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(invalid!(
                "conv weight {:?} does not fit input {:?}",
                ws,
                x.shape()
            ));
        }
        let geom = ConvGeom {
            batch: n,
            cin,
            cout: ws[0],
            height: h,
            width: w,
            kernel: ws[2],
        };
        let bv = bias.map(|b| self.param(b));
        let y = kernels::conv2d_forward(
            x.value.data(),
            wv.value.data(),
            bv.as_ref().map(|b| b.value.data()),
            &geom,
        );
        let out = Tensor::from_vec(&[n, geom.cout, h, w], y)?;
        let b_node = bv.as_ref().and_then(|b| b.node);
        if self.record && (x.node.is_some() || wv.node.is_some() || b_node.is_some()) {
            Ok(self.push(
                Op::Conv {
                    x: x.node,
                    w: wv.node,
                    b: b_node,
                    xv: Arc::clone(&x.value),
                    wv: Arc::clone(&wv.value),
                    geom,
                },
                out,
            ))
        } else {
            Ok(Self::constant(out))
        }
    }

    pub fn batch_norm(
        &self,
        x: &Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: BufferId,
        running_var: BufferId,
    ) -> Result<Var> {
        let (n, c, h, w) = x.dims4();
        let gv = self.param(gamma);
        let bv = self.param(beta);
        if gv.value.numel() != c {
            return Err(invalid!(
                "batch norm over {c} channels got {} scales",
                gv.value.numel()
            ));
        }
        let hw = h * w;
        let record = self.record && (x.node.is_some() || gv.node.is_some() || bv.node.is_some());
        if self.train {
            let f = kernels::batchnorm_train(
                x.value.data(),
                gv.value.data(),
                bv.value.data(),
                n,
                c,
                hw,
            );
            self.bn_updates.borrow_mut().push(BnUpdate {
                mean: running_mean,
                var: running_var,
                batch_mean: f.batch_mean,
                batch_var: f.batch_var_unbiased,
            });
            let out = Tensor::from_vec(x.shape(), f.y)?;
            if record {
                return Ok(self.push(
                    Op::BatchNormTrain {
                        x: x.node,
                        gamma: gv.node,
                        beta: bv.node,
                        xhat: f.xhat,
                        inv_std: f.inv_std,
                        gv: Arc::clone(&gv.value),
                    },
                    out,
                ));
            }
            Ok(Self::constant(out))
        } else {
            let rm = self.store.buffer(running_mean).data();
            let rv = self.store.buffer(running_var).data();
            let y = kernels::batchnorm_eval(
                x.value.data(),
                gv.value.data(),
                bv.value.data(),
                rm,
                rv,
                n,
                c,
                hw,
            );
            let out = Tensor::from_vec(x.shape(), y)?;
            if record {
                let mut xhat = vec![0.0f32; x.value.numel()];
                let scale: Vec<f32> = (0..c)
                    .map(|ch| 1.0 / (rv[ch] + kernels::BN_EPS).sqrt())
                    .collect();
                for (i, v) in x.value.data().iter().enumerate() {
                    let ch = (i / hw) % c;
                    xhat[i] = (v - rm[ch]) * scale[ch];
                }
                let scale = scale
                    .iter()
                    .zip(gv.value.data())
                    .map(|(s, g)| s * g)
                    .collect();
                return Ok(self.push(
                    Op::BatchNormEval {
                        x: x.node,
                        gamma: gv.node,
                        beta: bv.node,
                        xhat,
                        scale,
                    },
                    out,
                ));
            }
            Ok(Self::constant(out))
        }
    }

    pub fn relu(&self, x: &Var) -> Var {
        let y = x.value.map(|v| v.max(0.0));
        match x.node {
            Some(id) if self.record => {
                let y = Arc::new(y);
                self.push_shared(
                    Op::Relu {
                        x: id,
                        y: Arc::clone(&y),
                    },
                    y,
                )
            }
            _ => Self::constant(y),
        }
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        let y = x.value.map(|v| 1.0 / (1.0 + (-v).exp()));
        match x.node {
            Some(id) if self.record => {
                let y = Arc::new(y);
                self.push_shared(
                    Op::Sigmoid {
                        x: id,
                        y: Arc::clone(&y),
                    },
                    y,
                )
            }
            _ => Self::constant(y),
        }
    }

    fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(invalid!(
                "{what}: shape mismatch {:?} vs {:?}",
                a.shape(),
                b.shape()
            ));
        }
        Ok(())
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape(a, b, "add")?;
        let mut out = (*a.value).clone();
        out.add_assign(&b.value);
        if self.record && (a.node.is_some() || b.node.is_some()) {
            Ok(self.push(
                Op::Add {
                    a: a.node,
                    b: b.node,
                },
                out,
            ))
        } else {
            Ok(Self::constant(out))
        }
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape(a, b, "mul")?;
        let data = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(a.shape(), data)?;
        if self.record && (a.node.is_some() || b.node.is_some()) {
            Ok(self.push(
                Op::Mul {
                    a: a.node,
                    b: b.node,
                    av: Arc::clone(&a.value),
                    bv: Arc::clone(&b.value),
                },
                out,
            ))
        } else {
            Ok(Self::constant(out))
        }
    }

    pub fn scale(&self, x: &Var, s: f32) -> Var {
        let out = x.value.map(|v| v * s);
        match x.node {
            Some(id) if self.record => self.push(Op::Scale { x: id, s }, out),
            _ => Self::constant(out),
        }
    }

    /// Elementwise mean of equally shaped values: left-to-right sum, then one
    /// division by the count.
    pub fn mean(&self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| invalid!("mean of zero tensors"))?;
        let mut acc = first.clone();
        for x in &xs[1..] {
            acc = self.add(&acc, x)?;
        }
        let n = xs.len() as f32;
        let out = acc.value.map(|v| v / n);
        Ok(match acc.node {
            Some(id) if self.record => self.push(Op::Scale { x: id, s: 1.0 / n }, out),
            _ => Self::constant(out),
        })
    }

    /// Channel-axis concatenation of NCHW tensors.
    pub fn concat(&self, xs: &[&Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| invalid!("concat of zero tensors"))?;
        let (n, _, h, w) = first.dims4();
        for x in xs {
            let (xn, _, xh, xw) = x.dims4();
            if (xn, xh, xw) != (n, h, w) {
                return Err(invalid!("concat: {:?} vs {:?}", x.shape(), first.shape()));
            }
        }
        let total_c: usize = xs.iter().map(|x| x.dims4().1).sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for x in xs {
                let c = x.dims4().1;
                data.extend_from_slice(&x.value.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::from_vec(&[n, total_c, h, w], data)?;
        if self.record && xs.iter().any(|x| x.node.is_some()) {
            let parts = xs.iter().map(|x| (x.node, x.dims4().1)).collect();
            Ok(self.push(Op::Concat { parts }, out))
        } else {
            Ok(Self::constant(out))
        }
    }

    /// 2×2 max pooling that also returns argmax locations.
    pub fn max_pool2(&self, x: &Var) -> Result<(Var, PoolIndices)> {
        let (n, c, h, w) = x.dims4();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid!("max pool needs even spatial size, got {h}x{w}"));
        }
        let (y, idx) = kernels::maxpool2_forward(x.value.data(), n, c, h, w);
        let idx = Arc::new(idx);
        let out = Tensor::from_vec(&[n, c, h / 2, w / 2], y)?;
        let indices = PoolIndices {
            indices: Arc::clone(&idx),
            source_dims: (n, c, h, w),
        };
        let v = match x.node {
            Some(id) if self.record => self.push(Op::MaxPool { x: id, idx }, out),
            _ => Self::constant(out),
        };
        Ok((v, indices))
    }

    /// Places each value at the argmax location it was pooled from.
    pub fn max_unpool2(&self, x: &Var, indices: &PoolIndices) -> Result<Var> {
        let (n, c, h, w) = indices.source_dims;
        if x.dims4() != (n, c, h / 2, w / 2) {
            return Err(invalid!(
                "unpool input {:?} does not match pooled shape {:?}",
                x.shape(),
                [n, c, h / 2, w / 2]
            ));
        }
        let y = kernels::unpool_forward(x.value.data(), &indices.indices, n * c, h, w);
        let out = Tensor::from_vec(&[n, c, h, w], y)?;
        Ok(match x.node {
            Some(id) if self.record => self.push(
                Op::Unpool {
                    x: id,
                    idx: Arc::clone(&indices.indices),
                },
                out,
            ),
            _ => Self::constant(out),
        })
    }

    pub fn upsample2(&self, x: &Var) -> Result<Var> {
        let (n, c, h, w) = x.dims4();
        let y = kernels::upsample2_forward(x.value.data(), n * c, h, w);
        let out = Tensor::from_vec(&[n, c, 2 * h, 2 * w], y)?;
        Ok(match x.node {
            Some(id) if self.record => self.push(Op::Upsample { x: id }, out),
            _ => Self::constant(out),
        })
    }

    /// Per-pixel L2 normalization across channels. Zero vectors stay zero.
    pub fn l2_normalize(&self, x: &Var) -> Result<Var> {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let xd = x.value.data();
        let mut y = vec![0.0f32; xd.len()];
        let mut norms = vec![0.0f32; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let sq: f64 = (0..c)
                    .map(|ch| (xd[(b * c + ch) * hw + p] as f64).powi(2))
                    .sum();
                let norm = sq.sqrt();
                norms[b * hw + p] = norm as f32;
                if norm > 1e-12 {
                    for ch in 0..c {
                        let i = (b * c + ch) * hw + p;
                        y[i] = (xd[i] as f64 / norm) as f32;
                    }
                }
            }
        }
        let out = Arc::new(Tensor::from_vec(x.shape(), y)?);
        Ok(match x.node {
            Some(id) if self.record => self.push_shared(
                Op::L2Normalize {
                    x: id,
                    y: Arc::clone(&out),
                    norms,
                },
                out,
            ),
            _ => Var {
                node: None,
                value: out,
            },
        })
    }

    /// A scalar whose gradient with respect to `x` was computed outside the
    /// tape (the task losses).
    pub fn external_scalar(&self, x: &Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != x.shape() {
            return Err(invalid!(
                "external gradient {:?} vs input {:?}",
                grad.shape(),
                x.shape()
            ));
        }
        let out = Tensor::from_vec(&[1], vec![value as f32])?;
        Ok(match x.node {
            Some(id) if self.record => self.push(Op::Injected { x: id, grad }, out),
            _ => Self::constant(out),
        })
    }

    /// Writes the batch-norm running statistics gathered during a training
    /// forward pass back into `store`.
    pub fn apply_bn_updates(&self, store: &mut ParamStore) {
        self.take_bn_updates().apply(store);
    }

    /// Detaches the pending running-statistic updates so they can be applied
    /// after the context (and its borrow of the store) is gone.
    pub fn take_bn_updates(&self) -> BnUpdates {
        BnUpdates(self.bn_updates.borrow_mut().drain(..).collect())
    }

    /// Reverse pass from scalar outputs, each seeded with its weight.
    pub fn backward(&self, seeds: &[(&Var, f32)]) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for (v, w) in seeds {
            if v.value.numel() != 1 {
                return Err(invalid!(
                    "backward seed must be scalar, got {:?}",
                    v.shape()
                ));
            }
            if let Some(id) = v.node {
                accumulate(&mut grads, id, Tensor::full(&[1], *w));
            }
        }
        let mut out = Grads::new(self.store.len());
        for id in (0..nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            debug_assert_eq!(g.shape(), node.shape.as_slice());
            match &node.op {
                Op::Param(pid) => out.accumulate(*pid, g),
                Op::Conv {
                    x,
                    w,
                    b,
                    xv,
                    wv,
                    geom,
                } => {
                    let (gx, gw, gb) =
                        kernels::conv2d_backward(xv.data(), wv.data(), g.data(), geom, x.is_some());
                    if let (Some(x), Some(gx)) = (x, gx) {
                        accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), gx)?);
                    }
                    if let Some(w) = w {
                        accumulate(&mut grads, *w, Tensor::from_vec(wv.shape(), gw)?);
                    }
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, Tensor::from_vec(&[geom.cout], gb)?);
                    }
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    gv,
                } => {
                    let (n, c, h, w) = g.dims4();
                    let (dx, dg, db) = kernels::batchnorm_backward(
                        g.data(),
                        xhat,
                        inv_std,
                        gv.data(),
                        n,
                        c,
                        h * w,
                    );
                    if let Some(x) = x {
                        accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), dx)?);
                    }
                    if let Some(gamma) = gamma {
                        accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], dg)?);
                    }
                    if let Some(beta) = beta {
                        accumulate(&mut grads, *beta, Tensor::from_vec(&[c], db)?);
                    }
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    scale,
                } => {
                    let (n, c, h, w) = g.dims4();
                    let hw = h * w;
                    let gd = g.data();
                    let mut dg = vec![0.0f64; c];
                    let mut db = vec![0.0f64; c];
                    let mut dx = vec![0.0f32; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                let i = (b * c + ch) * hw + p;
                                dg[ch] += gd[i] as f64 * xhat[i] as f64;
                                db[ch] += gd[i] as f64;
                                dx[i] = gd[i] * scale[ch];
                            }
                        }
                    }
                    if let Some(x) = x {
                        accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), dx)?);
                    }
                    if let Some(gamma) = gamma {
                        let dg = dg.into_iter().map(|v| v as f32).collect();
                        accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], dg)?);
                    }
                    if let Some(beta) = beta {
                        let db = db.into_iter().map(|v| v as f32).collect();
                        accumulate(&mut grads, *beta, Tensor::from_vec(&[c], db)?);
                    }
                }
                Op::Relu { x, y } => {
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), d)?);
                }
                Op::Sigmoid { x, y } => {
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), d)?);
                }
                Op::Add { a, b } => {
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if let Some(a) = a {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul { a, b, av, bv } => {
                    if let Some(a) = a {
                        let d = g.data().iter().zip(bv.data()).map(|(g, v)| g * v).collect();
                        accumulate(&mut grads, *a, Tensor::from_vec(g.shape(), d)?);
                    }
                    if let Some(b) = b {
                        let d = g.data().iter().zip(av.data()).map(|(g, v)| g * v).collect();
                        accumulate(&mut grads, *b, Tensor::from_vec(g.shape(), d)?);
                    }
                }
                Op::Scale { x, s } => accumulate(&mut grads, *x, g.map(|v| v * s)),
                Op::Concat { parts } => {
                    let (n, _, h, w) = g.dims4();
                    let total_c: usize = parts.iter().map(|p| p.1).sum();
                    let hw = h * w;
                    let mut offset = 0;
                    for &(part, c) in parts {
                        if let Some(id) = part {
                            let mut d = Vec::with_capacity(n * c * hw);
                            for b in 0..n {
                                let start = (b * total_c + offset) * hw;
                                d.extend_from_slice(&g.data()[start..start + c * hw]);
                            }
                            accumulate(&mut grads, id, Tensor::from_vec(&[n, c, h, w], d)?);
                        }
                        offset += c;
                    }
                }
                Op::MaxPool { x, idx } => {
                    let (n, c, h, w) = g.dims4();
                    let d = kernels::maxpool2_backward(g.data(), idx, n * c, 2 * h, 2 * w);
                    accumulate(&mut grads, *x, Tensor::from_vec(&[n, c, 2 * h, 2 * w], d)?);
                }
                Op::Unpool { x, idx } => {
                    let (n, c, h, w) = g.dims4();
                    let d = kernels::unpool_backward(g.data(), idx, n * c, h, w);
                    accumulate(&mut grads, *x, Tensor::from_vec(&[n, c, h / 2, w / 2], d)?);
                }
                Op::Upsample { x } => {
                    let (n, c, h, w) = g.dims4();
                    let d = kernels::upsample2_backward(g.data(), n * c, h / 2, w / 2);
                    accumulate(&mut grads, *x, Tensor::from_vec(&[n, c, h / 2, w / 2], d)?);
                }
                Op::L2Normalize { x, y, norms } => {
                    let (n, c, h, w) = g.dims4();
                    let hw = h * w;
                    let (gd, yd) = (g.data(), y.data());
                    let mut d = vec![0.0f32; gd.len()];
                    for b in 0..n {
                        for p in 0..hw {
                            let norm = norms[b * hw + p];
                            if norm <= 1e-12 {
                                continue;
                            }
                            let dot: f32 = (0..c)
                                .map(|ch| gd[(b * c + ch) * hw + p] * yd[(b * c + ch) * hw + p])
                                .sum();
                            for ch in 0..c {
                                let i = (b * c + ch) * hw + p;
                                d[i] = (gd[i] - yd[i] * dot) / norm;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), d)?);
                }
                Op::Injected { x, grad } => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *x, grad.map(|v| v * s));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}
