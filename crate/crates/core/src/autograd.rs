//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive executed on values that depend on a
//! gradient-requiring leaf. [`Graph::backward`] replays the record in reverse
//! and returns the gradients of all leaves. An inference graph records
//! nothing, so intermediates are freed as soon as the caller drops them.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// A value produced inside a [`Graph`].
///
/// `node` is set only when the value depends on a gradient-requiring leaf of
/// a recording graph.
#[derive(Clone)]
pub struct Var<F: Real = f32> {
    value: Arc<Tensor<F>>,
    node: Option<usize>,
}

impl<F: Real> Var<F> {
    pub fn constant(t: Tensor<F>) -> Self {
        Var {
            value: Arc::new(t),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }

    pub fn into_value(self) -> Tensor<F> {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }
}

impl<F: Real> std::fmt::Debug for Var<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(node={:?}, {:?})", self.node, self.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Gelu,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Gelu => kernels::gelu(x),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => kernels::sigmoid(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Gelu => kernels::gelu_grad(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = kernels::sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

/// Discriminant of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Linear,
    MatMul,
    Conv2d,
    Add,
    Mul,
    Scale,
    AddBroadcast,
    ScaleChannels,
    LayerNorm,
    Softmax,
    Activation,
    AvgPool,
    Gather,
    Concat,
    Reshape,
    Sum,
    L1Loss,
}

/// A fixed index gather `out[k] = in[map[k]]`.
///
/// All re-layout operations (partitions, shifts, padding, shuffles, slices)
/// are expressed as gathers; the backward pass is the matching scatter-add.
#[derive(Clone, Debug)]
pub struct Gather {
    pub(crate) map: Arc<Vec<usize>>,
    pub(crate) in_shape: Vec<usize>,
    pub(crate) out_shape: Vec<usize>,
}

impl Gather {
    pub fn new(in_shape: &[usize], out_shape: &[usize], map: Vec<usize>) -> Result<Self> {
        let in_len: usize = in_shape.iter().product();
        let out_len: usize = out_shape.iter().product();
        if map.len() != out_len {
            return Err(Error::shape(format!(
                "gather map has {} entries for output {out_shape:?}",
                map.len()
            )));
        }
        if let Some(bad) = map.iter().find(|&&i| i >= in_len) {
            return Err(Error::shape(format!(
                "gather index {bad} out of range for input {in_shape:?}"
            )));
        }
        Ok(Gather {
            map: Arc::new(map),
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
        })
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.map
    }

    pub fn apply<F: Real>(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(x.shape())?;
        let src = x.data();
        let data = self.map.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_parts(self.out_shape.clone(), data))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != self.in_shape.as_slice() {
            return Err(Error::shape(format!(
                "gather built for {:?} applied to {shape:?}",
                self.in_shape
            )));
        }
        Ok(())
    }

    fn scatter_add<F: Real>(&self, dy: &Tensor<F>) -> Tensor<F> {
        let len = self.in_shape.iter().product();
        let mut acc = vec![0f64; len];
        for (&i, g) in self.map.iter().zip(dy.data()) {
            acc[i] += g.widen();
        }
        Tensor::from_parts(self.in_shape.clone(), acc.into_iter().map(F::narrow).collect())
    }
}

enum Op<F: Real> {
    Leaf,
    Linear {
        x: Var<F>,
        w: Var<F>,
        b: Option<usize>,
    },
    MatMul {
        a: Var<F>,
        b: Var<F>,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
        b_transposed: bool,
    },
    Conv2d {
        x: Var<F>,
        w: Var<F>,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
    },
    Mul {
        a: Var<F>,
        b: Var<F>,
    },
    Scale {
        x: Option<usize>,
        factor: f64,
    },
    AddBroadcast {
        x: Option<usize>,
        b: Option<usize>,
        dims: [usize; 4],
        b_shape: Vec<usize>,
    },
    ScaleChannels {
        x: Var<F>,
        gate: Var<F>,
    },
    LayerNorm {
        x: Option<usize>,
        gain: Var<F>,
        bias: Option<usize>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Option<usize>,
        y: Arc<Tensor<F>>,
    },
    Activation {
        x: Var<F>,
        kind: Activation,
    },
    AvgPool {
        x: Option<usize>,
        shape: [usize; 4],
    },
    Gather {
        x: Option<usize>,
        gather: Gather,
    },
    Concat {
        parts: Vec<(Option<usize>, Vec<usize>)>,
        axis: usize,
    },
    Reshape {
        x: Option<usize>,
        in_shape: Vec<usize>,
    },
    Sum {
        x: Option<usize>,
        shape: Vec<usize>,
    },
    L1Loss {
        x: Var<F>,
        target: Arc<Tensor<F>>,
    },
}

impl<F: Real> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Linear { .. } => OpKind::Linear,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddBroadcast { .. } => OpKind::AddBroadcast,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Activation { .. } => OpKind::Activation,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::Gather { .. } => OpKind::Gather,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Sum { .. } => OpKind::Sum,
            Op::L1Loss { .. } => OpKind::L1Loss,
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`], indexed by tape node.
pub struct Grads<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: &Var<F>) -> Option<&Tensor<F>> {
        v.node.and_then(|i| self.grads.get(i)?.as_ref())
    }

    pub fn take(&mut self, v: &Var<F>) -> Option<Tensor<F>> {
        v.node.and_then(|i| self.grads.get_mut(i)?.take())
    }
}

/// The operation tape. Single-threaded; create one per worker.
pub struct Graph<F: Real = f32> {
    nodes: RefCell<Vec<Op<F>>>,
    recording: bool,
    fault: Cell<Option<OpKind>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], node: Option<usize>, g: Tensor<F>) {
    let Some(i) = node else { return };
    match &mut grads[i] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<F: Real> Graph<F> {
    /// A recording graph for training and gradient checks.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            fault: Cell::new(None),
        }
    }

    /// A graph that never records; leaves do not require gradients.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Test hook: negate the gradient that ops of `kind` send to their first
    /// input. Used to confirm gradient checks detect a broken backward.
    #[doc(hidden)]
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    /// A gradient-requiring leaf (a plain constant on an inference graph).
    pub fn leaf(&self, value: impl Into<Arc<Tensor<F>>>) -> Var<F> {
        let value = value.into();
        if !self.recording {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Op::Leaf);
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    fn push(&self, value: Tensor<F>, parents: &[Option<usize>], op: impl FnOnce() -> Op<F>) -> Var<F> {
        let value = Arc::new(value);
        if !self.recording || parents.iter().all(Option::is_none) {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(op());
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    /// `x[..., Cin] · wᵀ + b` with `w: [Cout, Cin]`, `b: [Cout]`.
    pub fn linear(&self, x: &Var<F>, w: &Var<F>, b: Option<&Var<F>>) -> Result<Var<F>> {
        let (cout, cin) = match *w.shape() {
            [o, i] => (o, i),
            ref s => return Err(Error::shape(format!("linear weight must be rank 2, got {s:?}"))),
        };
        if x.value.last_dim() != cin {
            return Err(Error::shape(format!(
                "linear: input {:?} does not end in {cin} features",
                x.shape()
            )));
        }
        if let Some(b) = b {
            if b.shape() != [cout] {
                return Err(Error::shape(format!("linear bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let rows = x.value.len() / cin;
        let mut data = kernels::gemm(x.value.data(), w.value.data(), rows, cin, cout, true);
        if let Some(b) = b {
            for row in data.chunks_exact_mut(cout) {
                for (v, bv) in row.iter_mut().zip(b.value.data()) {
                    *v = F::narrow(v.widen() + bv.widen());
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let bnode = b.and_then(|b| b.node);
        Ok(self.push(Tensor::from_parts(shape, data), &[x.node, w.node, bnode], || Op::Linear {
            x: x.clone(),
            w: w.clone(),
            b: bnode,
        }))
    }

    /// Matrix product of rank-2 `[m,k]·[k,p]` or batched rank-3
    /// `[n,m,k]·[n,k,p]`. With `b_transposed`, `b` is `[.., p, k]`.
    pub fn matmul_ext(&self, a: &Var<F>, b: &Var<F>, b_transposed: bool) -> Result<Var<F>> {
        let err = || {
            Error::shape(format!(
                "matmul: incompatible shapes {:?} and {:?}{}",
                a.shape(),
                b.shape(),
                if b_transposed { " (b transposed)" } else { "" }
            ))
        };
        let (batch, m, k, bk, p) = match (a.shape(), b.shape()) {
            (&[m, k], &[r, c]) => {
                let (bk, p) = if b_transposed { (c, r) } else { (r, c) };
                (1, m, k, bk, p)
            }
            (&[n, m, k], &[nb, r, c]) if n == nb => {
                let (bk, p) = if b_transposed { (c, r) } else { (r, c) };
                (n, m, k, bk, p)
            }
            _ => return Err(err()),
        };
        if k != bk {
            return Err(err());
        }
        let (ad, bd) = (a.value.data(), b.value.data());
        let mut data = Vec::with_capacity(batch * m * p);
        for n in 0..batch {
            data.extend(kernels::gemm(
                &ad[n * m * k..(n + 1) * m * k],
                &bd[n * k * p..(n + 1) * k * p],
                m,
                k,
                p,
                b_transposed,
            ));
        }
        let shape = if a.value.rank() == 2 { vec![m, p] } else { vec![batch, m, p] };
        Ok(self.push(Tensor::from_parts(shape, data), &[a.node, b.node], || Op::MatMul {
            a: a.clone(),
            b: b.clone(),
            batch,
            m,
            k,
            p,
            b_transposed,
        }))
    }

    pub fn matmul(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        self.matmul_ext(a, b, false)
    }

    /// Stride-1 cross-correlation with symmetric zero padding.
    pub fn conv2d(&self, x: &Var<F>, w: &Var<F>, b: Option<&Var<F>>, pad: usize) -> Result<Var<F>> {
        let [batch, cin, h, wd] = x.value.dims4()?;
        let [cout, wcin, kh, kw] = w.value.dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, kernel {:?} expects {wcin}",
                w.shape()
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"
            )));
        }
        if let Some(b) = b {
            if b.shape() != [cout] {
                return Err(Error::shape(format!("conv2d bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            h,
            w: wd,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: wd + 2 * pad - kw + 1,
        };
        let data = kernels::conv2d_forward(
            x.value.data(),
            w.value.data(),
            b.map(|b| b.value.data()),
            geom,
        );
        let bnode = b.and_then(|b| b.node);
        Ok(self.push(
            Tensor::from_parts(vec![batch, cout, geom.oh, geom.ow], data),
            &[x.node, w.node, bnode],
            || Op::Conv2d {
                x: x.clone(),
                w: w.clone(),
                b: bnode,
                geom,
            },
        ))
    }

    pub fn add(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        same_shape("add", a.shape(), b.shape())?;
        let data = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            &[a.node, b.node],
            || Op::Add { a: a.node, b: b.node },
        ))
    }

    pub fn mul(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        same_shape("mul", a.shape(), b.shape())?;
        let data = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            &[a.node, b.node],
            || Op::Mul {
                a: a.clone(),
                b: b.clone(),
            },
        ))
    }

    pub fn scale(&self, x: &Var<F>, factor: f64) -> Var<F> {
        let data = x
            .value
            .data()
            .iter()
            .map(|&v| F::narrow(v.widen() * factor))
            .collect();
        self.push(Tensor::from_parts(x.shape().to_vec(), data), &[x.node], || Op::Scale {
            x: x.node,
            factor,
        })
    }

    /// `y[a,m,r,i] = x[a,m,r,i] + b[m,i]` where `dims = [a, m, r, i]` views
    /// the flat buffers of `x` and `b`.
    pub fn add_broadcast(&self, x: &Var<F>, b: &Var<F>, dims: [usize; 4]) -> Result<Var<F>> {
        let [na, nm, nr, ni] = dims;
        if x.value.len() != na * nm * nr * ni || b.value.len() != nm * ni {
            return Err(Error::shape(format!(
                "add_broadcast: view {dims:?} does not fit {:?} + {:?}",
                x.shape(),
                b.shape()
            )));
        }
        let (xd, bd) = (x.value.data(), b.value.data());
        let mut data = Vec::with_capacity(xd.len());
        for a in 0..na {
            for m in 0..nm {
                let brow = &bd[m * ni..(m + 1) * ni];
                for r in 0..nr {
                    let base = ((a * nm + m) * nr + r) * ni;
                    data.extend(xd[base..base + ni].iter().zip(brow).map(|(&u, &v)| u + v));
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            &[x.node, b.node],
            || Op::AddBroadcast {
                x: x.node,
                b: b.node,
                dims,
                b_shape: b.shape().to_vec(),
            },
        ))
    }

    /// Multiplies each `(b, c)` plane of `x: [B,C,H,W]` by `gate[b,c]`.
    pub fn scale_channels(&self, x: &Var<F>, gate: &Var<F>) -> Result<Var<F>> {
        let [b, c, h, w] = x.value.dims4()?;
        if gate.shape() != [b, c, 1, 1] {
            return Err(Error::shape(format!(
                "scale_channels: gate {:?} for input {:?}",
                gate.shape(),
                x.shape()
            )));
        }
        let plane = h * w;
        let data = x
            .value
            .data()
            .chunks_exact(plane)
            .zip(gate.value.data())
            .flat_map(|(p, &g)| p.iter().map(move |&v| v * g))
            .collect();
        Ok(self.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            &[x.node, gate.node],
            || Op::ScaleChannels {
                x: x.clone(),
                gate: gate.clone(),
            },
        ))
    }

    /// Normalizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&self, x: &Var<F>, gain: &Var<F>, bias: &Var<F>, eps: f64) -> Result<Var<F>> {
        let c = x.value.last_dim();
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::shape(format!(
                "layer_norm: {c} channels but gain {:?} / bias {:?}",
                gain.shape(),
                bias.shape()
            )));
        }
        let rows = x.value.len() / c;
        let (g, bs) = (gain.value.data(), bias.value.data());
        let mut xhat = Vec::with_capacity(x.value.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(x.value.len());
        for row in x.value.data().chunks_exact(c) {
            let mean = row.iter().map(|v| v.widen()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.widen() - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let n = (v.widen() - mean) * r;
                xhat.push(n);
                data.push(F::narrow(n * g[j].widen() + bs[j].widen()));
            }
        }
        Ok(self.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            &[x.node, gain.node, bias.node],
            || Op::LayerNorm {
                x: x.node,
                gain: gain.clone(),
                bias: bias.node,
                xhat,
                rstd,
            },
        ))
    }

    pub fn softmax(&self, x: &Var<F>) -> Var<F> {
        let n = x.value.last_dim();
        let mut data = Vec::with_capacity(x.value.len());
        let mut buf = vec![0f64; n];
        for row in x.value.data().chunks_exact(n) {
            let max = row.iter().map(|v| v.widen()).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (b, v) in buf.iter_mut().zip(row) {
                *b = (v.widen() - max).exp();
                total += *b;
            }
            data.extend(buf.iter().map(|&b| F::narrow(b / total)));
        }
        let y = Arc::new(Tensor::from_parts(x.shape().to_vec(), data));
        if !self.recording || x.node.is_none() {
            return Var { value: y, node: None };
        }
        let saved = y.clone();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Op::Softmax { x: x.node, y: saved });
        Var {
            value: y,
            node: Some(nodes.len() - 1),
        }
    }

    pub fn activation(&self, x: &Var<F>, kind: Activation) -> Var<F> {
        let data = x
            .value
            .data()
            .iter()
            .map(|&v| F::narrow(kind.apply(v.widen())))
            .collect();
        self.push(Tensor::from_parts(x.shape().to_vec(), data), &[x.node], || Op::Activation {
            x: x.clone(),
            kind,
        })
    }

    /// Per-channel spatial mean, `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_avg_pool(&self, x: &Var<F>) -> Result<Var<F>> {
        let shape = x.value.dims4()?;
        let [b, c, h, w] = shape;
        let plane = h * w;
        let data = x
            .value
            .data()
            .chunks_exact(plane)
            .map(|p| F::narrow(p.iter().map(|v| v.widen()).sum::<f64>() / plane as f64))
            .collect();
        Ok(self.push(Tensor::from_parts(vec![b, c, 1, 1], data), &[x.node], || Op::AvgPool {
            x: x.node,
            shape,
        }))
    }

    pub fn gather(&self, x: &Var<F>, gather: &Gather) -> Result<Var<F>> {
        let value = gather.apply(&x.value)?;
        Ok(self.push(value, &[x.node], || Op::Gather {
            x: x.node,
            gather: gather.clone(),
        }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&self, xs: &[&Var<F>], axis: usize) -> Result<Var<F>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat of an empty list"))?
            .shape();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} for rank {}", first.len())));
        }
        for x in xs {
            let s = x.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {first:?} vs {s:?}"
                )));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        let nodes: Vec<Option<usize>> = xs.iter().map(|x| x.node).collect();
        Ok(self.push(Tensor::from_parts(shape, data), &nodes, || Op::Concat {
            parts: xs.iter().map(|x| (x.node, x.shape().to_vec())).collect(),
            axis,
        }))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, x: &Var<F>, axis: usize, start: usize, len: usize) -> Result<Var<F>> {
        let shape = x.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow axis {axis} [{start}, {}) of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            map.extend(base..base + len * inner);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let g = Gather::new(shape, &out_shape, map)?;
        self.gather(x, &g)
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, x: &Var<F>, axis: usize, sizes: &[usize]) -> Result<Vec<Var<F>>> {
        let dim = *x
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape(format!("split axis {axis} of {:?}", x.shape())))?;
        if sizes.iter().sum::<usize>() != dim {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} do not sum to {dim}"
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let part = self.narrow(x, axis, start, len);
                start += len;
                part
            })
            .collect()
    }

    pub fn reshape(&self, x: &Var<F>, shape: &[usize]) -> Result<Var<F>> {
        let value = (*x.value).clone().reshape(shape)?;
        Ok(self.push(value, &[x.node], || Op::Reshape {
            x: x.node,
            in_shape: x.shape().to_vec(),
        }))
    }

    pub fn sum(&self, x: &Var<F>) -> Var<F> {
        let total = F::narrow(x.value.sum_f64());
        self.push(Tensor::scalar(total), &[x.node], || Op::Sum {
            x: x.node,
            shape: x.shape().to_vec(),
        })
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&self, x: &Var<F>, target: &Tensor<F>) -> Result<Var<F>> {
        same_shape("l1_loss", x.shape(), target.shape())?;
        let n = x.value.len() as f64;
        let total: f64 = x
            .value
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a.widen() - b.widen()).abs())
            .sum();
        Ok(self.push(Tensor::scalar(F::narrow(total / n)), &[x.node], || Op::L1Loss {
            x: x.clone(),
            target: Arc::new(target.clone()),
        }))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<F>) -> Result<Grads<F>> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let Some(root) = loss.node else {
            return Err(Error::Contract(
                "loss is not on the tape (no gradient-requiring inputs)".into(),
            ));
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<F>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[root] = Some(Tensor::from_parts(loss.shape().to_vec(), vec![F::one()]));
        let fault = self.fault.get();

        for i in (0..=root).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let op = &nodes[i];
            let kind = op.kind();
            if kind == OpKind::Leaf {
                grads[i] = Some(gy);
                continue;
            }
            let first = Cell::new(true);
            let send = |grads: &mut [Option<Tensor<F>>], node: Option<usize>, mut g: Tensor<F>| {
                if first.replace(false) && fault == Some(kind) {
                    g.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(grads, node, g);
            };
            match op {
                Op::Leaf => unreachable!(),
                Op::Linear { x, w, b } => {
                    let (cout, cin) = (w.shape()[0], w.shape()[1]);
                    let rows = x.value.len() / cin;
                    let dyd = gy.data();
                    let dx = kernels::gemm(dyd, w.value.data(), rows, cout, cin, false);
                    send(&mut grads, x.node, Tensor::from_parts(x.shape().to_vec(), dx));
                    let dyt = kernels::transpose(dyd, rows, cout);
                    let dw = kernels::gemm(&dyt, x.value.data(), cout, rows, cin, false);
                    send(&mut grads, w.node, Tensor::from_parts(vec![cout, cin], dw));
                    if b.is_some() {
                        let mut db = vec![0f64; cout];
                        for row in dyd.chunks_exact(cout) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += v.widen();
                            }
                        }
                        let db = db.into_iter().map(F::narrow).collect();
                        send(&mut grads, *b, Tensor::from_parts(vec![cout], db));
                    }
                }
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    p,
                    b_transposed,
                } => {
                    let (m, k, p) = (*m, *k, *p);
                    let (ad, bd, dyd) = (a.value.data(), b.value.data(), gy.data());
                    let mut da = Vec::with_capacity(ad.len());
                    let mut db = Vec::with_capacity(bd.len());
                    for n in 0..*batch {
                        let an = &ad[n * m * k..(n + 1) * m * k];
                        let bn = &bd[n * k * p..(n + 1) * k * p];
                        let gn = &dyd[n * m * p..(n + 1) * m * p];
                        if *b_transposed {
                            da.extend(kernels::gemm(gn, bn, m, p, k, false));
                            let gt = kernels::transpose(gn, m, p);
                            db.extend(kernels::gemm(&gt, an, p, m, k, false));
                        } else {
                            da.extend(kernels::gemm(gn, bn, m, p, k, true));
                            let at = kernels::transpose(an, m, k);
                            db.extend(kernels::gemm(&at, gn, k, m, p, false));
                        }
                    }
                    send(&mut grads, a.node, Tensor::from_parts(a.shape().to_vec(), da));
                    send(&mut grads, b.node, Tensor::from_parts(b.shape().to_vec(), db));
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(x.value.data(), w.value.data(), gy.data(), *geom);
                    send(&mut grads, x.node, Tensor::from_parts(x.shape().to_vec(), dx));
                    send(&mut grads, w.node, Tensor::from_parts(w.shape().to_vec(), dw));
                    if b.is_some() {
                        send(&mut grads, *b, Tensor::from_parts(vec![geom.cout], db));
                    }
                }
                Op::Add { a, b } => {
                    send(&mut grads, *a, gy.clone());
                    send(&mut grads, *b, gy);
                }
                Op::Mul { a, b } => {
                    let da = gy
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    let db = gy
                        .data()
                        .iter()
                        .zip(a.value.data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    send(&mut grads, a.node, Tensor::from_parts(a.shape().to_vec(), da));
                    send(&mut grads, b.node, Tensor::from_parts(b.shape().to_vec(), db));
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    send(&mut grads, *x, gy.map(|v| F::narrow(v.widen() * f)));
                }
                Op::AddBroadcast { x, b, dims, b_shape } => {
                    let [na, nm, nr, ni] = *dims;
                    let mut db = vec![0f64; nm * ni];
                    let dyd = gy.data();
                    for a in 0..na {
                        for m in 0..nm {
                            for r in 0..nr {
                                let base = ((a * nm + m) * nr + r) * ni;
                                for (acc, v) in db[m * ni..(m + 1) * ni].iter_mut().zip(&dyd[base..base + ni]) {
                                    *acc += v.widen();
                                }
                            }
                        }
                    }
                    send(&mut grads, *x, gy.clone());
                    send(
                        &mut grads,
                        *b,
                        Tensor::from_parts(b_shape.clone(), db.into_iter().map(F::narrow).collect()),
                    );
                }
                Op::ScaleChannels { x, gate } => {
                    let plane = x.value.len() / gate.value.len();
                    let dyd = gy.data();
                    let dx = dyd
                        .chunks_exact(plane)
                        .zip(gate.value.data())
                        .flat_map(|(p, &g)| p.iter().map(move |&v| v * g))
                        .collect();
                    let dg = dyd
                        .chunks_exact(plane)
                        .zip(x.value.data().chunks_exact(plane))
                        .map(|(gp, xp)| {
                            F::narrow(gp.iter().zip(xp).map(|(a, b)| a.widen() * b.widen()).sum())
                        })
                        .collect();
                    send(&mut grads, x.node, Tensor::from_parts(x.shape().to_vec(), dx));
                    send(&mut grads, gate.node, Tensor::from_parts(gate.shape().to_vec(), dg));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let c = gain.value.len();
                    let g = gain.value.data();
                    let dyd = gy.data();
                    let mut dx = Vec::with_capacity(dyd.len());
                    let mut dg = vec![0f64; c];
                    let mut db = vec![0f64; c];
                    let mut dxhat = vec![0f64; c];
                    for (r, (dy_row, xh_row)) in dyd.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = dy_row[j].widen();
                            dg[j] += d * xh_row[j];
                            db[j] += d;
                            dxhat[j] = d * g[j].widen();
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh_row[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        let rs = rstd[r];
                        for j in 0..c {
                            dx.push(F::narrow(rs * (dxhat[j] - mean_d - xh_row[j] * mean_dx)));
                        }
                    }
                    let narrow = |v: Vec<f64>| v.into_iter().map(F::narrow).collect::<Vec<F>>();
                    send(&mut grads, *x, Tensor::from_parts(gy.shape().to_vec(), dx));
                    send(&mut grads, gain.node, Tensor::from_parts(vec![c], narrow(dg)));
                    send(&mut grads, *bias, Tensor::from_parts(vec![c], narrow(db)));
                }
                Op::Softmax { x, y } => {
                    let n = y.last_dim();
                    let mut dx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks_exact(n).zip(gy.data().chunks_exact(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.widen() * b.widen()).sum();
                        dx.extend(
                            yr.iter()
                                .zip(gr)
                                .map(|(a, b)| F::narrow(a.widen() * (b.widen() - dot))),
                        );
                    }
                    send(&mut grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
                }
                Op::Activation { x, kind } => {
                    let dx = gy
                        .data()
                        .iter()
                        .zip(x.value.data())
                        .map(|(g, v)| F::narrow(g.widen() * kind.derivative(v.widen())))
                        .collect();
                    send(&mut grads, x.node, Tensor::from_parts(x.shape().to_vec(), dx));
                }
                Op::AvgPool { x, shape } => {
                    let plane = shape[2] * shape[3];
                    let inv = 1.0 / plane as f64;
                    let dx = gy
                        .data()
                        .iter()
                        .flat_map(|g| std::iter::repeat_n(F::narrow(g.widen() * inv), plane))
                        .collect();
                    send(&mut grads, *x, Tensor::from_parts(shape.to_vec(), dx));
                }
                Op::Gather { x, gather } => {
                    send(&mut grads, *x, gather.scatter_add(&gy));
                }
                Op::Concat { parts, axis } => {
                    let shape = gy.shape().to_vec();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let total = shape[*axis] * inner;
                    let mut offset = 0;
                    for (node, pshape) in parts {
                        let chunk = pshape[*axis] * inner;
                        if node.is_some() {
                            let mut data = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                let start = o * total + offset;
                                data.extend_from_slice(&gy.data()[start..start + chunk]);
                            }
                            send(&mut grads, *node, Tensor::from_parts(pshape.clone(), data));
                        } else {
                            first.set(false);
                        }
                        offset += chunk;
                    }
                }
                Op::Reshape { x, in_shape } => {
                    send(&mut grads, *x, gy.reshape(in_shape)?);
                }
                Op::Sum { x, shape } => {
                    send(&mut grads, *x, Tensor::full(shape, gy.data()[0]));
                }
                Op::L1Loss { x, target } => {
                    let scale = gy.data()[0].widen() / x.value.len() as f64;
                    let dx = x
                        .value
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| {
                            let d = a.widen() - b.widen();
                            F::narrow(if d > 0.0 {
                                scale
                            } else if d < 0.0 {
                                -scale
                            } else {
                                0.0
                            })
                        })
                        .collect();
                    send(&mut grads, x.node, Tensor::from_parts(x.shape().to_vec(), dx));
                }
            }
        }
        Ok(Grads { grads })
    }
}
