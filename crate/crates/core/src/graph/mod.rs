//! Static computation graph with cached forward activations and reverse-mode
//! gradients for parameters and designated inputs.
//!
//! A graph is assembled once with [`GraphBuilder`]. Leaves are either
//! parameters or named inputs; every node applies one [`Op`] to earlier
//! values, so the node list is topologically ordered by construction.

mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `[input NCHW, kernel OIkk]`, SAME padding, stride 1, odd `k`.
    Conv2d,
    /// `[input N..., weight OF, bias O]`; trailing input axes are flattened.
    Dense,
    /// `[input NCHW, scale C, offset C]`.
    GroupNorm { groups: usize, eps: f64 },
    /// `[kernel O...]`, standardized per output channel.
    WeightStandardize { eps: f64 },
    Relu,
    /// Non-overlapping square pooling; `window == H == W` gives a global pool.
    AvgPool { window: usize },
    /// `[logits NC, labels N]` -> per-sample loss `N`.
    SoftmaxCrossEntropy,
    Add,
    Scale(f64),
}

impl Op {
    fn arity(&self) -> usize {
        match self {
            Op::Conv2d | Op::SoftmaxCrossEntropy | Op::Add => 2,
            Op::Dense | Op::GroupNorm { .. } => 3,
            Op::WeightStandardize { .. } | Op::Relu | Op::AvgPool { .. } | Op::Scale(_) => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Value {
    Leaf(usize),
    Node(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Parameter,
    Input { differentiable: bool },
}

#[derive(Clone, Debug)]
struct Leaf {
    name: String,
    kind: LeafKind,
}

#[derive(Clone, Debug)]
struct Node {
    name: String,
    op: Op,
    args: Vec<Value>,
}

/// Which leaf gradients a backward pass should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub parameters: bool,
    pub inputs: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest {
        parameters: true,
        inputs: true,
    };
    pub const PARAMETERS: GradRequest = GradRequest {
        parameters: true,
        inputs: false,
    };
    pub const INPUTS: GradRequest = GradRequest {
        parameters: false,
        inputs: true,
    };
}

#[derive(Default)]
pub struct GraphBuilder {
    leaves: Vec<Leaf>,
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parameter(&mut self, name: impl Into<String>) -> Value {
        self.leaf(name.into(), LeafKind::Parameter)
    }

    pub fn input(&mut self, name: impl Into<String>, differentiable: bool) -> Value {
        self.leaf(name.into(), LeafKind::Input { differentiable })
    }

    fn leaf(&mut self, name: String, kind: LeafKind) -> Value {
        self.leaves.push(Leaf { name, kind });
        Value::Leaf(self.leaves.len() - 1)
    }

    pub fn push(&mut self, name: impl Into<String>, op: Op, args: &[Value]) -> Result<Value> {
        let name = name.into();
        if args.len() != op.arity() {
            return Err(Error::shape(
                &name,
                format!("{op:?} takes {} arguments, got {}", op.arity(), args.len()),
            ));
        }
        for a in args {
            let ok = match *a {
                Value::Leaf(i) => i < self.leaves.len(),
                Value::Node(i) => i < self.nodes.len(),
            };
            if !ok {
                return Err(Error::invalid(format!("{name}: unknown argument {a:?}")));
            }
        }
        if let Op::GroupNorm { groups: 0, .. } | Op::AvgPool { window: 0 } = op {
            return Err(Error::invalid(format!("{name}: zero group/window size")));
        }
        self.nodes.push(Node {
            name,
            op,
            args: args.to_vec(),
        });
        Ok(Value::Node(self.nodes.len() - 1))
    }

    /// Finalizes the graph. The output must be the last node and every node
    /// must contribute to it.
    pub fn build(self, output: Value) -> Result<Graph> {
        let out = match output {
            Value::Node(i) if i + 1 == self.nodes.len() => i,
            _ => return Err(Error::invalid("graph output must be the last node")),
        };
        let mut live = vec![false; self.nodes.len()];
        live[out] = true;
        for i in (0..self.nodes.len()).rev() {
            if !live[i] {
                return Err(Error::invalid(format!(
                    "node `{}` does not reach the output",
                    self.nodes[i].name
                )));
            }
            for a in &self.nodes[i].args {
                if let Value::Node(j) = *a {
                    live[j] = true;
                }
            }
        }
        let mut names: Vec<&str> = self.leaves.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate leaf name"));
        }
        Ok(Graph {
            leaves: self.leaves,
            nodes: self.nodes,
            state: None,
            pool: Pool::default(),
            backward_visits: 0,
        })
    }
}

/// Recycled activation and gradient buffers. Large fresh allocations are
/// dominated by page faults, so buffers are reused across passes.
#[derive(Default)]
struct Pool {
    free: Vec<Vec<f64>>,
}

impl Pool {
    const MIN_LEN: usize = 1 << 12;
    const MAX_BUFFERS: usize = 96;

    fn zeros(&mut self, n: usize) -> Vec<f64> {
        let mut v = self.scratch(n);
        v.fill(0.0);
        v
    }

    /// A buffer of length `n` with unspecified contents, for callers that
    /// overwrite every element.
    fn scratch(&mut self, n: usize) -> Vec<f64> {
        if n >= Self::MIN_LEN {
            let best = self
                .free
                .iter()
                .enumerate()
                .filter(|(_, v)| v.capacity() >= n)
                .min_by_key(|(_, v)| v.capacity())
                .map(|(i, _)| i);
            if let Some(i) = best {
                let mut v = self.free.swap_remove(i);
                v.truncate(n);
                v.resize(n, 0.0);
                return v;
            }
        }
        vec![0.0; n]
    }

    fn copy_of(&mut self, src: &[f64]) -> Vec<f64> {
        let mut v = self.scratch(src.len());
        v.copy_from_slice(src);
        v
    }

    fn recycle(&mut self, v: Vec<f64>) {
        if v.capacity() >= Self::MIN_LEN && self.free.len() < Self::MAX_BUFFERS {
            self.free.push(v);
        }
    }

    fn recycle_tensor(&mut self, t: Tensor) {
        self.recycle(t.into_data());
    }

    fn recycle_state(&mut self, state: ForwardState) {
        for t in state.leaves.into_iter().chain(state.values) {
            self.recycle_tensor(t);
        }
        for a in state.aux {
            match a {
                Aux::None => {}
                Aux::Cols(v) | Aux::Probs(v) => self.recycle(v),
                Aux::Normalized { xhat, .. } => self.recycle(xhat),
            }
        }
    }
}

enum Aux {
    None,
    /// Unfolded inputs of every sample, one `rows x pixels` block per sample.
    Cols(Vec<f64>),
    Normalized { xhat: Vec<f64>, inv_std: Vec<f64> },
    Probs(Vec<f64>),
}

struct ForwardState {
    leaves: Vec<Tensor>,
    values: Vec<Tensor>,
    aux: Vec<Aux>,
}

pub struct Graph {
    leaves: Vec<Leaf>,
    nodes: Vec<Node>,
    state: Option<ForwardState>,
    pool: Pool,
    backward_visits: usize,
}

/// Leaf gradients keyed by leaf name, in leaf declaration order.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        let pos = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(pos).1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = (&str, LeafKind)> {
        self.leaves.iter().map(|l| (l.name.as_str(), l.kind))
    }

    /// Node visits performed by the most recent backward pass.
    pub fn backward_visits(&self) -> usize {
        self.backward_visits
    }

    /// Cached value of a named node from the last [`Graph::forward`].
    pub fn value(&self, name: &str) -> Option<&Tensor> {
        let state = self.state.as_ref()?;
        let i = self.nodes.iter().position(|n| n.name == name)?;
        state.values.get(i)
    }

    fn bind(&mut self, feeds: &[(&str, &Tensor)]) -> Result<Vec<Tensor>> {
        let mut leaves = Vec::with_capacity(self.leaves.len());
        for leaf in &self.leaves {
            let t = feeds
                .iter()
                .find(|(n, _)| *n == leaf.name)
                .ok_or_else(|| Error::MissingInput(leaf.name.clone()))?
                .1;
            leaves.push(Tensor::from_parts(t.shape().to_vec(), self.pool.copy_of(t.data())));
        }
        Ok(leaves)
    }

    fn reset(&mut self) {
        if let Some(old) = self.state.take() {
            self.pool.recycle_state(old);
        }
    }

    /// Runs every node, caches activations for [`Graph::backward`] and returns the output.
    pub fn forward(&mut self, feeds: &[(&str, &Tensor)]) -> Result<&Tensor> {
        self.reset();
        let leaves = self.bind(feeds)?;
        let mut values = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (v, a) = eval_node(node, &leaves, &values, &mut self.pool, true)?;
            values.push(v);
            aux.push(a);
        }
        self.state = Some(ForwardState {
            leaves,
            values,
            aux,
        });
        Ok(self.state.as_ref().and_then(|s| s.values.last()).expect("non-empty graph"))
    }

    /// Evaluates nodes up to and including `until` without caching anything.
    /// Invalidates any previous forward state.
    pub fn infer(&mut self, feeds: &[(&str, &Tensor)], until: &str) -> Result<Tensor> {
        self.reset();
        let stop = self
            .nodes
            .iter()
            .position(|n| n.name == until)
            .ok_or_else(|| Error::invalid(format!("no node named `{until}`")))?;
        let needed: Vec<usize> = self
            .leaves
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                self.nodes[..=stop]
                    .iter()
                    .any(|n| n.args.contains(&Value::Leaf(*i)))
            })
            .map(|(i, _)| i)
            .collect();
        let mut leaves = Vec::with_capacity(self.leaves.len());
        for (i, leaf) in self.leaves.iter().enumerate() {
            if needed.contains(&i) {
                let t = feeds
                    .iter()
                    .find(|(n, _)| *n == leaf.name)
                    .map(|(_, t)| Tensor::from_parts(t.shape().to_vec(), self.pool.copy_of(t.data())))
                    .ok_or_else(|| Error::MissingInput(leaf.name.clone()))?;
                leaves.push(t);
            } else {
                leaves.push(Tensor::scalar(0.0));
            }
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(stop + 1);
        for node in &self.nodes[..=stop] {
            let (v, _) = eval_node(node, &leaves, &values, &mut self.pool, false)?;
            values.push(v);
        }
        let out = values.pop().expect("stop node evaluated");
        for t in leaves.into_iter().chain(values) {
            self.pool.recycle_tensor(t);
        }
        Ok(out)
    }

    /// Propagates `seed` (shaped like the output) back through the cached forward pass.
    pub fn backward(&mut self, seed: &Tensor, request: GradRequest) -> Result<Gradients> {
        let state = self.state.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let out = self.nodes.len() - 1;
        if seed.shape() != state.values[out].shape() {
            return Err(Error::shape(
                &self.nodes[out].name,
                format!(
                    "seed {:?} does not match output {:?}",
                    seed.shape(),
                    state.values[out].shape()
                ),
            ));
        }
        let leaf_needs: Vec<bool> = self
            .leaves
            .iter()
            .map(|l| match l.kind {
                LeafKind::Parameter => request.parameters,
                LeafKind::Input { differentiable } => differentiable && request.inputs,
            })
            .collect();
        let mut node_needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            node_needs[i] = node.args.iter().any(|a| match *a {
                Value::Leaf(j) => leaf_needs[j],
                Value::Node(j) => node_needs[j],
            });
        }
        let needs = |v: &Value| match *v {
            Value::Leaf(j) => leaf_needs[j],
            Value::Node(j) => node_needs[j],
        };

        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.leaves.len()];
        node_grads[out] = Some(seed.clone());
        let mut visits = 0;
        for i in (0..self.nodes.len()).rev() {
            visits += 1;
            let node = &self.nodes[i];
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            if !node_needs[i] {
                continue;
            }
            let wants: Vec<bool> = node.args.iter().map(needs).collect();
            let arg_grads = backward_node(node, i, state, &g, &wants, &mut self.pool)?;
            self.pool.recycle_tensor(g);
            for ((arg, want), grad) in node.args.iter().zip(&wants).zip(arg_grads) {
                let (Some(grad), true) = (grad, *want) else {
                    continue;
                };
                let slot = match *arg {
                    Value::Leaf(j) => &mut leaf_grads[j],
                    Value::Node(j) => &mut node_grads[j],
                };
                match slot {
                    Some(acc) => {
                        acc.add_assign(&grad);
                        self.pool.recycle_tensor(grad);
                    }
                    None => *slot = Some(grad),
                }
            }
        }
        self.backward_visits = visits;

        let mut entries = Vec::new();
        for (j, leaf) in self.leaves.iter().enumerate() {
            if !leaf_needs[j] {
                continue;
            }
            let g = leaf_grads[j]
                .take()
                .unwrap_or_else(|| Tensor::zeros(state.leaves[j].shape()));
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", leaf.name)));
            }
            entries.push((leaf.name.clone(), g));
        }
        Ok(Gradients { entries })
    }
}

fn fetch<'a>(v: Value, leaves: &'a [Tensor], values: &'a [Tensor]) -> &'a Tensor {
    match v {
        Value::Leaf(i) => &leaves[i],
        Value::Node(i) => &values[i],
    }
}

fn nchw(name: &str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(name, format!("expected NCHW input, got {s:?}"))),
    }
}

fn eval_node(
    node: &Node,
    leaves: &[Tensor],
    values: &[Tensor],
    pool: &mut Pool,
    cache: bool,
) -> Result<(Tensor, Aux)> {
    let name = node.name.as_str();
    let arg = |k: usize| fetch(node.args[k], leaves, values);
    let (out, aux) = match node.op {
        Op::Conv2d => {
            let x = arg(0);
            let k = arg(1);
            let (n, cin, h, w) = nchw(name, x)?;
            let g = match *k.shape() {
                [cout, kc, kh, kw] if kc == cin && kh == kw && kh % 2 == 1 => ConvGeom {
                    cin,
                    cout,
                    h,
                    w,
                    ksize: kh,
                },
                ref s => {
                    return Err(Error::shape(
                        name,
                        format!("kernel {s:?} incompatible with input {:?}", x.shape()),
                    ))
                }
            };
            let (rows, hw) = (g.rows(), g.pixels());
            let block = rows * hw;
            let mut out = pool.scratch(n * g.cout * hw);
            let mut cols = pool.scratch(if cache { n * block } else { block });
            for s in 0..n {
                let col = if cache {
                    &mut cols[s * block..(s + 1) * block]
                } else {
                    &mut cols[..]
                };
                kernels::im2col(&x.data()[s * cin * hw..(s + 1) * cin * hw], g, col);
                kernels::gemm(
                    g.cout,
                    rows,
                    hw,
                    k.data(),
                    (rows, 1),
                    col,
                    (hw, 1),
                    0.0,
                    &mut out[s * g.cout * hw..(s + 1) * g.cout * hw],
                );
            }
            let aux = if cache {
                Aux::Cols(cols)
            } else {
                pool.recycle(cols);
                Aux::None
            };
            (Tensor::from_parts(vec![n, g.cout, h, w], out), aux)
        }
        Op::Dense => {
            let (x, wt, b) = (arg(0), arg(1), arg(2));
            let n = x.shape()[0];
            let f = x.len() / n;
            let o = match *wt.shape() {
                [o, wf] if wf == f => o,
                ref s => {
                    return Err(Error::shape(
                        name,
                        format!("weight {s:?} incompatible with {f} input features"),
                    ))
                }
            };
            if b.shape() != [o] {
                return Err(Error::shape(name, format!("bias {:?}, expected [{o}]", b.shape())));
            }
            let mut out = pool.zeros(n * o);
            for row in out.chunks_mut(o) {
                row.copy_from_slice(b.data());
            }
            kernels::gemm(n, f, o, x.data(), (f, 1), wt.data(), (1, f), 1.0, &mut out);
            (Tensor::from_parts(vec![n, o], out), Aux::None)
        }
        Op::GroupNorm { groups, eps } => {
            let (x, scale, offset) = (arg(0), arg(1), arg(2));
            let (n, c, h, w) = nchw(name, x)?;
            if c % groups != 0 {
                return Err(Error::shape(name, format!("{c} channels not divisible by {groups} groups")));
            }
            if scale.shape() != [c] || offset.shape() != [c] {
                return Err(Error::shape(name, format!("scale/offset must be [{c}]")));
            }
            let mut xhat = pool.scratch(x.len());
            let inv_std = kernels::standardize(x.data(), n * groups, eps, &mut xhat);
            let hw = h * w;
            let mut out = pool.scratch(x.len());
            for (p, (o, xh)) in out.chunks_mut(hw).zip(xhat.chunks(hw)).enumerate() {
                let (a, b) = (scale.data()[p % c], offset.data()[p % c]);
                for (o, v) in o.iter_mut().zip(xh) {
                    *o = a * v + b;
                }
            }
            let aux = if cache {
                Aux::Normalized { xhat, inv_std }
            } else {
                pool.recycle(xhat);
                Aux::None
            };
            (Tensor::from_parts(x.shape().to_vec(), out), aux)
        }
        Op::WeightStandardize { eps } => {
            let k = arg(0);
            let o = k.shape()[0];
            if k.len() / o < 2 {
                return Err(Error::shape(name, "need at least two weights per output channel"));
            }
            let mut xhat = vec![0.0; k.len()];
            let inv_std = kernels::standardize(k.data(), o, eps, &mut xhat);
            (
                Tensor::from_parts(k.shape().to_vec(), xhat.clone()),
                if cache {
                    Aux::Normalized { xhat, inv_std }
                } else {
                    Aux::None
                },
            )
        }
        Op::Relu => {
            let x = arg(0);
            let mut out = pool.scratch(x.len());
            for (o, v) in out.iter_mut().zip(x.data()) {
                *o = v.max(0.0);
            }
            (Tensor::from_parts(x.shape().to_vec(), out), Aux::None)
        }
        Op::AvgPool { window } => {
            let x = arg(0);
            let (n, c, h, w) = nchw(name, x)?;
            if h % window != 0 || w % window != 0 {
                return Err(Error::shape(name, format!("{h}x{w} not divisible by window {window}")));
            }
            let (oh, ow) = (h / window, w / window);
            let inv = 1.0 / (window * window) as f64;
            let mut out = pool.zeros(n * c * oh * ow);
            for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
                for (y, row) in plane.chunks(w).enumerate() {
                    let drow = &mut dst[(y / window) * ow..(y / window + 1) * ow];
                    for (d, cell) in drow.iter_mut().zip(row.chunks(window)) {
                        *d += cell.iter().sum::<f64>();
                    }
                }
                dst.iter_mut().for_each(|v| *v *= inv);
            }
            (Tensor::from_parts(vec![n, c, oh, ow], out), Aux::None)
        }
        Op::SoftmaxCrossEntropy => {
            let (logits, labels) = (arg(0), arg(1));
            let (n, c) = match *logits.shape() {
                [n, c] => (n, c),
                ref s => return Err(Error::shape(name, format!("logits must be [N, C], got {s:?}"))),
            };
            if labels.shape() != [n] {
                return Err(Error::shape(name, format!("labels {:?}, expected [{n}]", labels.shape())));
            }
            let mut probs = vec![0.0; n * c];
            let mut out = Vec::with_capacity(n);
            for s in 0..n {
                let label = class_index(labels.data()[s], c)?;
                let row = &logits.data()[s * c..(s + 1) * c];
                let lse = kernels::log_softmax_row(row, &mut probs[s * c..(s + 1) * c]);
                out.push(lse - row[label]);
            }
            (
                Tensor::from_parts(vec![n], out),
                if cache { Aux::Probs(probs) } else { Aux::None },
            )
        }
        Op::Add => {
            let (a, b) = (arg(0), arg(1));
            if a.shape() != b.shape() {
                return Err(Error::shape(name, format!("{:?} + {:?}", a.shape(), b.shape())));
            }
            let mut out = pool.scratch(a.len());
            for ((o, x), y) in out.iter_mut().zip(a.data()).zip(b.data()) {
                *o = x + y;
            }
            (Tensor::from_parts(a.shape().to_vec(), out), Aux::None)
        }
        Op::Scale(c) => {
            let x = arg(0);
            let mut out = pool.scratch(x.len());
            for (o, v) in out.iter_mut().zip(x.data()) {
                *o = c * v;
            }
            (Tensor::from_parts(x.shape().to_vec(), out), Aux::None)
        }
    };
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("node `{name}`")));
    }
    Ok((out, aux))
}

fn class_index(v: f64, classes: usize) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
        return Err(Error::LabelOutOfRange {
            label: if v < 0.0 { usize::MAX } else { v as usize },
            classes,
        });
    }
    Ok(v as usize)
}

fn backward_node(
    node: &Node,
    idx: usize,
    state: &ForwardState,
    g: &Tensor,
    wants: &[bool],
    pool: &mut Pool,
) -> Result<Vec<Option<Tensor>>> {
    let arg = |k: usize| fetch(node.args[k], &state.leaves, &state.values);
    let out = match node.op {
        Op::Conv2d => {
            let (x, k) = (arg(0), arg(1));
            let (n, cin, h, w) = nchw(&node.name, x)?;
            let cout = k.shape()[0];
            let gm = ConvGeom {
                cin,
                cout,
                h,
                w,
                ksize: k.shape()[2],
            };
            let (rows, hw) = (gm.rows(), gm.pixels());
            let Aux::Cols(cols) = &state.aux[idx] else {
                return Err(Error::BackwardBeforeForward);
            };
            let block = rows * hw;
            let mut dx = wants[0].then(|| pool.zeros(x.len()));
            let mut dk = wants[1].then(|| vec![0.0; k.len()]);
            let mut dcol = pool.scratch(block);
            for s in 0..n {
                let gout = &g.data()[s * cout * hw..(s + 1) * cout * hw];
                if let Some(dk) = dk.as_mut() {
                    let col = &cols[s * block..(s + 1) * block];
                    kernels::gemm(cout, hw, rows, gout, (hw, 1), col, (1, hw), 1.0, dk);
                }
                if let Some(dx) = dx.as_mut() {
                    kernels::gemm(rows, cout, hw, k.data(), (1, rows), gout, (hw, 1), 0.0, &mut dcol);
                    kernels::col2im_add(&dcol, gm, &mut dx[s * cin * hw..(s + 1) * cin * hw]);
                }
            }
            pool.recycle(dcol);
            vec![
                dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                dk.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
            ]
        }
        Op::Dense => {
            let (x, wt) = (arg(0), arg(1));
            let n = x.shape()[0];
            let f = x.len() / n;
            let o = wt.shape()[0];
            let dx = wants[0].then(|| {
                let mut d = pool.scratch(n * f);
                kernels::gemm(n, o, f, g.data(), (o, 1), wt.data(), (f, 1), 0.0, &mut d);
                Tensor::from_parts(x.shape().to_vec(), d)
            });
            let dw = wants[1].then(|| {
                let mut d = vec![0.0; o * f];
                kernels::gemm(o, n, f, g.data(), (1, o), x.data(), (f, 1), 0.0, &mut d);
                Tensor::from_parts(vec![o, f], d)
            });
            let db = wants[2].then(|| {
                let mut d = vec![0.0; o];
                for row in g.data().chunks(o) {
                    for (a, b) in d.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                Tensor::from_parts(vec![o], d)
            });
            vec![dx, dw, db]
        }
        Op::GroupNorm { .. } => {
            let (x, scale) = (arg(0), arg(1));
            let (_, c, h, w) = nchw(&node.name, x)?;
            let hw = h * w;
            let Aux::Normalized { xhat, inv_std } = &state.aux[idx] else {
                return Err(Error::BackwardBeforeForward);
            };
            let dx = wants[0].then(|| {
                let mut dxhat = pool.scratch(x.len());
                for (p, (dst, src)) in dxhat.chunks_mut(hw).zip(g.data().chunks(hw)).enumerate() {
                    let a = scale.data()[p % c];
                    for (o, v) in dst.iter_mut().zip(src) {
                        *o = a * v;
                    }
                }
                let mut d = pool.scratch(x.len());
                kernels::standardize_backward(xhat, inv_std, &dxhat, &mut d);
                pool.recycle(dxhat);
                Tensor::from_parts(x.shape().to_vec(), d)
            });
            let (mut ds, mut db) = (vec![0.0; c], vec![0.0; c]);
            for (p, (gp, xp)) in g.data().chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                ds[p % c] += gp.iter().zip(xp).map(|(d, v)| d * v).sum::<f64>();
                db[p % c] += gp.iter().sum::<f64>();
            }
            vec![
                dx,
                wants[1].then(|| Tensor::from_parts(vec![c], ds)),
                wants[2].then(|| Tensor::from_parts(vec![c], db)),
            ]
        }
        Op::WeightStandardize { .. } => {
            let k = arg(0);
            let Aux::Normalized { xhat, inv_std } = &state.aux[idx] else {
                return Err(Error::BackwardBeforeForward);
            };
            let mut d = vec![0.0; k.len()];
            kernels::standardize_backward(xhat, inv_std, g.data(), &mut d);
            vec![Some(Tensor::from_parts(k.shape().to_vec(), d))]
        }
        Op::Relu => {
            let x = arg(0);
            let mut d = pool.scratch(x.len());
            for ((o, gv), v) in d.iter_mut().zip(g.data()).zip(x.data()) {
                *o = if *v > 0.0 { *gv } else { 0.0 };
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Op::AvgPool { window } => {
            let x = arg(0);
            let (n, c, h, w) = nchw(&node.name, x)?;
            let (oh, ow) = (h / window, w / window);
            let inv = 1.0 / (window * window) as f64;
            let mut d = pool.scratch(x.len());
            for (src, dst) in g.data().chunks(oh * ow).zip(d.chunks_mut(h * w)) {
                for (y, row) in dst.chunks_mut(w).enumerate() {
                    let srow = &src[(y / window) * ow..(y / window + 1) * ow];
                    for (cell, v) in row.chunks_mut(window).zip(srow) {
                        cell.fill(v * inv);
                    }
                }
            }
            debug_assert_eq!(d.len(), n * c * h * w);
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Op::SoftmaxCrossEntropy => {
            let (logits, labels) = (arg(0), arg(1));
            let c = logits.shape()[1];
            let Aux::Probs(probs) = &state.aux[idx] else {
                return Err(Error::BackwardBeforeForward);
            };
            let mut d = probs.clone();
            for (s, row) in d.chunks_mut(c).enumerate() {
                row[labels.data()[s] as usize] -= 1.0;
                let seed = g.data()[s];
                row.iter_mut().for_each(|v| *v *= seed);
            }
            vec![Some(Tensor::from_parts(logits.shape().to_vec(), d)), None]
        }
        Op::Add => {
            let copy = |pool: &mut Pool| Tensor::from_parts(g.shape().to_vec(), pool.copy_of(g.data()));
            vec![Some(copy(pool)), Some(copy(pool))]
        }
        Op::Scale(c) => {
            let mut d = pool.scratch(g.len());
            for (o, v) in d.iter_mut().zip(g.data()) {
                *o = c * v;
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(op: Op) -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.input("x", true);
        let y = b.push("y", op, &[x]).unwrap();
        b.build(y).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut g = single(Op::Relu);
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(g.forward(&[("x", &x)]).unwrap().data(), &[0.0, 0.0, 2.0]);
        let grads = g.backward(&Tensor::filled(&[3], 1.0), GradRequest::ALL).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn scale_one_is_identity() {
        let mut g = single(Op::Scale(1.0));
        let x = Tensor::new(vec![2, 2], vec![0.5, -3.0, 7.25, 1e-9]).unwrap();
        assert_eq!(g.forward(&[("x", &x)]).unwrap(), &x);
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut g = single(Op::Relu);
        let err = g.backward(&Tensor::scalar(1.0), GradRequest::ALL).unwrap_err();
        assert!(matches!(err, Error::BackwardBeforeForward));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", true);
        let k = b.parameter("k");
        let y = b.push("conv_a", Op::Conv2d, &[x, k]).unwrap();
        let mut g = b.build(y).unwrap();
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[3, 5, 3, 3]);
        let err = g.forward(&[("x", &x), ("k", &k)]).unwrap_err().to_string();
        assert!(err.contains("conv_a"), "{err}");
    }

    #[test]
    fn missing_input_is_reported() {
        let mut g = single(Op::Relu);
        assert!(matches!(g.forward(&[]), Err(Error::MissingInput(n)) if n == "x"));
    }

    #[test]
    fn dangling_nodes_are_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", true);
        b.push("dead", Op::Relu, &[x]).unwrap();
        let y = b.push("y", Op::Scale(2.0), &[x]).unwrap();
        assert!(b.build(y).is_err());
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", true);
        let a = b.push("a", Op::Relu, &[x]).unwrap();
        let c = b.push("c", Op::Scale(3.0), &[x]).unwrap();
        let y = b.push("y", Op::Add, &[a, c]).unwrap();
        let mut g = b.build(y).unwrap();
        let x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        g.forward(&[("x", &x)]).unwrap();
        let grads = g.backward(&Tensor::filled(&[2], 1.0), GradRequest::ALL).unwrap();
        assert_eq!(g.backward_visits(), 3);
        assert_eq!(grads.get("x").unwrap().data(), &[4.0, 3.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut b = GraphBuilder::new();
        let z = b.input("z", true);
        let l = b.input("labels", false);
        let y = b.push("ce", Op::SoftmaxCrossEntropy, &[z, l]).unwrap();
        let mut g = b.build(y).unwrap();
        let z = Tensor::zeros(&[1, 4]);
        let bad = Tensor::scalar(4.0);
        assert!(matches!(
            g.forward(&[("z", &z), ("labels", &bad)]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
        let ok = Tensor::scalar(2.0);
        let loss = g.forward(&[("z", &z), ("labels", &ok)]).unwrap();
        assert!((loss.data()[0] - 4f64.ln()).abs() < 1e-12);
    }
}
