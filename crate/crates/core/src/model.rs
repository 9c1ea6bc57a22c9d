//! Desk-scale convolutional classifier: plain conv blocks with weight
//! standardization, group normalization and ReLU, average pooling between
//! stages, global average pooling and a dense head.

use std::ops::{Add, Sub};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GradRequest, Graph, GraphBuilder, Op};
use crate::io;
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;
pub const WEIGHT_STD_EPS: f64 = 1e-10;
pub const DEFAULT_MAX_GROUPS: usize = 8;

const CHECKPOINT_MAGIC: &[u8; 8] = b"MPCKPT\0\0";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_channels: usize,
    /// Square input resolution.
    pub input_size: usize,
    /// Output channels of each conv stage.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_groups")]
    pub max_groups: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_groups() -> usize {
    DEFAULT_MAX_GROUPS
}

impl Default for Architecture {
    /// Three stages of 16/32/64 channels on 32x32 RGB input, four classes.
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_size: 32,
            widths: vec![16, 32, 64],
            num_classes: 4,
            kernel_size: 3,
            max_groups: DEFAULT_MAX_GROUPS,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("architecture: {m}")));
        if self.widths.len() < 2 {
            return fail(format!("need at least 2 conv stages, got {}", self.widths.len()));
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.input_channels == 0 || self.widths.contains(&0) || self.max_groups == 0 {
            return fail("zero channel or group count".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel size {} must be odd", self.kernel_size));
        }
        let shrink = 1usize << (self.widths.len() - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(shrink) {
            return fail(format!(
                "input size {} must be divisible by {shrink}",
                self.input_size
            ));
        }
        Ok(())
    }

    /// Group count used for a stage with `channels` channels.
    pub fn groups(&self, channels: usize) -> usize {
        let mut g = self.max_groups.min(channels);
        while !channels.is_multiple_of(g) {
            g -= 1;
        }
        g
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_size, self.input_size]
    }

    /// Parameter names and shapes in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let mut out = Vec::new();
        let mut cin = self.input_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("conv{i}.kernel"), vec![w, cin, k, k]));
            out.push((format!("gn{i}.scale"), vec![w]));
            out.push((format!("gn{i}.offset"), vec![w]));
            cin = w;
        }
        out.push(("head.weight".into(), vec![self.num_classes, cin]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn graph(&self) -> Result<Graph> {
        let mut b = GraphBuilder::new();
        let x = b.input("x", true);
        let labels = b.input("labels", false);
        let mut h = x;
        let mut size = self.input_size;
        let last = self.widths.len() - 1;
        for (i, &w) in self.widths.iter().enumerate() {
            let kernel = b.parameter(format!("conv{i}.kernel"));
            let scale = b.parameter(format!("gn{i}.scale"));
            let offset = b.parameter(format!("gn{i}.offset"));
            let ws = b.push(
                format!("ws{i}"),
                Op::WeightStandardize { eps: WEIGHT_STD_EPS },
                &[kernel],
            )?;
            h = b.push(format!("conv{i}"), Op::Conv2d, &[h, ws])?;
            h = b.push(
                format!("gn{i}"),
                Op::GroupNorm {
                    groups: self.groups(w),
                    eps: GROUP_NORM_EPS,
                },
                &[h, scale, offset],
            )?;
            h = b.push(format!("relu{i}"), Op::Relu, &[h])?;
            let window = if i == last { size } else { 2 };
            h = b.push(format!("pool{i}"), Op::AvgPool { window }, &[h])?;
            size /= window;
        }
        let weight = b.parameter("head.weight");
        let bias = b.parameter("head.bias");
        let logits = b.push("logits", Op::Dense, &[h, weight, bias])?;
        let loss = b.push("loss", Op::SoftmaxCrossEntropy, &[logits, labels])?;
        b.build(loss)
    }
}

/// Named parameter tensors in canonical order, tied to their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.parameter_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(name, format!("{:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(Self {
            arch,
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Whether weight decay applies: conv kernels and the dense weight.
    pub fn is_kernel(name: &str) -> bool {
        name.ends_with(".kernel") || name == "head.weight"
    }

    pub fn to_bytes(&self, provenance: Option<&str>) -> Result<Vec<u8>> {
        let manifest = CheckpointManifest {
            architecture: self.arch.clone(),
            parameters: self
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect(),
            config_hash: provenance.map(str::to_string),
        };
        let payload: Vec<f64> = self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
        io::encode(CHECKPOINT_MAGIC, &manifest, &payload)
    }

    pub fn from_bytes(origin: &Path, bytes: &[u8]) -> Result<(Self, Option<String>)> {
        let (manifest, payload): (CheckpointManifest, Vec<f64>) =
            io::decode(origin, CHECKPOINT_MAGIC, bytes)?;
        let mut tensors = Vec::with_capacity(manifest.parameters.len());
        let mut at = 0;
        for (name, shape) in &manifest.parameters {
            let n: usize = shape.iter().product();
            let data = payload
                .get(at..at + n)
                .ok_or_else(|| Error::format(origin, format!("payload too short for {name}")))?;
            tensors.push(
                Tensor::new(shape.clone(), data.to_vec())
                    .map_err(|e| Error::format(origin, format!("{name}: {e}")))?,
            );
            at += n;
        }
        if at != payload.len() {
            return Err(Error::format(origin, "trailing payload"));
        }
        let params = Self::from_tensors(manifest.architecture, tensors)
            .map_err(|e| Error::format(origin, e.to_string()))?;
        Ok((params, manifest.config_hash))
    }

    pub fn save(&self, path: &Path, provenance: Option<&str>) -> Result<()> {
        io::write_file(path, &self.to_bytes(provenance)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        Self::from_bytes(path, &io::read_file(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    architecture: Architecture,
    parameters: Vec<(String, Vec<usize>)>,
    config_hash: Option<String>,
}

/// Deterministic initialization: he-normal conv kernels, glorot-uniform head,
/// unit group-norm scale and zero offsets/bias.
pub fn build_model(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = arch
        .parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".kernel") {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            } else if name == "head.weight" {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            } else if name.ends_with(".scale") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            Tensor::from_parts(shape, data)
        })
        .collect();
    ModelParams::from_tensors(arch.clone(), tensors)
}

/// Per-sample forward and backward pass counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub forward: u64,
    pub backward: u64,
}

impl Add for CostCounters {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            forward: self.forward + o.forward,
            backward: self.backward + o.backward,
        }
    }
}

impl Sub for CostCounters {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            forward: self.forward - o.forward,
            backward: self.backward - o.backward,
        }
    }
}

/// Which way an attacker pushes the prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Ascend cross-entropy to the true label.
    Untargeted,
    /// Ascend negated cross-entropy to a target label.
    Targeted,
}

impl Objective {
    /// Seed weight for the per-sample loss whose gradient the attacker ascends.
    pub fn weight(self) -> f64 {
        match self {
            Objective::Untargeted => 1.0,
            Objective::Targeted => -1.0,
        }
    }
}

pub struct LossGrads {
    pub losses: Vec<f64>,
    pub input: Option<Tensor>,
    pub params: Option<Vec<Tensor>>,
}

/// A reusable evaluation engine for one architecture. Holds the graph and its
/// activation cache plus pass counters; parameters are supplied per call.
pub struct Network {
    arch: Architecture,
    graph: Graph,
    counters: CostCounters,
    counting: bool,
}

impl Network {
    pub fn new(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch: arch.clone(),
            graph: arch.graph()?,
            counters: CostCounters::default(),
            counting: true,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn counters(&self) -> CostCounters {
        self.counters
    }

    /// Suspends or resumes pass counting (used for bookkeeping-only passes).
    pub fn set_counting(&mut self, on: bool) {
        self.counting = on;
    }

    fn count(&mut self, n: usize, backward: bool) {
        if self.counting {
            self.counters.forward += n as u64;
            if backward {
                self.counters.backward += n as u64;
            }
        }
    }

    fn check_input(&self, params: &ModelParams, x: &Tensor) -> Result<usize> {
        if params.arch != self.arch {
            return Err(Error::invalid("parameters belong to a different architecture"));
        }
        let expect = self.arch.input_shape();
        match x.shape() {
            [n, c, h, w] if [*c, *h, *w] == expect => Ok(*n),
            s => Err(Error::shape("model input", format!("{s:?}, expected [N, {expect:?}]"))),
        }
    }

    fn label_tensor(&self, labels: &[usize], n: usize) -> Result<Tensor> {
        if labels.len() != n {
            return Err(Error::shape("labels", format!("{} labels for {n} inputs", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.arch.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: self.arch.num_classes,
            });
        }
        Ok(Tensor::from_parts(vec![n], labels.iter().map(|&l| l as f64).collect()))
    }

    fn feeds<'a>(params: &'a ModelParams, x: &'a Tensor, labels: &'a Tensor) -> Vec<(&'a str, &'a Tensor)> {
        let mut feeds: Vec<(&str, &Tensor)> = params.iter().collect();
        feeds.push(("x", x));
        feeds.push(("labels", labels));
        feeds
    }

    pub fn logits(&mut self, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
        let n = self.check_input(params, x)?;
        let dummy = Tensor::zeros(&[n]);
        let out = self.graph.infer(&Self::feeds(params, x, &dummy), "logits")?;
        self.count(n, false);
        Ok(out)
    }

    /// Per-sample cross-entropy, forward only.
    pub fn losses(&mut self, params: &ModelParams, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let n = self.check_input(params, x)?;
        let labels = self.label_tensor(labels, n)?;
        let out = self.graph.infer(&Self::feeds(params, x, &labels), "loss")?;
        self.count(n, false);
        Ok(out.into_data())
    }

    /// Per-sample cross-entropy plus gradients of `sum_i weights[i] * loss_i`.
    pub fn loss_and_grads(
        &mut self,
        params: &ModelParams,
        x: &Tensor,
        labels: &[usize],
        weights: &[f64],
        request: GradRequest,
    ) -> Result<LossGrads> {
        let n = self.check_input(params, x)?;
        let labels = self.label_tensor(labels, n)?;
        if weights.len() != n {
            return Err(Error::shape("loss weights", format!("{} weights for {n} inputs", weights.len())));
        }
        let losses = self
            .graph
            .forward(&Self::feeds(params, x, &labels))?
            .data()
            .to_vec();
        let seed = Tensor::from_parts(vec![n], weights.to_vec());
        let mut grads = self.graph.backward(&seed, request)?;
        self.count(n, true);
        let input = if request.inputs { grads.take("x") } else { None };
        let params = if request.parameters {
            Some(
                params
                    .names()
                    .iter()
                    .map(|name| grads.take(name).expect("parameter gradient requested"))
                    .collect(),
            )
        } else {
            None
        };
        Ok(LossGrads {
            losses,
            input,
            params,
        })
    }

    pub fn bind<'a>(&'a mut self, params: &'a ModelParams) -> ModelRef<'a> {
        ModelRef { net: self, params }
    }
}

/// What the attack and training code needs from a classifier. Implemented by
/// [`ModelRef`]; tests substitute closed-form stubs.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// Per-sample training loss (cross-entropy to `labels`).
    fn losses(&mut self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>>;

    /// Per-sample losses and the input gradient of `sum_i weights[i] * loss_i`.
    fn input_gradient(&mut self, x: &Tensor, labels: &[usize], weights: &[f64]) -> Result<(Vec<f64>, Tensor)>;

    fn logits(&mut self, x: &Tensor) -> Result<Tensor>;

    fn predict(&mut self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        let c = logits.shape()[1];
        Ok(logits.data().chunks(c).map(argmax).collect())
    }
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub struct ModelRef<'a> {
    net: &'a mut Network,
    params: &'a ModelParams,
}

impl ModelRef<'_> {
    pub fn counters(&self) -> CostCounters {
        self.net.counters()
    }
}

impl Classifier for ModelRef<'_> {
    fn num_classes(&self) -> usize {
        self.params.num_classes()
    }

    fn losses(&mut self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        self.net.losses(self.params, x, labels)
    }

    fn input_gradient(&mut self, x: &Tensor, labels: &[usize], weights: &[f64]) -> Result<(Vec<f64>, Tensor)> {
        let out = self
            .net
            .loss_and_grads(self.params, x, labels, weights, GradRequest::INPUTS)?;
        Ok((out.losses, out.input.expect("input gradient requested")))
    }

    fn logits(&mut self, x: &Tensor) -> Result<Tensor> {
        self.net.logits(self.params, x)
    }
}

/// A network bundled with its own parameters.
pub struct Model {
    net: Network,
    params: ModelParams,
}

impl Model {
    pub fn new(params: ModelParams) -> Result<Self> {
        Ok(Self {
            net: Network::new(params.architecture())?,
            params,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn counters(&self) -> CostCounters {
        self.net.counters()
    }

    pub fn set_counting(&mut self, on: bool) {
        self.net.set_counting(on);
    }
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        self.params.num_classes()
    }

    fn losses(&mut self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        self.net.bind(&self.params).losses(x, labels)
    }

    fn input_gradient(&mut self, x: &Tensor, labels: &[usize], weights: &[f64]) -> Result<(Vec<f64>, Tensor)> {
        self.net.bind(&self.params).input_gradient(x, labels, weights)
    }

    fn logits(&mut self, x: &Tensor) -> Result<Tensor> {
        self.net.bind(&self.params).logits(x)
    }
}

/// Argmax predictions of `params` on a batch.
pub fn predict(params: &ModelParams, x: &Tensor) -> Result<Vec<usize>> {
    let mut net = Network::new(params.architecture())?;
    net.bind(params).predict(x)
}
