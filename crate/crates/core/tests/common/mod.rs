//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod criteria;

use metapatch::graph::{GradRequest, Graph, GraphBuilder, Op, Value};
use metapatch::model::{Architecture, ModelParams, Network};
use metapatch::perturbation::{Patch, PerturbationSpec, Placement};
use metapatch::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Entries with both gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdStats {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates where the two one-sided differences disagree, meaning the
    /// step straddles a non-differentiable point (ReLU kink); not compared.
    pub kinks: usize,
}

impl FdStats {
    pub fn merge(&mut self, o: FdStats) {
        self.max_rel = self.max_rel.max(o.max_rel);
        self.checked += o.checked;
        self.kinks += o.kinks;
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn fd_compare(x: &mut [f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> FdStats {
    let mut stats = FdStats::default();
    let f0 = f(x);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(x);
        x[i] = orig - FD_STEP;
        let down = f(x);
        x[i] = orig;
        let central = (up - down) / (2.0 * FD_STEP);
        let fwd = (up - f0) / FD_STEP;
        let bwd = (f0 - down) / FD_STEP;
        if (fwd - bwd).abs() > 1e-3 * central.abs().max(1.0) {
            stats.kinks += 1;
            continue;
        }
        stats.max_rel = stats.max_rel.max(rel_err(analytic[i], central));
        stats.checked += 1;
    }
    stats
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// A single-op graph with named leaves, the tensors to feed, and which
/// leaves are differentiable.
pub struct OpCase {
    pub graph: Graph,
    pub feeds: Vec<(String, Tensor)>,
    pub differentiable: Vec<bool>,
}

fn case(op: Op, leaves: Vec<(&str, Tensor, bool)>) -> OpCase {
    let mut b = GraphBuilder::new();
    let vals: Vec<Value> = leaves
        .iter()
        .map(|(n, _, d)| if *d { b.parameter(*n) } else { b.input(*n, false) })
        .collect();
    let y = b.push("y", op, &vals).unwrap();
    OpCase {
        graph: b.build(y).unwrap(),
        feeds: leaves.iter().map(|(n, t, _)| (n.to_string(), t.clone())).collect(),
        differentiable: leaves.iter().map(|l| l.2).collect(),
    }
}

pub const OP_NAMES: [&str; 9] = [
    "conv2d",
    "dense",
    "group_norm",
    "weight_standardize",
    "relu",
    "avg_pool",
    "softmax_cross_entropy",
    "add",
    "scale",
];

/// A random instance of primitive `name`.
pub fn op_case(name: &str, rng: &mut ChaCha8Rng) -> OpCase {
    let n = rng.gen_range(1..=3);
    match name {
        "conv2d" => {
            let (c, o, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(3..=6), rng.gen_range(3..=6));
            let k = if rng.gen_bool(0.5) { 1 } else { 3 };
            case(Op::Conv2d, vec![
                ("x", uniform(rng, &[n, c, h, w], -1.0, 1.0), true),
                ("k", uniform(rng, &[o, c, k, k], -1.0, 1.0), true),
            ])
        }
        "dense" => {
            let (f, o) = (rng.gen_range(1..=6), rng.gen_range(1..=4));
            case(Op::Dense, vec![
                ("x", uniform(rng, &[n, f], -1.0, 1.0), true),
                ("w", uniform(rng, &[o, f], -1.0, 1.0), true),
                ("b", uniform(rng, &[o], -1.0, 1.0), true),
            ])
        }
        "group_norm" => {
            let groups = rng.gen_range(1..=3);
            let c = groups * rng.gen_range(1..=2);
            let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            case(Op::GroupNorm { groups, eps: 1e-5 }, vec![
                ("x", uniform(rng, &[n, c, h, w], -1.0, 1.0), true),
                ("scale", uniform(rng, &[c], 0.5, 1.5), true),
                ("offset", uniform(rng, &[c], -0.5, 0.5), true),
            ])
        }
        "weight_standardize" => {
            let (o, c) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            case(Op::WeightStandardize { eps: 1e-10 }, vec![(
                "k",
                uniform(rng, &[o, c, 3, 3], -1.0, 1.0),
                true,
            )])
        }
        "relu" => case(Op::Relu, vec![("x", uniform(rng, &[n, 7], -1.0, 1.0), true)]),
        "avg_pool" => {
            let window = rng.gen_range(1..=3);
            let c = rng.gen_range(1..=2);
            let side = window * rng.gen_range(1..=3);
            case(Op::AvgPool { window }, vec![(
                "x",
                uniform(rng, &[n, c, side, side], -1.0, 1.0),
                true,
            )])
        }
        "softmax_cross_entropy" => {
            let c = rng.gen_range(2..=5);
            let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(0..c) as f64).collect();
            case(Op::SoftmaxCrossEntropy, vec![
                ("logits", uniform(rng, &[n, c], -3.0, 3.0), true),
                ("labels", Tensor::new(vec![n], labels).unwrap(), false),
            ])
        }
        "add" => case(Op::Add, vec![
            ("a", uniform(rng, &[n, 4], -1.0, 1.0), true),
            ("b", uniform(rng, &[n, 4], -1.0, 1.0), true),
        ]),
        "scale" => {
            let s = rng.gen_range(-2.0..2.0);
            case(Op::Scale(s), vec![("x", uniform(rng, &[n, 5], -1.0, 1.0), true)])
        }
        other => panic!("unknown op {other}"),
    }
}

/// Checks every differentiable leaf of `case` against central differences of
/// `sum(weights * output)` for random weights.
pub fn check_op_case(mut case: OpCase, rng: &mut ChaCha8Rng) -> FdStats {
    let feeds: Vec<(&str, &Tensor)> = case.feeds.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let out_shape = case.graph.forward(&feeds).unwrap().shape().to_vec();
    let weights = uniform(rng, &out_shape, -1.0, 1.0);
    let mut grads = case.graph.backward(&weights, GradRequest::ALL).unwrap();
    let mut stats = FdStats::default();
    for leaf in 0..case.feeds.len() {
        if !case.differentiable[leaf] {
            continue;
        }
        let name = case.feeds[leaf].0.clone();
        let analytic = grads.take(&name).expect("gradient for leaf");
        let mut x = case.feeds[leaf].1.data().to_vec();
        let shape = case.feeds[leaf].1.shape().to_vec();
        let others = case.feeds.clone();
        let graph = &mut case.graph;
        let s = fd_compare(&mut x, analytic.data(), |v| {
            let moved = Tensor::new(shape.clone(), v.to_vec()).unwrap();
            let feeds: Vec<(&str, &Tensor)> = others
                .iter()
                .map(|(n, t)| (n.as_str(), if *n == name { &moved } else { t }))
                .collect();
            let out = graph.forward(&feeds).unwrap();
            out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        });
        stats.merge(s);
    }
    stats
}

/// A small three-stage convnet used for end-to-end gradient checks.
pub fn tiny_arch() -> Architecture {
    Architecture {
        input_channels: 3,
        input_size: 8,
        widths: vec![4, 4, 6],
        num_classes: 3,
        kernel_size: 3,
        max_groups: 2,
    }
}

pub fn random_params(arch: &Architecture, rng: &mut ChaCha8Rng) -> ModelParams {
    let tensors = arch
        .parameter_shapes()
        .iter()
        .map(|(name, shape)| {
            if name.ends_with(".scale") {
                uniform(rng, shape, 0.5, 1.5)
            } else {
                uniform(rng, shape, -0.5, 0.5)
            }
        })
        .collect();
    ModelParams::from_tensors(arch.clone(), tensors).unwrap()
}

/// End-to-end check of parameter, input and patch gradients of the weighted
/// per-sample loss on one random network instance.
pub fn check_network_instance(rng: &mut ChaCha8Rng) -> FdStats {
    let arch = tiny_arch();
    let params = random_params(&arch, rng);
    let mut net = Network::new(&arch).unwrap();
    let n = 2;
    let x = uniform(rng, &[n, 3, 8, 8], 0.0, 1.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let objective = |net: &mut Network, p: &ModelParams, x: &Tensor| -> f64 {
        net.losses(p, x, &labels)
            .unwrap()
            .iter()
            .zip(&weights)
            .map(|(l, w)| l * w)
            .sum()
    };
    let g = net.loss_and_grads(&params, &x, &labels, &weights, GradRequest::ALL).unwrap();
    let mut stats = FdStats::default();

    let pg = g.params.unwrap();
    for (idx, analytic) in pg.iter().enumerate() {
        let mut vals = params.tensors()[idx].data().to_vec();
        let s = fd_compare(&mut vals, analytic.data(), |v| {
            let mut tensors = params.tensors().to_vec();
            tensors[idx] = Tensor::new(tensors[idx].shape().to_vec(), v.to_vec()).unwrap();
            let p = ModelParams::from_tensors(arch.clone(), tensors).unwrap();
            objective(&mut net, &p, &x)
        });
        stats.merge(s);
    }

    let gx = g.input.unwrap();
    let mut xv = x.data().to_vec();
    stats.merge(fd_compare(&mut xv, gx.data(), |v| {
        objective(&mut net, &params, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap())
    }));

    // Patch gradient: loss of the patched batch as a function of the patch.
    let spec = PerturbationSpec::Patch {
        channels: 3,
        height: 3,
        width: 3,
        max_dy: 2,
        max_dx: 2,
    };
    let image = [3, 8, 8];
    let patch = Patch::new(uniform(rng, &[3, 3, 3], 0.05, 0.95), &spec, image).unwrap();
    let placements: Vec<Placement> = (0..n)
        .map(|_| Placement {
            dy: rng.gen_range(-2..=2),
            dx: rng.gen_range(-2..=2),
        })
        .collect();
    let refs = vec![&patch; n];
    let xp = spec.apply_batch(&x, &refs, &placements).unwrap();
    let g = net.loss_and_grads(&params, &xp, &labels, &weights, GradRequest::INPUTS).unwrap();
    let gx = g.input.unwrap();
    let per = 3 * 8 * 8;
    let mut analytic = vec![0.0; patch.data().len()];
    for i in 0..n {
        let gi = spec
            .patch_gradient(&gx.data()[i * per..(i + 1) * per], &x.data()[i * per..(i + 1) * per], &patch, placements[i], image)
            .unwrap();
        for (a, b) in analytic.iter_mut().zip(gi.data()) {
            *a += b;
        }
    }
    let mut pv = patch.data().to_vec();
    stats.merge(fd_compare(&mut pv, &analytic, |v| {
        let p = Patch::new(Tensor::new(vec![3, 3, 3], v.to_vec()).unwrap(), &spec, image).unwrap();
        let refs = vec![&p; n];
        let xp = spec.apply_batch(&x, &refs, &placements).unwrap();
        objective(&mut net, &params, &xp)
    }));
    stats
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
