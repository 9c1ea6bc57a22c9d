//! One function per acceptance criterion. Each returns whether it passed and
//! the measured numbers, so the acceptance runner can print a line per
//! criterion and the focused test files can assert on the cheap ones.

use std::path::Path;
use std::time::Instant;

use metapatch::attacks::{AttackConfig, LossMode, TransferKind};
use metapatch::data::{synth_dataset, Dataset};
use metapatch::evaluation::{self, desk_grid};
use metapatch::meta::{self, init_meta_set, InitMode, MetaSet, ALPHA_MAX, ALPHA_MIN};
use metapatch::model::{Architecture, Classifier, Model, ModelParams, Network};
use metapatch::perturbation::{Patch, PerturbationSpec, Placement};
use metapatch::training::{train, TrainConfig, Trainer};
use metapatch::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Linear scorer on flattened pixels with softmax cross-entropy. Losses are
/// computed sample by sample, independently of the library model.
pub struct LinearStub {
    pub weights: Vec<Vec<f64>>,
}

impl LinearStub {
    pub fn random(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weights: (0..classes)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        }
    }

    fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weights.iter().map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }
}

fn cross_entropy(s: &[f64], y: usize) -> f64 {
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - s[y]
}

impl Classifier for LinearStub {
    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn losses(&mut self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let per = x.len() / labels.len();
        Ok(x.data()
            .chunks(per)
            .zip(labels)
            .map(|(xi, &y)| cross_entropy(&self.scores(xi), y))
            .collect())
    }

    fn input_gradient(&mut self, x: &Tensor, labels: &[usize], weights: &[f64]) -> Result<(Vec<f64>, Tensor)> {
        let per = x.len() / labels.len();
        let mut grad = Vec::with_capacity(x.len());
        let mut losses = Vec::new();
        for ((xi, &y), &w) in x.data().chunks(per).zip(labels).zip(weights) {
            let s = self.scores(xi);
            losses.push(cross_entropy(&s, y));
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
            let p: Vec<f64> = s.iter().map(|v| (v - max).exp() / z).collect();
            for d in 0..per {
                let g: f64 = (0..s.len())
                    .map(|c| (p[c] - f64::from(u8::from(c == y))) * self.weights[c][d])
                    .sum();
                grad.push(w * g);
            }
        }
        Ok((losses, Tensor::new(x.shape().to_vec(), grad)?))
    }

    fn logits(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let per = x.len() / n;
        let data: Vec<f64> = x.data().chunks(per).flat_map(|xi| self.scores(xi)).collect();
        Tensor::new(vec![n, self.weights.len()], data)
    }
}

pub fn small_arch() -> Architecture {
    Architecture {
        input_channels: 3,
        input_size: 16,
        widths: vec![4, 8, 8],
        num_classes: 4,
        kernel_size: 3,
        max_groups: 4,
    }
}

pub fn small_spec() -> PerturbationSpec {
    PerturbationSpec::Patch {
        channels: 3,
        height: 4,
        width: 4,
        max_dy: 4,
        max_dx: 4,
    }
}

pub fn desk_patch_spec() -> PerturbationSpec {
    PerturbationSpec::Patch {
        channels: 3,
        height: 8,
        width: 8,
        max_dy: 8,
        max_dx: 8,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- 1

pub fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = FdStats::default();
    let mut parts = Vec::new();
    let instances = 50;
    for (k, name) in OP_NAMES.iter().enumerate() {
        let mut r = rng(1000 + k as u64);
        let mut s = FdStats::default();
        for _ in 0..instances {
            let case = op_case(name, &mut r);
            s.merge(check_op_case(case, &mut r));
        }
        parts.push(format!("{name} {:.1e}", s.max_rel));
        worst.merge(s);
    }
    let mut r = rng(7);
    let mut net = FdStats::default();
    for _ in 0..instances {
        net.merge(check_network_instance(&mut r));
    }
    worst.merge(net);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.max_rel < 1e-4 && secs < 60.0 && worst.kinks * 20 <= worst.checked;
    Outcome::new(
        pass,
        format!(
            "max rel err {:.2e} (< 1e-4) over {} ops x {instances} + convnet x {instances} (params, input, patch: {:.1e}); {} coords, {} kinks skipped; {secs:.1}s (< 60s) [{}]",
            worst.max_rel,
            OP_NAMES.len(),
            net.max_rel,
            worst.checked,
            worst.kinks,
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 2

fn tiny_data(seed: u64) -> Dataset {
    synth_dataset(6, 4, 16, seed).unwrap()
}

pub fn round_robin_targets() -> (bool, String) {
    let data = tiny_data(1);
    let spec = small_spec();
    let mut r = rng(3);
    let mut ok = true;
    for p in [1, 4, 7, 64] {
        let set = init_meta_set(p, &data, InitMode::Random, &spec, (ALPHA_MIN, ALPHA_MAX), &mut r).unwrap();
        let expect: Vec<usize> = (1..=p).map(|i| i % 4).collect();
        ok &= set.targets() == expect;
    }
    (ok, "targets == i mod C for P in {1,4,7,64}".into())
}

/// Kolmogorov-Smirnov distance between the empirical distribution of
/// `ln(alpha)` and the uniform distribution on `[ln lo, ln hi]`.
pub fn log_uniform_ks(alphas: &[f64], lo: f64, hi: f64) -> f64 {
    let mut u: Vec<f64> = alphas.iter().map(|a| (a.ln() - lo.ln()) / (hi.ln() - lo.ln())).collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    u.iter()
        .enumerate()
        .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
        .fold(0.0, f64::max)
}

pub fn alpha_distribution() -> (bool, String) {
    let data = tiny_data(2);
    let spec = PerturbationSpec::Patch {
        channels: 3,
        height: 1,
        width: 1,
        max_dy: 0,
        max_dx: 0,
    };
    let set = init_meta_set(10_000, &data, InitMode::Random, &spec, (ALPHA_MIN, ALPHA_MAX), &mut rng(11)).unwrap();
    let alphas = set.alphas();
    let in_range = alphas.iter().all(|a| (ALPHA_MIN..=ALPHA_MAX).contains(a));
    let ks = log_uniform_ks(&alphas, ALPHA_MIN, ALPHA_MAX);
    (in_range && ks < 0.02, format!("alpha in [1e-4, 0.1], KS {ks:.4} (< 0.02, n=10000)"))
}

/// Brute-force selection: replays the RNG stream and evaluates every
/// candidate on its own.
pub fn select_oracle(
    set: &MetaSet,
    model: &mut dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Placement)> {
    let spec = set.spec().clone();
    let n = labels.len();
    let cands: Vec<Vec<(usize, Placement)>> = (0..n)
        .map(|_| {
            (0..trials)
                .map(|_| (rng.gen_range(0..set.len()), spec.sample_randomness(rng)))
                .collect()
        })
        .collect();
    if trials == 1 {
        return cands.into_iter().map(|c| c[0]).collect();
    }
    cands
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let xi = x.slice_outer(i).unwrap();
            let mut best = 0;
            let mut best_loss = f64::NEG_INFINITY;
            for (t, &(e, r)) in c.iter().enumerate() {
                let perturbed = spec.apply(&xi, &set.entry(e).patch, r).unwrap();
                let batch = perturbed.reshape([vec![1], xi.shape().to_vec()].concat()).unwrap();
                let loss = model.losses(&batch, &labels[i..=i]).unwrap()[0];
                if loss > best_loss {
                    best = t;
                    best_loss = loss;
                }
            }
            c[best]
        })
        .collect()
}

pub fn select_matches_oracle() -> (bool, String) {
    let data = tiny_data(3);
    let spec = small_spec();
    let mut ok = true;
    let mut cases = 0;
    for seed in 0..10u64 {
        let mut r = rng(100 + seed);
        let set = init_meta_set(6, &data, InitMode::Random, &spec, (ALPHA_MIN, ALPHA_MAX), &mut r).unwrap();
        let mut stub = LinearStub::random(4, 3 * 16 * 16, &mut r);
        let idx: Vec<usize> = (0..5).map(|i| (i * 5 + seed as usize) % data.len()).collect();
        let (x, labels) = data.batch(&idx).unwrap();
        for trials in [1, 2, 5] {
            let mut a = rng(seed * 31 + trials as u64);
            let mut b = a.clone();
            let got: Vec<(usize, Placement)> = set
                .select(&mut stub, &x, &labels, trials, &mut a)
                .unwrap()
                .iter()
                .map(|s| (s.entry, s.placement))
                .collect();
            let want = select_oracle(&set, &mut stub, &x, &labels, trials, &mut b);
            ok &= got == want;
            cases += 1;
        }
    }
    (ok, format!("SELECT^F == brute-force argmax on {cases} replayed streams"))
}

pub fn reptile_exact() -> (bool, String) {
    let image = [3, 16, 16];
    let mut ok = true;
    for (spec, seed) in [(small_spec(), 1u64), (PerturbationSpec::Additive { epsilon: 0.1 }, 2)] {
        let mut r = rng(seed);
        for sigma in [0.0, 0.25, 0.5, 1.0] {
            for k in 1..=4 {
                let xi = spec.random_patch(image, &mut r);
                let finals: Vec<Patch> = (0..k).map(|_| spec.random_patch(image, &mut r)).collect();
                let refs: Vec<&Patch> = finals.iter().collect();
                let got = meta::reptile_update(&xi, &refs, sigma, &spec, image).unwrap();
                let (lo, hi) = spec.bounds();
                let want: Vec<f64> = (0..xi.data().len())
                    .map(|j| {
                        let mean = finals.iter().map(|f| f.data()[j]).sum::<f64>() / k as f64;
                        ((1.0 - sigma) * xi.data()[j] + sigma * mean).clamp(lo, hi)
                    })
                    .collect();
                ok &= got.data() == want.as_slice();
            }
        }
    }
    (ok, "REPTILE == (1-s)Xi + s*mean bit-exact".into())
}

/// UAT from a fresh trainer on a single sample: the meta patch after one
/// step must equal the patch produced by one I-FGSM step from it.
pub fn uat_degenerates() -> (bool, String) {
    let data = tiny_data(4);
    let spec = small_spec();
    let arch = small_arch();
    let config = TrainConfig {
        batch_size: 1,
        ..TrainConfig::uat(0.01)
    };
    let seed = 9;
    let mut ok = true;
    for sample in [0usize, 7, 13] {
        let mut trainer = Trainer::new(&data, &spec, &arch, &config, seed).unwrap();
        let before_params = trainer.params().clone();
        let xi0 = trainer.meta().unwrap().entry(0).patch.clone();
        // replay: meta-set construction, then the single selection draw
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        init_meta_set(1, &data, InitMode::Random, &spec, (0.01, 0.01), &mut r).unwrap();
        let _entry: usize = r.gen_range(0..1);
        let placement = spec.sample_randomness(&mut r);
        trainer.step(&[sample]).unwrap();
        let after = trainer.meta().unwrap().entry(0).patch.clone();

        let mut net = Network::new(&arch).unwrap();
        let x = data.image_tensor(sample);
        let batch = x.clone().reshape(vec![1, 3, 16, 16]).unwrap();
        let applied = spec.apply_batch(&batch, &[&xi0], &[placement]).unwrap();
        let y = data.label(sample);
        let g = net.bind(&before_params).input_gradient(&applied, &[y], &[1.0]).unwrap().1;
        let gp = spec.patch_gradient(g.data(), x.data(), &xi0, placement, [3, 16, 16]).unwrap();
        let stepped: Vec<f64> = xi0
            .data()
            .iter()
            .zip(gp.data())
            .map(|(v, d)| (v + 0.01 * if *d > 0.0 { 1.0 } else if *d < 0.0 { -1.0 } else { 0.0 }).clamp(0.0, 1.0))
            .collect();
        ok &= after.data() == stepped.as_slice();
    }
    (ok, "UAT (P=1,K=1,s=1): Xi' == xi^(1) bit-exact".into())
}

pub fn algorithm_fidelity() -> Outcome {
    let parts = [
        round_robin_targets(),
        alpha_distribution(),
        select_matches_oracle(),
        reptile_exact(),
        uat_degenerates(),
    ];
    let pass = parts.iter().all(|p| p.0);
    let detail = parts
        .iter()
        .map(|(ok, d)| format!("{}{d}", if *ok { "" } else { "FAILED " }))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(pass, detail)
}

// ---------------------------------------------------------------- 3

/// Per-sample forward and backward counts of one MAT step.
pub fn mat_step_counts(k: usize, f: usize, batch: usize) -> (u64, u64, usize) {
    let data = tiny_data(5);
    let config = TrainConfig {
        batch_size: batch,
        ..TrainConfig::mat(4, k, f, 0.5)
    };
    let mut trainer = Trainer::new(&data, &small_spec(), &small_arch(), &config, 1).unwrap();
    let idx: Vec<usize> = (0..batch).collect();
    let m = trainer.step(&idx).unwrap();
    (m.counters.forward, m.counters.backward, m.samples)
}

pub fn cost_counters() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for k in [1, 3, 5] {
        let (f1, b1, n) = mat_step_counts(k, 1, 4);
        let (f5, b5, _) = mat_step_counts(k, 5, 4);
        let n = n as u64;
        let kk = k as u64 + 1;
        ok &= f1 == kk * n && b1 == kk * n && f5 == f1 + 5 * n && b5 == b1;
        notes.push(format!("K={k}: F=1 fwd {f1} bwd {b1}, F=5 fwd {f5} bwd {b5} (n={n})"));
    }
    Outcome::new(ok, format!("(K+1) fwd+bwd per sample, F=5 adds 5 fwd: {}", notes.join("; ")))
}

// ---------------------------------------------------------------- 4

pub fn lowpass_properties() -> Outcome {
    use metapatch::attacks::{all_pass_radius, LowPass};
    let mut r = rng(21);
    let (mut idem, mut ident, mut means, mut energy) = (0.0f64, 0.0f64, 0.0f64, f64::NEG_INFINITY);
    let mut count = 0;
    for (spec, image) in [
        (desk_patch_spec(), [3, 32, 32]),
        (
            PerturbationSpec::Patch {
                channels: 3,
                height: 5,
                width: 7,
                max_dy: 0,
                max_dx: 0,
            },
            [3, 16, 16],
        ),
        (PerturbationSpec::Additive { epsilon: 20.0 / 255.0 }, [3, 16, 16]),
    ] {
        let shape = spec.patch_shape(image);
        for _ in 0..30 {
            let x = spec.random_patch(image, &mut r);
            let u = r.gen_range(0.0..(shape[1].max(shape[2]) as f64));
            let lp = LowPass::new(&shape, u).unwrap();
            let once = lp.apply(&x, &spec);
            let twice = lp.apply(&once, &spec);
            idem = idem.max(once.tensor().max_abs_diff(twice.tensor()));
            let e_in = x.tensor().sum_squares();
            energy = energy.max(once.tensor().sum_squares() - e_in);
            let all = LowPass::new(&shape, all_pass_radius(shape[1], shape[2])).unwrap();
            ident = ident.max(all.apply(&x, &spec).tensor().max_abs_diff(x.tensor()));
            let zero = LowPass::new(&shape, 0.0).unwrap().apply(&x, &spec);
            let plane = shape[1] * shape[2];
            for (cin, cout) in x.data().chunks(plane).zip(zero.data().chunks(plane)) {
                let m = cin.iter().sum::<f64>() / plane as f64;
                means = means.max(cout.iter().map(|v| (v - m).abs()).fold(0.0, f64::max));
            }
            count += 1;
        }
    }
    let pass = idem < 1e-6 && ident < 1e-6 && means < 1e-6 && energy <= 1e-9;
    Outcome::new(
        pass,
        format!(
            "{count} instances: idempotence {idem:.1e}, all-pass {ident:.1e}, u=0 means {means:.1e} (all < 1e-6); max energy increase {energy:.1e} (<= 0)"
        ),
    )
}

// ---------------------------------------------------------------- 5, 6

pub struct DeskRun {
    pub clean: f64,
    pub min: f64,
}

pub fn desk_data(seed: u64) -> (Dataset, Dataset) {
    synth_dataset(125, 4, 32, seed).unwrap().split(seed).unwrap()
}

pub fn mat_desk_config() -> TrainConfig {
    TrainConfig {
        init_mode: InitMode::Data,
        ..TrainConfig::mat(64, 5, 5, 0.25)
    }
}

/// Trains with `config` and evaluates the model on the 12-configuration grid.
pub fn desk_run(config: &TrainConfig, spec: &PerturbationSpec, seed: u64, label: &str) -> DeskRun {
    let (train_set, eval_set) = desk_data(seed);
    let out = train(&train_set, spec, &Architecture::default(), config, seed).unwrap();
    let grid = desk_grid(spec, [3, 32, 32], 500, 32);
    assert_eq!(grid.len(), 12);
    let params: ModelParams = out.params;
    let g = evaluation::grid_eval(&|| Model::new(params.clone()), &train_set, &eval_set, spec, &grid, seed, 1, label)
        .unwrap();
    DeskRun {
        clean: g.report.clean_accuracy,
        min: g.report.min.expect("every grid attack succeeded"),
    }
}

pub const DESK_SEEDS: [u64; 3] = [0, 1, 2];

pub fn desk_ordering() -> Outcome {
    let start = Instant::now();
    let spec = desk_patch_spec();
    let mut std_runs = Vec::new();
    let mut mat_runs = Vec::new();
    for seed in DESK_SEEDS {
        std_runs.push(desk_run(&TrainConfig::standard(), &spec, seed, "standard"));
        mat_runs.push(desk_run(&mat_desk_config(), &spec, seed, "mat"));
    }
    let secs = start.elapsed().as_secs_f64();
    let med = |runs: &[DeskRun], f: fn(&DeskRun) -> f64| median(runs.iter().map(f).collect());
    let std_clean = med(&std_runs, |r| r.clean);
    let std_min = med(&std_runs, |r| r.min);
    let mat_clean = med(&mat_runs, |r| r.clean);
    let mat_min = med(&mat_runs, |r| r.min);
    let a = std_clean >= 0.90;
    let b = std_min <= 0.50;
    let c = mat_min >= std_min + 0.20;
    let d = (mat_clean - std_clean).abs() <= 0.05;
    let t = secs < 3600.0;
    let per_seed: Vec<String> = std_runs
        .iter()
        .zip(&mat_runs)
        .zip(DESK_SEEDS)
        .map(|((s, m), seed)| format!("seed {seed}: std {:.2}/{:.2} mat {:.2}/{:.2}", s.clean, s.min, m.clean, m.min))
        .collect();
    Outcome::new(
        a && b && c && d && t,
        format!(
            "median over 3 seeds: (a) std clean {std_clean:.3} >= 0.90 {}; (b) std min {std_min:.3} <= 0.50 {}; (c) MAT min {mat_min:.3} >= std min + 0.20 {}; (d) |MAT clean {mat_clean:.3} - std clean| <= 0.05 {}; runtime {secs:.0}s < 3600s {} [{}]",
            mark(a),
            mark(b),
            mark(c),
            mark(d),
            mark(t),
            per_seed.join("; ")
        ),
    )
}

pub fn at_desk_config() -> TrainConfig {
    TrainConfig::at(5)
}

pub fn additive_ordering() -> Outcome {
    let start = Instant::now();
    let spec = PerturbationSpec::Additive { epsilon: 20.0 / 255.0 };
    let mut at_min = Vec::new();
    let mut mat_min = Vec::new();
    let mut per_seed = Vec::new();
    for seed in DESK_SEEDS {
        let a = desk_run(&at_desk_config(), &spec, seed, "at");
        let m = desk_run(&mat_desk_config(), &spec, seed, "mat");
        per_seed.push(format!("seed {seed}: AT {:.2}/{:.2} MAT {:.2}/{:.2}", a.clean, a.min, m.clean, m.min));
        at_min.push(a.min);
        mat_min.push(m.min);
    }
    let (a, m) = (median(at_min), median(mat_min));
    Outcome::new(
        m >= a,
        format!(
            "eps=20/255, median over 3 seeds: MAT min {m:.3} >= AT min {a:.3}; {:.0}s [{}]",
            start.elapsed().as_secs_f64(),
            per_seed.join("; ")
        ),
    )
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

// ---------------------------------------------------------------- 7

pub fn tiny_run_config(dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "seed": 5,
        "data": {"kind": "synthetic", "per_class": 10, "classes": 4, "resolution": 16, "seed": 5},
        "architecture": {"input_channels": 3, "input_size": 16, "widths": [4, 8, 8], "num_classes": 4, "max_groups": 4},
        "perturbation": {"mode": "patch", "channels": 3, "height": 4, "width": 4, "max_dy": 4, "max_dx": 4},
        "train": {
            "method": "mat", "epochs": 2, "batch_size": 8, "learning_rate": 0.05,
            "p": 4, "k": 2, "f": 2, "sigma": 0.5, "init_mode": "data",
            "transfer": {"init": "random", "steps": 3, "step_size": 0.05, "batch_size": 8}
        },
        "attack": {"grid": [
            {"init": "random", "steps": 4, "step_size": 0.05, "batch_size": 8},
            {"init": "data", "steps": 4, "step_size": 0.01, "momentum": 0.9, "batch_size": 8, "candidates": 3},
            {"init": "random", "steps": 4, "step_size": 0.05, "cutoff": 2.0, "batch_size": 8}
        ]},
        "output": dir.join("out"),
    })
}

pub fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["metapatch"];
    full.extend_from_slice(args);
    metapatch::cli::run(full)
}

pub fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg_path = root.join("run.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&tiny_run_config(root)).unwrap()).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let dir = |n: &str| root.join(n).to_string_lossy().into_owned();

    let mut codes = Vec::new();
    codes.push(cli(&["train", cfg, "--output", &dir("train_a")]));
    codes.push(cli(&["train", cfg, "--output", &dir("train_b")]));
    let ta = dir_snapshot(&root.join("train_a"));
    let tb = dir_snapshot(&root.join("train_b"));
    let train_same = ta == tb && ta.iter().any(|(n, _)| n == "checkpoint.bin") && ta.iter().any(|(n, _)| n == "meta.bin");

    let ckpt = root.join("train_a/checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();
    codes.push(cli(&["attack", cfg, "--checkpoint", ckpt, "--deterministic", "--output", &dir("atk_a")]));
    codes.push(cli(&["attack", cfg, "--checkpoint", ckpt, "--deterministic", "--output", &dir("atk_b")]));
    codes.push(cli(&["attack", cfg, "--checkpoint", ckpt, "--jobs", "3", "--output", &dir("atk_p")]));
    let aa = dir_snapshot(&root.join("atk_a"));
    let ab = dir_snapshot(&root.join("atk_b"));
    let attack_same = aa == ab && !aa.is_empty();

    let rows = |d: &str| {
        let r = evaluation::read_report(&root.join(d).join("report.json")).unwrap();
        let mut rows: Vec<String> = r.rows.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        rows.sort();
        let mut transfer: Vec<String> = r.transfer.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        transfer.sort();
        (rows, transfer, r.clean_accuracy.to_bits(), r.min.map(f64::to_bits))
    };
    let parallel_same = rows("atk_a") == rows("atk_p");
    let codes_ok = codes.iter().all(|&c| c == 0);
    Outcome::new(
        codes_ok && train_same && attack_same && parallel_same,
        format!(
            "exit codes {codes:?}; train artifacts identical: {train_same} ({} files); sequential attack identical: {attack_same} ({} files); --jobs 3 report equal up to row order: {parallel_same}",
            ta.len(),
            aa.len()
        ),
    )
}

// ---------------------------------------------------------------- 8

pub fn transfer_schedule() -> Outcome {
    let data = tiny_data(8);
    let config = TrainConfig {
        epochs: 10,
        batch_size: 8,
        transfer: Some(AttackConfig {
            init: InitMode::Random,
            steps: 2,
            step_size: 0.05,
            momentum: 0.0,
            total_decay: 0.01,
            cutoff: None,
            batch_size: 8,
            loss_mode: LossMode::Untargeted,
            candidates: 8,
        }),
        ..TrainConfig::mat(4, 1, 1, 0.5)
    };
    let out = train(&data, &small_spec(), &small_arch(), &config, 3).unwrap();
    let runs: Vec<(usize, TransferKind, bool)> = out
        .history
        .iter()
        .flat_map(|r| r.transfer.iter().map(move |t| (r.epoch, t.kind, t.random_init)))
        .collect();
    let seeded: Vec<usize> = runs.iter().filter(|r| r.1 == TransferKind::PoolSeeded).map(|r| r.0).collect();
    let restarts: Vec<usize> = runs.iter().filter(|r| r.1 == TransferKind::RandomRestart).map(|r| r.0).collect();
    let pass = seeded == (1..=10).collect::<Vec<_>>() && restarts == vec![5, 10] && out.transfer_pool.len() == 12;
    Outcome::new(
        pass,
        format!(
            "10 epochs: {} pool-seeded attacks (epochs {:?}), {} random restarts (epochs {:?}), pool size {}",
            seeded.len(),
            seeded,
            restarts.len(),
            restarts,
            out.transfer_pool.len()
        ),
    )
}
