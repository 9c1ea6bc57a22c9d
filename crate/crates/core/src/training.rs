//! Outer training loop. Meta adversarial training and its baselines share one
//! step: standard training skips the attack, AT starts every sample from a
//! fresh random patch with a zero REPTILE rate, UAT is a single patch with
//! one I-FGSM step and a REPTILE rate of one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, TransferKind};
use crate::data::{splitmix64, Dataset};
use crate::error::{Error, Result};
use crate::graph::GradRequest;
use crate::meta::{self, InitMode, MetaSet, ALPHA_MAX, ALPHA_MIN};
use crate::model::{argmax, build_model, Architecture, CostCounters, ModelParams, Network, Objective};
use crate::perturbation::{Patch, PerturbationSpec, Placement};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Standard,
    At,
    Uat,
    Mat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaPolicy {
    /// `ln(alpha)` uniform on `[ln(min), ln(max)]`.
    LogUniform { min: f64, max: f64 },
    Fixed { value: f64 },
}

impl AlphaPolicy {
    fn range(self) -> (f64, f64) {
        match self {
            AlphaPolicy::LogUniform { min, max } => (min, max),
            AlphaPolicy::Fixed { value } => (value, value),
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_trials() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// L2 penalty on conv kernels and the dense weight.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// REPTILE rate.
    #[serde(default)]
    pub sigma: f64,
    /// I-FGSM iterations.
    #[serde(default)]
    pub k: usize,
    /// Meta-set size.
    #[serde(default)]
    pub p: usize,
    /// Candidates compared by selection.
    #[serde(default = "default_trials")]
    pub f: usize,
    #[serde(default = "default_init")]
    pub init_mode: InitMode,
    #[serde(default = "default_alpha")]
    pub alpha: AlphaPolicy,
    /// Whether I-FGSM pushes toward the entry's target class. Defaults to true
    /// for MAT and false for the baselines.
    #[serde(default)]
    pub targeted: Option<bool>,
    /// Attack run after every epoch by the transfer hook.
    #[serde(default)]
    pub transfer: Option<AttackConfig>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_init() -> InitMode {
    InitMode::Random
}

fn default_alpha() -> AlphaPolicy {
    AlphaPolicy::LogUniform {
        min: ALPHA_MIN,
        max: ALPHA_MAX,
    }
}

impl TrainConfig {
    /// Plain SGD; defaults: 20 epochs, batch 16, learning rate 0.066.
    pub fn standard() -> Self {
        Self {
            method: Method::Standard,
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.066,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            sigma: 0.0,
            k: 0,
            p: 0,
            f: 1,
            init_mode: InitMode::Random,
            alpha: default_alpha(),
            targeted: None,
            transfer: None,
            checkpoint_every: None,
        }
    }

    /// MAT with `p` meta-patches, `k` I-FGSM steps, `f` selection trials and REPTILE rate `sigma`.
    pub fn mat(p: usize, k: usize, f: usize, sigma: f64) -> Self {
        Self {
            method: Method::Mat,
            sigma,
            k,
            p,
            f,
            ..Self::standard()
        }
    }

    /// Fresh random start per sample, `k` I-FGSM steps, no meta-learning.
    pub fn at(k: usize) -> Self {
        Self {
            method: Method::At,
            k,
            p: 1,
            ..Self::standard()
        }
    }

    /// One shared patch, one I-FGSM step of size `alpha`, REPTILE rate one.
    pub fn uat(alpha: f64) -> Self {
        Self {
            method: Method::Uat,
            sigma: 1.0,
            k: 1,
            p: 1,
            alpha: AlphaPolicy::Fixed { value: alpha },
            ..Self::standard()
        }
    }

    pub fn is_targeted(&self) -> bool {
        self.targeted.unwrap_or(self.method == Method::Mat)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.checkpoint_every == Some(0) {
            return fail("checkpoint_every must be positive".into());
        }
        if let Some(t) = &self.transfer {
            t.validate()?;
        }
        match self.alpha {
            AlphaPolicy::LogUniform { min, max } if !(min > 0.0 && min <= max && max.is_finite()) => {
                return fail(format!("step size range [{min}, {max}] is invalid"));
            }
            AlphaPolicy::Fixed { value } if !(value > 0.0 && value.is_finite()) => {
                return fail(format!("fixed step size {value} must be positive"));
            }
            _ => {}
        }
        match self.method {
            Method::Standard => Ok(()),
            Method::At => {
                if self.sigma != 0.0 {
                    return fail(format!("AT requires sigma = 0, got {}", self.sigma));
                }
                if self.k == 0 || self.p == 0 || self.f == 0 {
                    return fail("AT requires k >= 1, p >= 1 and f >= 1".into());
                }
                Ok(())
            }
            Method::Uat => {
                if self.p != 1 || self.k != 1 || self.sigma != 1.0 {
                    return fail(format!(
                        "UAT requires p = 1, k = 1, sigma = 1 (got p = {}, k = {}, sigma = {})",
                        self.p, self.k, self.sigma
                    ));
                }
                if !matches!(self.alpha, AlphaPolicy::Fixed { .. }) {
                    return fail("UAT requires a fixed step size".into());
                }
                if self.f == 0 {
                    return fail("f must be at least 1".into());
                }
                Ok(())
            }
            Method::Mat => {
                if self.p == 0 || self.k == 0 || self.f == 0 {
                    return fail("MAT requires p >= 1, k >= 1 and f >= 1".into());
                }
                if !(self.sigma > 0.0 && self.sigma <= 1.0) {
                    return fail(format!("MAT requires 0 < sigma <= 1, got {}", self.sigma));
                }
                Ok(())
            }
        }
    }
}

/// Metrics of one outer step, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub samples: usize,
    pub learning_rate: f64,
    pub clean_loss: f64,
    pub clean_correct: usize,
    pub adversarial_loss: Option<f64>,
    /// Passes spent by this step.
    pub counters: CostCounters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub kind: TransferKind,
    pub seed: Option<usize>,
    pub random_init: bool,
    pub final_objective: f64,
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub clean_loss: f64,
    pub clean_accuracy: f64,
    pub adversarial_loss: Option<f64>,
    pub epoch_counters: CostCounters,
    pub counters: CostCounters,
    pub transfer: Vec<TransferRecord>,
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub meta: Option<MetaSet>,
    pub history: Vec<EpochRecord>,
    pub transfer_pool: Vec<Patch>,
}

/// Cosine decay from `lr0` at step 0 toward zero at `total` steps.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Seed of the transfer attack run after `epoch`, independent of the training stream.
fn transfer_seed(seed: u64, epoch: usize) -> u64 {
    splitmix64(seed ^ splitmix64(0x7472_616e_7366_6572 ^ epoch as u64))
}

fn model_seed(seed: u64) -> u64 {
    splitmix64(seed ^ 0x6d6f_6465_6c00_0000)
}

/// Training state: parameters, optimizer buffers, the meta set and the RNG stream.
pub struct Trainer<'a> {
    config: TrainConfig,
    spec: PerturbationSpec,
    dataset: &'a Dataset,
    net: Network,
    params: ModelParams,
    velocity: Vec<Vec<f64>>,
    meta: Option<MetaSet>,
    rng: ChaCha8Rng,
    seed: u64,
    epoch: usize,
    step: usize,
    pool: Vec<Patch>,
}

impl<'a> Trainer<'a> {
    /// Validates everything, builds a fresh model from `seed`, and initializes
    /// the meta set for attack-based methods.
    pub fn new(
        dataset: &'a Dataset,
        spec: &PerturbationSpec,
        arch: &Architecture,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let params = build_model(arch, model_seed(seed))?;
        Self::with_params(dataset, spec, params, config, seed)
    }

    /// Like [`Trainer::new`] but starting from given parameters.
    pub fn with_params(
        dataset: &'a Dataset,
        spec: &PerturbationSpec,
        params: ModelParams,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::invalid("training needs a non-empty dataset"));
        }
        let arch = params.architecture().clone();
        if arch.input_shape() != dataset.image_shape() || arch.num_classes != dataset.num_classes() {
            return Err(Error::Config(format!(
                "model expects {:?} inputs and {} classes, dataset has {:?} and {}",
                arch.input_shape(),
                arch.num_classes,
                dataset.image_shape(),
                dataset.num_classes()
            )));
        }
        spec.validate(dataset.image_shape())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meta = match config.method {
            Method::Standard => None,
            _ => Some(meta::init_meta_set(
                config.p,
                dataset,
                config.init_mode,
                spec,
                config.alpha.range(),
                &mut rng,
            )?),
        };
        let velocity = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(Self {
            config: config.clone(),
            spec: spec.clone(),
            dataset,
            net: Network::new(&arch)?,
            params,
            velocity,
            meta,
            rng,
            seed,
            epoch: 0,
            step: 0,
            pool: Vec::new(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn meta(&self) -> Option<&MetaSet> {
        self.meta.as_ref()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn counters(&self) -> CostCounters {
        self.net.counters()
    }

    pub fn transfer_pool(&self) -> &[Patch] {
        &self.pool
    }

    fn steps_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.config.batch_size)
    }

    fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch()
    }

    fn sgd(&mut self, grads: Vec<Tensor>, lr: f64) {
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        let names = self.params.names().to_vec();
        for (((w, g), v), name) in self
            .params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
            .zip(&names)
        {
            let decay = if ModelParams::is_kernel(name) { wd } else { 0.0 };
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = mu * *vi + gi + decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }

    /// Clean loss and correct count with pass counting suspended.
    fn clean_metrics(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f64, usize)> {
        self.net.set_counting(false);
        let logits = self.net.logits(&self.params, x);
        self.net.set_counting(true);
        let logits = logits?;
        let c = logits.shape()[1];
        let mut loss = 0.0;
        let mut correct = 0;
        for (row, &y) in logits.data().chunks(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            correct += usize::from(argmax(row) == y);
        }
        Ok((loss / labels.len() as f64, correct))
    }

    /// One outer step on the given samples: select, adapt with I-FGSM, update
    /// the model on the perturbed batch, then REPTILE-update touched entries.
    pub fn step(&mut self, indices: &[usize]) -> Result<StepMetrics> {
        let (x, labels) = self.dataset.batch(indices)?;
        let n = labels.len();
        let lr = cosine_lr(self.config.learning_rate, self.step, self.total_steps());
        let before = self.net.counters();
        let weights = vec![1.0 / n as f64; n];
        let (clean_loss, clean_correct) = self.clean_metrics(&x, &labels)?;

        let adversarial_loss = if self.config.method == Method::Standard {
            let out = self
                .net
                .loss_and_grads(&self.params, &x, &labels, &weights, GradRequest::PARAMETERS)?;
            self.sgd(out.params.expect("parameter gradients requested"), lr);
            None
        } else {
            let (selections, starts, alphas) = self.select(&x, &labels)?;
            let meta = self.meta.as_ref().expect("attack methods hold a meta set");
            let (objective, attack_labels) = if self.config.is_targeted() {
                let targets = selections.iter().map(|s| meta.entry(s.entry).target).collect();
                (Objective::Targeted, targets)
            } else {
                (Objective::Untargeted, labels.clone())
            };
            let placements: Vec<Placement> = selections.iter().map(|s| s.placement).collect();
            let finals = attacks::ifgsm(
                &mut self.net.bind(&self.params),
                &self.spec,
                &x,
                &attack_labels,
                objective,
                starts,
                &alphas,
                &placements,
                self.config.k,
            )?;
            let refs: Vec<&Patch> = finals.iter().collect();
            let perturbed = self.spec.apply_batch(&x, &refs, &placements)?;
            let out = self
                .net
                .loss_and_grads(&self.params, &perturbed, &labels, &weights, GradRequest::PARAMETERS)?;
            self.sgd(out.params.expect("parameter gradients requested"), lr);
            self.reptile(&selections, &finals)?;
            Some(out.losses.iter().sum::<f64>() / n as f64)
        };
        self.step += 1;
        Ok(StepMetrics {
            samples: n,
            learning_rate: lr,
            clean_loss,
            clean_correct,
            adversarial_loss,
            counters: self.net.counters() - before,
        })
    }

    /// Picks an entry and placement per sample plus the I-FGSM start and step size.
    fn select(&mut self, x: &Tensor, labels: &[usize]) -> Result<(Vec<meta::Selection>, Vec<Patch>, Vec<f64>)> {
        let meta = self.meta.as_ref().expect("attack methods hold a meta set");
        if self.config.method == Method::At {
            let image = self.dataset.image_shape();
            let (lo, hi) = self.config.alpha.range();
            let mut selections = Vec::with_capacity(labels.len());
            let mut starts = Vec::with_capacity(labels.len());
            let mut alphas = Vec::with_capacity(labels.len());
            for _ in labels {
                selections.push(meta::Selection {
                    entry: rand::Rng::gen_range(&mut self.rng, 0..meta.len()),
                    placement: self.spec.sample_randomness(&mut self.rng),
                });
                starts.push(self.spec.random_patch(image, &mut self.rng));
                alphas.push(meta::log_uniform(lo, hi, &mut self.rng));
            }
            return Ok((selections, starts, alphas));
        }
        let selections = meta.select(&mut self.net.bind(&self.params), x, labels, self.config.f, &mut self.rng)?;
        let starts = selections.iter().map(|s| meta.entry(s.entry).patch.clone()).collect();
        let alphas = selections.iter().map(|s| meta.entry(s.entry).alpha).collect();
        Ok((selections, starts, alphas))
    }

    /// Groups adapted patches by entry and updates each touched entry once.
    fn reptile(&mut self, selections: &[meta::Selection], finals: &[Patch]) -> Result<()> {
        let sigma = self.config.sigma;
        let meta = self.meta.as_mut().expect("attack methods hold a meta set");
        let mut touched: Vec<usize> = selections.iter().map(|s| s.entry).collect();
        touched.sort_unstable();
        touched.dedup();
        for entry in touched {
            let group: Vec<&Patch> = selections
                .iter()
                .zip(finals)
                .filter(|(s, _)| s.entry == entry)
                .map(|(_, p)| p)
                .collect();
            meta.update(entry, &group, sigma)?;
        }
        Ok(())
    }

    /// One pass over the shuffled training set, then the transfer hook if configured.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let before = self.net.counters();
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut clean, mut correct, mut adv, mut lr) = (0.0, 0, 0.0, self.config.learning_rate);
        for chunk in order.chunks(self.config.batch_size) {
            let m = self.step(chunk)?;
            clean += m.clean_loss * m.samples as f64;
            correct += m.clean_correct;
            adv += m.adversarial_loss.unwrap_or(0.0) * m.samples as f64;
            lr = m.learning_rate;
        }
        self.epoch += 1;
        let total = self.dataset.len() as f64;
        let epoch_counters = self.net.counters() - before;
        let transfer = self.transfer_hook()?;
        Ok(EpochRecord {
            epoch: self.epoch,
            learning_rate: lr,
            clean_loss: clean / total,
            clean_accuracy: correct as f64 / total,
            adversarial_loss: (self.config.method != Method::Standard).then_some(adv / total),
            epoch_counters,
            counters: self.net.counters(),
            transfer,
        })
    }

    fn transfer_hook(&mut self) -> Result<Vec<TransferRecord>> {
        let Some(config) = self.config.transfer.clone() else {
            return Ok(Vec::new());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(transfer_seed(self.seed, self.epoch));
        self.net.set_counting(false);
        let runs = attacks::transfer_attack(
            &mut self.net.bind(&self.params),
            &mut self.pool,
            self.dataset,
            &self.spec,
            &config,
            self.epoch,
            &mut rng,
        );
        self.net.set_counting(true);
        Ok(runs?
            .into_iter()
            .map(|r| TransferRecord {
                kind: r.kind,
                seed: r.seed,
                random_init: r.result.random_init,
                final_objective: r.result.final_objective(),
            })
            .collect())
    }

    pub fn finish(self, history: Vec<EpochRecord>) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            meta: self.meta,
            history,
            transfer_pool: self.pool,
        }
    }
}

/// Trains for `config.epochs` epochs from a model initialized with `seed`.
pub fn train(
    dataset: &Dataset,
    spec: &PerturbationSpec,
    arch: &Architecture,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, spec, arch, config, seed)?;
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        history.push(trainer.run_epoch()?);
    }
    Ok(trainer.finish(history))
}
