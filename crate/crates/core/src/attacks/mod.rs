//! Attacks on a fixed classifier: the I-FGSM inner maximization used during
//! training, and the universal-perturbation suite used for evaluation
//! (stochastic PGD with random or data initialization, low-frequency
//! constraint, transfer from earlier epochs).

mod lowpass;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::meta::InitMode;
use crate::model::{Classifier, Objective};
use crate::perturbation::{Patch, PerturbationSpec, Placement};
use crate::tensor::Tensor;

pub use lowpass::{all_pass_radius, low_pass, LowPass};

/// Restarts from a fresh random patch happen on every epoch divisible by this.
pub const TRANSFER_RESTART_EVERY: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossMode {
    Untargeted,
    Targeted { target: usize },
}

impl LossMode {
    pub fn objective(self) -> Objective {
        match self {
            LossMode::Untargeted => Objective::Untargeted,
            LossMode::Targeted { .. } => Objective::Targeted,
        }
    }

    /// Labels the loss is computed against.
    fn labels(self, true_labels: &[usize]) -> Vec<usize> {
        match self {
            LossMode::Untargeted => true_labels.to_vec(),
            LossMode::Targeted { target } => vec![target; true_labels.len()],
        }
    }
}

/// Attack families used to group evaluation results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "RI")]
    RandomInit,
    #[serde(rename = "DI")]
    DataInit,
    #[serde(rename = "LF")]
    LowFrequency,
    #[serde(rename = "Tr")]
    Transfer,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::RandomInit, Family::DataInit, Family::LowFrequency, Family::Transfer];

    pub fn code(self) -> &'static str {
        match self {
            Family::RandomInit => "RI",
            Family::DataInit => "DI",
            Family::LowFrequency => "LF",
            Family::Transfer => "Tr",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.code().eq_ignore_ascii_case(s))
    }
}

fn default_decay() -> f64 {
    0.01
}

fn default_candidates() -> usize {
    8
}

fn default_loss_mode() -> LossMode {
    LossMode::Untargeted
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub init: InitMode,
    pub steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub momentum: f64,
    /// Ratio of the last step size to the first.
    #[serde(default = "default_decay")]
    pub total_decay: f64,
    /// Radial low-pass cutoff in DFT bins; `None` leaves the patch unconstrained.
    #[serde(default)]
    pub cutoff: Option<f64>,
    pub batch_size: usize,
    #[serde(default = "default_loss_mode")]
    pub loss_mode: LossMode,
    /// Datapoints compared by data initialization.
    #[serde(default = "default_candidates")]
    pub candidates: usize,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("attack: {m}")));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return fail(format!("step size {} must be positive", self.step_size));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if !(self.total_decay > 0.0 && self.total_decay <= 1.0) {
            return fail(format!("total decay {} not in (0, 1]", self.total_decay));
        }
        if let Some(u) = self.cutoff {
            if !(u >= 0.0 && u.is_finite()) {
                return fail(format!("cutoff {u} must be non-negative"));
            }
        }
        if self.batch_size == 0 || self.candidates == 0 {
            return fail("batch size and candidate count must be positive".into());
        }
        Ok(())
    }

    /// Step size of step `k` (0-based): geometric from `step_size` down to
    /// `step_size * total_decay` at the last step.
    pub fn step_size_at(&self, k: usize) -> f64 {
        if self.steps <= 1 {
            return self.step_size;
        }
        self.step_size * self.total_decay.powf(k as f64 / (self.steps - 1) as f64)
    }

    pub fn family(&self) -> Family {
        match (self.cutoff, self.init) {
            (Some(_), _) => Family::LowFrequency,
            (None, InitMode::Random) => Family::RandomInit,
            (None, InitMode::Data) => Family::DataInit,
        }
    }
}

/// Outcome of one attack run.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub config: AttackConfig,
    /// The perturbation as it is applied (band-limited when a cutoff is set).
    pub patch: Patch,
    /// Objective estimate on each step's batch before its update, then on a
    /// fresh batch for the final patch: `steps + 1` values.
    pub trajectory: Vec<f64>,
    /// Whether the run started from a random patch.
    pub random_init: bool,
}

impl AttackResult {
    pub fn final_objective(&self) -> f64 {
        *self.trajectory.last().expect("trajectory is never empty")
    }
}

/// Per-sample objective values: cross-entropy (untargeted) or its negation
/// toward the target (targeted).
fn objective_values(losses: &[f64], objective: Objective) -> Vec<f64> {
    let w = objective.weight();
    losses.iter().map(|l| w * l).collect()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs `k` projected sign-gradient ascent steps for every sample of an
/// `[N, C, H, W]` batch, each with its own start patch, step size and fixed
/// placement. `labels` are the classes the loss is computed against (true
/// labels when untargeted, target classes when targeted).
#[allow(clippy::too_many_arguments)]
pub fn ifgsm(
    model: &mut dyn Classifier,
    spec: &PerturbationSpec,
    x: &Tensor,
    labels: &[usize],
    objective: Objective,
    start: Vec<Patch>,
    alphas: &[f64],
    placements: &[Placement],
    k: usize,
) -> Result<Vec<Patch>> {
    let (n, image) = crate::perturbation::batch_shape(x.shape())?;
    if start.len() != n || alphas.len() != n || placements.len() != n || labels.len() != n {
        return Err(Error::invalid("ifgsm: per-sample inputs must match the batch size"));
    }
    let mut patches = start;
    let per: usize = image.iter().product();
    let weights = vec![objective.weight(); n];
    for _ in 0..k {
        let refs: Vec<&Patch> = patches.iter().collect();
        let perturbed = spec.apply_batch(x, &refs, placements)?;
        let (_, grad) = model.input_gradient(&perturbed, labels, &weights)?;
        let mut next = Vec::with_capacity(n);
        for (i, p) in patches.iter().enumerate() {
            let span = i * per..(i + 1) * per;
            let g = spec.patch_gradient(&grad.data()[span.clone()], &x.data()[span], p, placements[i], image)?;
            let stepped = p
                .tensor()
                .data()
                .iter()
                .zip(g.data())
                .map(|(v, d)| v + alphas[i] * sign(*d))
                .collect();
            next.push(spec.project(&Tensor::from_parts(p.shape().to_vec(), stepped), image)?);
        }
        patches = next;
    }
    Ok(patches)
}

/// Mean objective of one patch over the given samples and placements.
pub fn estimate_rho(
    model: &mut dyn Classifier,
    spec: &PerturbationSpec,
    patch: &Patch,
    x: &Tensor,
    labels: &[usize],
    placements: &[Placement],
    objective: Objective,
) -> Result<f64> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("estimate_rho needs at least one sample"));
    }
    let patches = vec![patch; n];
    let perturbed = spec.apply_batch(x, &patches, placements)?;
    let values = objective_values(&model.losses(&perturbed, labels)?, objective);
    Ok(values.iter().sum::<f64>() / n as f64)
}

/// A batch of samples with their placements.
pub struct Probe {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub placements: Vec<Placement>,
}

impl Probe {
    /// Draws `size` distinct samples (all of them if the dataset is smaller),
    /// then one placement per sample.
    pub fn draw<R: Rng + ?Sized>(dataset: &Dataset, spec: &PerturbationSpec, size: usize, rng: &mut R) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::invalid("cannot draw samples from an empty dataset"));
        }
        let picks = index::sample(rng, dataset.len(), size.min(dataset.len())).into_vec();
        let (x, labels) = dataset.batch(&picks)?;
        let placements = picks.iter().map(|_| spec.sample_randomness(rng)).collect();
        Ok(Self { x, labels, placements })
    }

    fn rho(&self, model: &mut dyn Classifier, spec: &PerturbationSpec, patch: &Patch, mode: LossMode) -> Result<f64> {
        let labels = mode.labels(&self.labels);
        estimate_rho(model, spec, patch, &self.x, &labels, &self.placements, mode.objective())
    }
}

/// Index of the first maximum of `rho` over `candidates`; no evaluation when
/// there is a single candidate.
fn strongest(
    model: &mut dyn Classifier,
    spec: &PerturbationSpec,
    candidates: &[Patch],
    probe: &Probe,
    mode: LossMode,
) -> Result<usize> {
    if candidates.len() == 1 {
        return Ok(0);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let r = probe.rho(model, spec, c, mode)?;
        if r > best.1 {
            best = (i, r);
        }
    }
    Ok(best.0)
}

/// Converts `n_candidates` random datapoints into feasible perturbations and
/// returns the one with the largest objective on `probe`.
pub fn data_init<R: Rng + ?Sized>(
    model: &mut dyn Classifier,
    dataset: &Dataset,
    spec: &PerturbationSpec,
    n_candidates: usize,
    probe: &Probe,
    mode: LossMode,
    rng: &mut R,
) -> Result<Patch> {
    if dataset.is_empty() {
        return Err(Error::invalid("data initialization needs a non-empty dataset"));
    }
    if n_candidates == 0 {
        return Err(Error::invalid("data initialization needs at least one candidate"));
    }
    let picks = index::sample(rng, dataset.len(), n_candidates.min(dataset.len())).into_vec();
    let candidates = picks
        .iter()
        .map(|&i| spec.patch_from_datapoint(&dataset.image_tensor(i)))
        .collect::<Result<Vec<_>>>()?;
    let best = strongest(model, spec, &candidates, probe, mode)?;
    Ok(candidates.into_iter().nth(best).expect("index in range"))
}

/// Stochastic projected gradient ascent on the universal objective: every
/// step draws a fresh batch and fresh placements. `start` overrides the
/// configured initialization.
pub fn spgd<R: Rng + ?Sized>(
    model: &mut dyn Classifier,
    dataset: &Dataset,
    spec: &PerturbationSpec,
    config: &AttackConfig,
    start: Option<Patch>,
    rng: &mut R,
) -> Result<AttackResult> {
    config.validate()?;
    let image = dataset.image_shape();
    spec.validate(image)?;
    let objective = config.loss_mode.objective();
    let random_init = start.is_none() && config.init == InitMode::Random;
    let mut xi = match start {
        Some(p) => p,
        None => match config.init {
            InitMode::Random => spec.random_patch(image, rng),
            InitMode::Data => {
                let probe = Probe::draw(dataset, spec, config.batch_size, rng)?;
                data_init(model, dataset, spec, config.candidates, &probe, config.loss_mode, rng)?
            }
        },
    };
    let filter = match config.cutoff {
        Some(u) => Some(LowPass::new(&spec.patch_shape(image), u)?),
        None => None,
    };
    let applied = |p: &Patch| match &filter {
        Some(f) => f.apply(p, spec),
        None => p.clone(),
    };
    let per: usize = image.iter().product();
    let mut velocity = vec![0.0; xi.data().len()];
    let mut trajectory = Vec::with_capacity(config.steps + 1);
    for k in 0..config.steps {
        let probe = Probe::draw(dataset, spec, config.batch_size, rng)?;
        let labels = config.loss_mode.labels(&probe.labels);
        let n = labels.len();
        let current = applied(&xi);
        let refs = vec![&current; n];
        let perturbed = spec.apply_batch(&probe.x, &refs, &probe.placements)?;
        let weights = vec![objective.weight() / n as f64; n];
        let (losses, grad) = model.input_gradient(&perturbed, &labels, &weights)?;
        trajectory.push(objective_values(&losses, objective).iter().sum::<f64>() / n as f64);
        let mut g = vec![0.0; velocity.len()];
        for i in 0..n {
            let span = i * per..(i + 1) * per;
            let gi = spec.patch_gradient(&grad.data()[span.clone()], &probe.x.data()[span], &current, probe.placements[i], image)?;
            for (a, b) in g.iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
        if let Some(f) = &filter {
            g = f.filter(&g);
        }
        let alpha = config.step_size_at(k);
        let stepped: Vec<f64> = velocity
            .iter_mut()
            .zip(&g)
            .zip(xi.data())
            .map(|((v, d), x)| {
                *v = config.momentum * *v + sign(*d);
                x + alpha * *v
            })
            .collect();
        xi = spec.project(&Tensor::from_parts(xi.shape().to_vec(), stepped), image)?;
    }
    let patch = applied(&xi);
    let probe = Probe::draw(dataset, spec, config.batch_size, rng)?;
    trajectory.push(probe.rho(model, spec, &patch, config.loss_mode)?);
    Ok(AttackResult {
        config: config.clone(),
        patch,
        trajectory,
        random_init,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    /// Started from the strongest pool member (or a random patch if the pool was empty).
    PoolSeeded,
    /// Periodic restart from a random patch.
    RandomRestart,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferRun {
    pub epoch: usize,
    pub kind: TransferKind,
    /// Pool index the run started from.
    pub seed: Option<usize>,
    pub result: AttackResult,
}

/// One epoch of the transfer attack: start from the pool member that is
/// strongest against the current model, attack, and add the result to the
/// pool; on every fifth epoch also add a run from a random start. `epoch` is
/// 1-based.
pub fn transfer_attack<R: Rng + ?Sized>(
    model: &mut dyn Classifier,
    pool: &mut Vec<Patch>,
    dataset: &Dataset,
    spec: &PerturbationSpec,
    config: &AttackConfig,
    epoch: usize,
    rng: &mut R,
) -> Result<Vec<TransferRun>> {
    let image = dataset.image_shape();
    let mut runs = Vec::new();
    let (start, seed) = if pool.is_empty() {
        (spec.random_patch(image, rng), None)
    } else {
        let probe = Probe::draw(dataset, spec, config.batch_size, rng)?;
        let best = strongest(model, spec, pool, &probe, config.loss_mode)?;
        (pool[best].clone(), Some(best))
    };
    let mut result = spgd(model, dataset, spec, config, Some(start), rng)?;
    result.random_init = seed.is_none();
    pool.push(result.patch.clone());
    runs.push(TransferRun {
        epoch,
        kind: TransferKind::PoolSeeded,
        seed,
        result,
    });
    if epoch > 0 && epoch.is_multiple_of(TRANSFER_RESTART_EVERY) {
        let start = spec.random_patch(image, rng);
        let mut result = spgd(model, dataset, spec, config, Some(start), rng)?;
        result.random_init = true;
        pool.push(result.patch.clone());
        runs.push(TransferRun {
            epoch,
            kind: TransferKind::RandomRestart,
            seed: None,
            result,
        });
    }
    Ok(runs)
}
