//! The meta-patch set: a fixed number of patches, each paired with a target
//! class and an I-FGSM step size, used as initializations for the inner
//! maximization and moved toward adapted patches with REPTILE.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io;
use crate::model::Classifier;
use crate::perturbation::{Patch, PerturbationSpec, Placement};
use crate::tensor::Tensor;

const META_MAGIC: &[u8; 8] = b"MPMETA\0\0";

pub const ALPHA_MIN: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Uniform over the feasible set.
    Random,
    /// Built from a datapoint of the entry's target class.
    Data,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaEntry {
    pub patch: Patch,
    pub target: usize,
    pub alpha: f64,
}

/// One (entry, placement) pick for a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selection {
    pub entry: usize,
    pub placement: Placement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaSet {
    spec: PerturbationSpec,
    image: [usize; 3],
    entries: Vec<MetaEntry>,
}

/// Draws `ln(alpha)` uniformly between `ln(lo)` and `ln(hi)`.
pub fn log_uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if lo == hi {
        return lo;
    }
    (lo.ln() + (hi.ln() - lo.ln()) * rng.gen::<f64>()).exp().clamp(lo, hi)
}

/// Creates `p` entries. Entry `i` (1-based) targets class `i mod C`; step sizes
/// are log-uniform in `alpha_range`.
pub fn init_meta_set<R: Rng + ?Sized>(
    p: usize,
    dataset: &Dataset,
    mode: InitMode,
    spec: &PerturbationSpec,
    alpha_range: (f64, f64),
    rng: &mut R,
) -> Result<MetaSet> {
    if p == 0 {
        return Err(Error::invalid("meta set needs at least one entry"));
    }
    let (lo, hi) = alpha_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::invalid(format!("step size range [{lo}, {hi}] is invalid")));
    }
    let image = dataset.image_shape();
    spec.validate(image)?;
    let classes = dataset.num_classes();
    let by_class: Vec<Vec<usize>> = (0..classes).map(|c| dataset.class_indices(c)).collect();
    let mut entries = Vec::with_capacity(p);
    for i in 1..=p {
        let target = i % classes;
        let alpha = log_uniform(lo, hi, rng);
        let patch = match mode {
            InitMode::Random => spec.random_patch(image, rng),
            InitMode::Data => {
                let pool = &by_class[target];
                if pool.is_empty() {
                    return Err(Error::EmptyClass(target));
                }
                let idx = pool[rng.gen_range(0..pool.len())];
                spec.patch_from_datapoint(&dataset.image_tensor(idx))?
            }
        };
        entries.push(MetaEntry { patch, target, alpha });
    }
    Ok(MetaSet {
        spec: spec.clone(),
        image,
        entries,
    })
}

impl MetaSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MetaEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &MetaEntry {
        &self.entries[i]
    }

    pub fn spec(&self) -> &PerturbationSpec {
        &self.spec
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image
    }

    pub fn targets(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.target).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.alpha).collect()
    }

    /// Draws `trials` (entry, placement) candidates for every sample of the
    /// `[N, C, H, W]` batch and keeps, per sample, the one with the largest
    /// untargeted loss. With one trial nothing is evaluated.
    ///
    /// Random draws happen sample by sample, and within a sample trial by
    /// trial: entry index first, then placement. Ties keep the earliest trial.
    pub fn select<R: Rng + ?Sized>(
        &self,
        model: &mut dyn Classifier,
        x: &Tensor,
        labels: &[usize],
        trials: usize,
        rng: &mut R,
    ) -> Result<Vec<Selection>> {
        if trials == 0 {
            return Err(Error::invalid("selection needs at least one trial"));
        }
        let n = x.shape().first().copied().unwrap_or(0);
        if labels.len() != n {
            return Err(Error::shape("select", format!("{} labels for {n} samples", labels.len())));
        }
        let candidates: Vec<Vec<Selection>> = (0..n)
            .map(|_| {
                (0..trials)
                    .map(|_| Selection {
                        entry: rng.gen_range(0..self.entries.len()),
                        placement: self.spec.sample_randomness(rng),
                    })
                    .collect()
            })
            .collect();
        if trials == 1 {
            return Ok(candidates.into_iter().map(|c| c[0]).collect());
        }
        // one forward batch per trial index keeps memory at the batch size
        let mut losses = vec![vec![0.0; trials]; n];
        for t in 0..trials {
            let patches: Vec<&Patch> = candidates.iter().map(|c| &self.entries[c[t].entry].patch).collect();
            let placements: Vec<Placement> = candidates.iter().map(|c| c[t].placement).collect();
            let perturbed = self.spec.apply_batch(x, &patches, &placements)?;
            for (i, l) in model.losses(&perturbed, labels)?.into_iter().enumerate() {
                losses[i][t] = l;
            }
        }
        Ok(candidates
            .iter()
            .zip(&losses)
            .map(|(c, l)| {
                let mut best = 0;
                for t in 1..trials {
                    if l[t] > l[best] {
                        best = t;
                    }
                }
                c[best]
            })
            .collect())
    }

    /// Replaces entry `i` with the REPTILE update toward `finals`.
    pub fn update(&mut self, i: usize, finals: &[&Patch], sigma: f64) -> Result<()> {
        let next = reptile_update(&self.entries[i].patch, finals, sigma, &self.spec, self.image)?;
        self.entries[i].patch = next;
        Ok(())
    }

    pub fn to_bytes(&self, provenance: Option<&str>) -> Result<Vec<u8>> {
        let manifest = MetaManifest {
            count: self.entries.len(),
            spec: self.spec.clone(),
            image_shape: self.image,
            targets: self.targets(),
            alphas: self.alphas(),
            config_hash: provenance.map(str::to_string),
        };
        let mut payload = Vec::new();
        for e in &self.entries {
            payload.extend_from_slice(e.patch.data());
        }
        io::encode(META_MAGIC, &manifest, &payload)
    }

    pub fn from_bytes(origin: &Path, bytes: &[u8]) -> Result<(Self, Option<String>)> {
        let (m, payload): (MetaManifest, Vec<f64>) = io::decode(origin, META_MAGIC, bytes)?;
        let bad = |d: String| Error::format(origin, d);
        let shape = m.spec.patch_shape(m.image_shape);
        let per: usize = shape.iter().product();
        if m.targets.len() != m.count || m.alphas.len() != m.count || payload.len() != per * m.count {
            return Err(bad("manifest does not match payload".into()));
        }
        let entries = payload
            .chunks(per)
            .zip(m.targets.iter().zip(&m.alphas))
            .map(|(values, (&target, &alpha))| {
                let t = Tensor::new(shape.clone(), values.to_vec())?;
                Ok(MetaEntry {
                    patch: Patch::new(t, &m.spec, m.image_shape)?,
                    target,
                    alpha,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| bad(e.to_string()))?;
        Ok((
            Self {
                spec: m.spec,
                image: m.image_shape,
                entries,
            },
            m.config_hash,
        ))
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
struct MetaManifest {
    count: usize,
    spec: PerturbationSpec,
    image_shape: [usize; 3],
    targets: Vec<usize>,
    alphas: Vec<f64>,
    config_hash: Option<String>,
}

/// `(1 - sigma) * xi + sigma * mean(finals)`, projected onto the feasible set.
pub fn reptile_update(
    xi: &Patch,
    finals: &[&Patch],
    sigma: f64,
    spec: &PerturbationSpec,
    image: [usize; 3],
) -> Result<Patch> {
    if finals.is_empty() {
        return Err(Error::invalid("REPTILE update needs at least one adapted patch"));
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::invalid(format!("REPTILE rate {sigma} not in [0, 1]")));
    }
    if let Some(f) = finals.iter().find(|f| f.shape() != xi.shape()) {
        return Err(Error::shape("reptile_update", format!("{:?} vs {:?}", f.shape(), xi.shape())));
    }
    let mut mean = vec![0.0; xi.data().len()];
    for f in finals {
        for (m, v) in mean.iter_mut().zip(f.data()) {
            *m += v;
        }
    }
    let k = finals.len() as f64;
    let data = xi
        .data()
        .iter()
        .zip(&mean)
        .map(|(x, m)| (1.0 - sigma) * x + sigma * (m / k))
        .collect();
    spec.project(&Tensor::new(xi.shape().to_vec(), data)?, image)
}
