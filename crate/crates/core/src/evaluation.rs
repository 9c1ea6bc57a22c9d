//! Robustness measurement: accuracy under a fixed perturbation, attack grids
//! with per-family and overall minima, and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttackResult, Family, TransferKind};
use crate::data::{splitmix64, Dataset};
use crate::error::{Error, Result};
use crate::hash;
use crate::meta::InitMode;
use crate::model::Classifier;
use crate::perturbation::{self, Patch, PerturbationSpec, Placement};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const EVAL_BATCH: usize = 64;

/// Placement of sample `index` for a given seed, independent of all other samples.
pub fn placement_for(spec: &PerturbationSpec, seed: u64, index: usize) -> Placement {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index as u64)));
    spec.sample_randomness(&mut rng)
}

/// Fraction of `split` classified correctly after applying `patch` (if any)
/// at per-sample placements derived from `placement_seed`.
pub fn accuracy_under(
    model: &mut dyn Classifier,
    split: &Dataset,
    patch: Option<&Patch>,
    spec: &PerturbationSpec,
    placement_seed: u64,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::invalid("accuracy on an empty split"));
    }
    let all: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0;
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, labels) = split.batch(chunk)?;
        let x = match patch {
            Some(p) => {
                let placements: Vec<Placement> =
                    chunk.iter().map(|&i| placement_for(spec, placement_seed, i)).collect();
                spec.apply_batch(&x, &vec![p; chunk.len()], &placements)?
            }
            None => x,
        };
        correct += model
            .predict(&x)?
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// One evaluated grid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigRow {
    pub config_id: String,
    pub family: Family,
    pub config: AttackConfig,
    /// `None` when the attack failed.
    pub accuracy: Option<f64>,
    pub loss_final: Option<f64>,
    pub error: Option<String>,
}

/// Accuracy under one patch from the training-time transfer pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub epoch: usize,
    pub kind: TransferKind,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Display name of the evaluated model, e.g. the training method.
    pub label: String,
    /// Provenance hash of the configuration that produced the model.
    pub model_id: Option<String>,
    /// Hash of the run configuration that produced this report.
    pub config_hash: Option<String>,
    pub perturbation: PerturbationSpec,
    pub seed: u64,
    pub clean_accuracy: f64,
    pub rows: Vec<ConfigRow>,
    pub transfer: Vec<TransferRow>,
    pub family_min: BTreeMap<Family, f64>,
    /// Worst accuracy over every successful configuration and transfer patch.
    pub min: Option<f64>,
}

impl EvalReport {
    /// Recomputes `family_min` and `min` from the rows.
    pub fn aggregate(&mut self) {
        let mut fam: BTreeMap<Family, f64> = BTreeMap::new();
        let mut push = |f: Family, a: f64| {
            let e = fam.entry(f).or_insert(a);
            *e = e.min(a);
        };
        for r in &self.rows {
            if let Some(a) = r.accuracy {
                push(r.family, a);
            }
        }
        for t in &self.transfer {
            push(Family::Transfer, t.accuracy);
        }
        self.min = fam.values().copied().reduce(f64::min);
        self.family_min = fam;
    }

    pub fn failures(&self) -> impl Iterator<Item = &ConfigRow> {
        self.rows.iter().filter(|r| r.accuracy.is_none())
    }
}

/// Grid entry identifiers: position plus family code, e.g. `03-DI`.
pub fn config_id(index: usize, config: &AttackConfig) -> String {
    format!("{index:02}-{}", config.family().code())
}

/// The default grid: step sizes {1e-3, 1e-2, 1e-1} with momentum 0.9, for
/// each of random init, data init and their low-frequency variants (cutoff
/// at half the patch height).
pub fn desk_grid(spec: &PerturbationSpec, image: [usize; 3], steps: usize, batch_size: usize) -> Vec<AttackConfig> {
    let shape = spec.patch_shape(image);
    let half = (shape[1] / 2) as f64;
    let mut grid = Vec::new();
    for init in [InitMode::Random, InitMode::Data] {
        for cutoff in [None, Some(half)] {
            {
                for step_size in [1e-3, 1e-2, 1e-1] {
                    grid.push(AttackConfig {
                        init,
                        steps,
                        step_size,
                        momentum: 0.9,
                        total_decay: 0.01,
                        cutoff,
                        batch_size,
                        loss_mode: attacks::LossMode::Untargeted,
                        candidates: 8,
                    });
                }
            }
        }
    }
    grid
}

/// Everything a grid run produced: the report plus each successful attack.
pub struct GridOutcome {
    pub report: EvalReport,
    pub results: Vec<Option<AttackResult>>,
}

/// Attack seed and placement seed of one configuration.
fn config_seeds(config: &AttackConfig, seed: u64) -> Result<(u64, u64)> {
    let h = hash::seed_of(config)?;
    Ok((splitmix64(seed ^ h), h))
}

fn run_config<M: Classifier>(
    make_model: &(dyn Fn() -> Result<M> + Sync),
    train: &Dataset,
    eval: &Dataset,
    spec: &PerturbationSpec,
    config: &AttackConfig,
    seed: u64,
) -> Result<(AttackResult, f64)> {
    let mut model = make_model()?;
    let (attack_seed, placement_seed) = config_seeds(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(attack_seed);
    let result = attacks::spgd(&mut model, train, spec, config, None, &mut rng)?;
    let acc = accuracy_under(&mut model, eval, Some(&result.patch), spec, placement_seed)?;
    Ok((result, acc))
}

/// Runs S-PGD for every configuration on `train` and measures accuracy under
/// the resulting patch on `eval`. Each configuration gets its own model
/// instance and seeds derived from `(seed, config)`, so results do not depend
/// on `jobs`. Failed attacks are kept as rows without accuracy.
#[allow(clippy::too_many_arguments)]
pub fn grid_eval<M: Classifier>(
    make_model: &(dyn Fn() -> Result<M> + Sync),
    train: &Dataset,
    eval: &Dataset,
    spec: &PerturbationSpec,
    grid: &[AttackConfig],
    seed: u64,
    jobs: usize,
    label: &str,
) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(Error::invalid("attack grid is empty"));
    }
    let clean_accuracy = accuracy_under(&mut make_model()?, eval, None, spec, 0)?;
    let run = |c: &AttackConfig| run_config(make_model, train, eval, spec, c, seed);
    let outcomes: Vec<Result<(AttackResult, f64)>> = if jobs <= 1 {
        grid.iter().map(run).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(|| grid.par_iter().map(run).collect())
    };
    let mut rows = Vec::with_capacity(grid.len());
    let mut results = Vec::with_capacity(grid.len());
    for (i, (config, outcome)) in grid.iter().zip(outcomes).enumerate() {
        let (accuracy, loss_final, error, result) = match outcome {
            Ok((r, acc)) => (Some(acc), Some(r.final_objective()), None, Some(r)),
            Err(e) => (None, None, Some(e.to_string()), None),
        };
        rows.push(ConfigRow {
            config_id: config_id(i, config),
            family: config.family(),
            config: config.clone(),
            accuracy,
            loss_final,
            error,
        });
        results.push(result);
    }
    let mut report = empty_report(label, spec, seed, clean_accuracy);
    report.rows = rows;
    report.aggregate();
    Ok(GridOutcome { report, results })
}

/// A report with clean accuracy only.
pub fn empty_report(label: &str, spec: &PerturbationSpec, seed: u64, clean_accuracy: f64) -> EvalReport {
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        label: label.to_string(),
        model_id: None,
        config_hash: None,
        perturbation: spec.clone(),
        seed,
        clean_accuracy,
        rows: Vec::new(),
        transfer: Vec::new(),
        family_min: BTreeMap::new(),
        min: None,
    }
}

/// Adds accuracy rows for transfer-pool patches and re-aggregates.
pub fn add_transfer_rows(
    report: &mut EvalReport,
    model: &mut dyn Classifier,
    eval: &Dataset,
    spec: &PerturbationSpec,
    pool: &[(usize, TransferKind, Patch)],
) -> Result<()> {
    for (i, (epoch, kind, patch)) in pool.iter().enumerate() {
        let placement_seed = splitmix64(report.seed ^ splitmix64(0x5452 ^ i as u64));
        let accuracy = accuracy_under(model, eval, Some(patch), spec, placement_seed)?;
        report.transfer.push(TransferRow {
            epoch: *epoch,
            kind: *kind,
            accuracy,
        });
    }
    report.aggregate();
    Ok(())
}

fn cutoff_cell(c: Option<f64>) -> String {
    c.map(|u| u.to_string()).unwrap_or_else(|| "off".into())
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|a| a.to_string()).unwrap_or_default()
}

/// CSV with one row per grid configuration.
pub fn report_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["config_id", "init", "steps", "step_size", "momentum", "cutoff", "accuracy", "loss_final"])
        .map_err(csv_err)?;
    for r in &report.rows {
        let init = match r.config.init {
            InitMode::Random => "random",
            InitMode::Data => "data",
        };
        w.write_record([
            r.config_id.clone(),
            init.to_string(),
            r.config.steps.to_string(),
            r.config.step_size.to_string(),
            r.config.momentum.to_string(),
            cutoff_cell(r.config.cutoff),
            opt_cell(r.accuracy),
            opt_cell(r.loss_final),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

/// Writes `report.csv`, `report.json` and, for every `(config_id, patch)` in
/// `exports`, `patch_<config_id>.ppm` (patch mode only). Returns written paths.
pub fn emit_report(report: &EvalReport, dir: &Path, exports: &[(String, Patch)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, report_csv(report)?).map_err(|e| Error::io(&csv_path, e))?;
    written.push(csv_path);
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);
    if report.perturbation.is_patch() {
        for (id, patch) in exports {
            let path = dir.join(format!("patch_{id}.ppm"));
            perturbation::export_ppm(&path, patch, &report.perturbation)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, format!("malformed JSON: {e}")))?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(REPORT_SCHEMA_VERSION as u64) {
        return Err(Error::format(
            path,
            format!("schema version {version:?}, expected {REPORT_SCHEMA_VERSION}"),
        ));
    }
    serde_json::from_value(value).map_err(|e| Error::format(path, format!("report: {e}")))
}

/// Methods-by-families comparison of several reports.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub clean: f64,
    pub families: BTreeMap<Family, f64>,
    pub min: Option<f64>,
}

impl Comparison {
    pub fn new(reports: &[EvalReport]) -> Self {
        Self {
            rows: reports
                .iter()
                .map(|r| ComparisonRow {
                    label: r.label.clone(),
                    clean: r.clean_accuracy,
                    families: r.family_min.clone(),
                    min: r.family_min.values().copied().reduce(f64::min),
                })
                .collect(),
        }
    }

    fn cells(&self) -> (Vec<&'static str>, Vec<Vec<String>>) {
        let mut header = vec!["method", "clean"];
        header.extend(Family::ALL.iter().map(|f| f.code()));
        header.push("Min");
        let fmt = |v: Option<f64>| v.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into());
        let body = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.label.clone(), fmt(Some(r.clean))];
                row.extend(Family::ALL.iter().map(|f| fmt(r.families.get(f).copied())));
                row.push(fmt(r.min));
                row
            })
            .collect();
        (header, body)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let (header, body) = self.cells();
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for row in body {
            w.write_record(&row).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
    }

    pub fn to_text(&self) -> String {
        let (header, body) = self.cells();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(header.clone(), &mut out);
        for row in &body {
            line(row.iter().map(String::as_str).collect(), &mut out);
        }
        out
    }
}
