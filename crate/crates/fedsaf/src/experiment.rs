//! Experiment drivers behind the CLI subcommands. Each writes its artifacts
//! under a directory and returns the numbers it wrote.

use std::path::Path;

use fedsaf_core::analysis::{compare_scenarios, EffectiveDimensionality, RoundReport, ScenarioComparison, ScenarioRun};
use fedsaf_core::data::{generate_mixture, ClientShard, MixtureDataset};
use fedsaf_core::fed::{run_experiment_with, Scenario};
use fedsaf_core::losses::AlignmentKind;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::exec::Threaded;
use crate::files::{self, RoundLog};
use crate::CliError;

/// Generated data and its client shards for one config.
pub struct Prepared {
    pub dataset: MixtureDataset,
    pub shards: Vec<ClientShard>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let dataset = generate_mixture(&cfg.mixture())?;
    let shards = cfg.partition_spec().apply(&dataset)?;
    Ok(Prepared { dataset, shards })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: Scenario,
    pub seed: u64,
    pub loss: String,
    pub lambda: f64,
    pub gamma: f64,
    pub rounds: usize,
    pub best_mean_accuracy: f64,
    pub final_mean_accuracy: Option<f64>,
    pub final_dimensionality: Option<EffectiveDimensionality>,
    /// Round at which training produced a non-finite loss. The summary then
    /// covers only the rounds completed before it.
    pub diverged_at_round: Option<usize>,
}

/// One full run writing `config.echo`, `rounds.jsonl`, `summary.csv`,
/// `summary.json` and, when enabled, `prototypes/round_<k>.csv` and
/// `checkpoints/client_<i>.bin` under `dir`.
///
/// A numeric divergence ends the run early without failing it: the rounds
/// completed so far are kept and `diverged_at_round` records where it
/// stopped. Checkpoints are not written for a diverged run.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<(RunSummary, Vec<RoundReport>), CliError> {
    cfg.validate()?;
    files::create_dir(dir)?;
    let mut echo = cfg.clone();
    echo.output.dir = dir.to_owned();
    files::write_text(&dir.join(files::CONFIG_ECHO), &echo.to_toml_string())?;

    let prepared = prepare(cfg)?;
    let plan = cfg.plan()?;
    let proto_dir = dir.join("prototypes");
    if cfg.output.prototypes {
        files::create_dir(&proto_dir)?;
    }
    let mut log = RoundLog::create(&dir.join(files::ROUNDS_FILE))?;
    let mut write_error: Option<CliError> = None;
    let mut completed: Vec<RoundReport> = Vec::new();
    let executor = Threaded { threads: cfg.training.threads };
    let result = run_experiment_with(&plan, &prepared.shards, &executor, |report, global| {
        completed.push(report.clone());
        if write_error.is_some() {
            return;
        }
        let mut step = || -> Result<(), CliError> {
            log.append(report)?;
            if cfg.output.prototypes {
                files::write_prototypes_csv(&proto_dir.join(format!("round_{}.csv", report.round)), global)?;
            }
            Ok(())
        };
        if let Err(e) = step() {
            write_error = Some(e);
        }
        log::info!(
            "round {:>3}: mean accuracy {:.4} (best {:.4})",
            report.round,
            report.mean_accuracy,
            report.best_mean_accuracy
        );
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    log.finish()?;
    let (reports, diverged_at_round) = match result {
        Ok(outcome) => {
            if cfg.output.checkpoints {
                let ckpt = dir.join("checkpoints");
                files::create_dir(&ckpt)?;
                for (i, m) in outcome.models.iter().enumerate() {
                    files::write_checkpoint(&ckpt.join(format!("client_{i}.bin")), m)?;
                }
            }
            (outcome.reports, None)
        }
        Err(e) if e.is_numeric() => {
            log::warn!("{}: {e}", dir.display());
            (completed, e.round())
        }
        Err(e) => return Err(e.into()),
    };

    let rows: Vec<_> = reports.iter().map(|r| (cfg.model.scenario, cfg.seed, r)).collect();
    files::write_summary_csv(&dir.join(files::SUMMARY_CSV), &rows)?;
    let last = reports.last();
    let summary = RunSummary {
        scenario: cfg.model.scenario,
        seed: cfg.seed,
        loss: cfg.training.loss.clone(),
        lambda: cfg.training.lambda,
        gamma: cfg.training.gamma,
        rounds: cfg.training.rounds,
        best_mean_accuracy: RoundReport::best_of(&reports),
        final_mean_accuracy: last.map(|r| r.mean_accuracy),
        final_dimensionality: last.and_then(|r| r.effective_dimensionality),
        diverged_at_round,
    };
    files::write_text(&dir.join(files::SUMMARY_JSON), &serde_json::to_string_pretty(&summary)?)?;
    Ok((summary, reports))
}

fn seed_dir(base: &Path, seed: u64) -> std::path::PathBuf {
    base.join(format!("seed_{seed}"))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// One λ×γ grid cell, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub gamma: f64,
    pub best_accuracy_per_seed: Vec<f64>,
    pub mean_best_accuracy: f64,
    /// Mean best accuracy minus that of the λ = γ = 0 baseline.
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub loss: String,
    pub seeds: Vec<u64>,
    pub baseline_per_seed: Vec<f64>,
    pub baseline_mean: f64,
    pub cells: Vec<SweepCell>,
}

/// Grid over `lambdas × gammas` plus a λ = γ = 0 baseline, for each seed.
/// Layout: `baseline/seed_<s>/`, `lambda_<l>_gamma_<g>/seed_<s>/`,
/// `sweep.csv`, `sweep.json`.
pub fn sweep(
    cfg: &ExperimentConfig,
    lambdas: &[f64],
    gammas: &[f64],
    seeds: &[u64],
    out: &Path,
) -> Result<SweepResult, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Invalid { key: "--seeds".into(), message: "needs at least one seed".into() });
    }
    let run_cell = |lambda: f64, gamma: f64, sub: &str| -> Result<Vec<f64>, CliError> {
        seeds
            .iter()
            .map(|&seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                c.training.lambda = lambda;
                c.training.gamma = gamma;
                Ok(run_to_dir(&c, &seed_dir(&out.join(sub), seed))?.0.best_mean_accuracy)
            })
            .collect()
    };
    let baseline_per_seed = run_cell(0.0, 0.0, "baseline")?;
    let baseline_mean = mean(&baseline_per_seed);
    let mut cells = Vec::new();
    for &lambda in lambdas {
        for &gamma in gammas {
            let per_seed = run_cell(lambda, gamma, &format!("lambda_{lambda}_gamma_{gamma}"))?;
            let m = mean(&per_seed);
            log::info!("sweep λ={lambda} γ={gamma}: {m:.4} ({:+.4})", m - baseline_mean);
            cells.push(SweepCell {
                lambda,
                gamma,
                best_accuracy_per_seed: per_seed,
                mean_best_accuracy: m,
                improvement: m - baseline_mean,
            });
        }
    }
    let result = SweepResult { loss: cfg.training.loss.clone(), seeds: seeds.to_vec(), baseline_per_seed, baseline_mean, cells };

    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record(["loss", "lambda", "gamma", "mean_best_accuracy", "baseline_mean", "improvement"])?;
    for c in &result.cells {
        w.write_record([
            result.loss.clone(),
            c.lambda.to_string(),
            c.gamma.to_string(),
            c.mean_best_accuracy.to_string(),
            baseline_mean.to_string(),
            c.improvement.to_string(),
        ])?;
    }
    w.flush().map_err(files::io_err(out))?;
    files::write_text(&out.join("sweep.json"), &serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// Loss name, or `none` for the λ = γ = 0 baseline.
    pub label: String,
    pub best_accuracy_per_seed: Vec<f64>,
    pub mean_best_accuracy: f64,
}

/// The five alignment losses (and optionally the λ = γ = 0 baseline) on one
/// scenario. Layout: `<loss>/seed_<s>/`, `comparison.csv`,
/// `comparison.json`.
pub fn compare_alignments(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    with_baseline: bool,
    out: &Path,
) -> Result<Vec<ComparisonRow>, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Invalid { key: "--seeds".into(), message: "needs at least one seed".into() });
    }
    let mut variants: Vec<(String, Option<&str>)> = Vec::new();
    if with_baseline {
        variants.push(("none".into(), None));
    }
    variants.extend(AlignmentKind::ALL_NAMES.iter().map(|n| (n.to_string(), Some(*n))));

    let mut rows = Vec::new();
    for (label, loss) in variants {
        let per_seed = seeds
            .iter()
            .map(|&seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                match loss {
                    Some(name) => c.training.loss = name.to_owned(),
                    None => {
                        c.training.lambda = 0.0;
                        c.training.gamma = 0.0;
                    }
                }
                Ok(run_to_dir(&c, &seed_dir(&out.join(&label), seed))?.0.best_mean_accuracy)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let m = mean(&per_seed);
        log::info!("{label}: mean best accuracy {m:.4}");
        rows.push(ComparisonRow { label, best_accuracy_per_seed: per_seed, mean_best_accuracy: m });
    }

    let mut w = csv::Writer::from_path(out.join("comparison.csv"))?;
    let mut header = vec!["loss".to_owned(), "mean_best_accuracy".to_owned()];
    header.extend(seeds.iter().map(|s| format!("seed_{s}")));
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.label.clone(), r.mean_best_accuracy.to_string()];
        rec.extend(r.best_accuracy_per_seed.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(files::io_err(out))?;
    files::write_text(&out.join("comparison.json"), &serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}

/// Homo-Shared, Homo-Local and Hetero runs on the same data for each seed.
/// Layout: `<scenario>/seed_<s>/`, a combined `summary.csv`, and
/// `dimensionality.json`.
pub fn dimensionality(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<Vec<ScenarioComparison>, CliError> {
    let scenarios = [Scenario::HomoShared, Scenario::HomoLocal, Scenario::Hetero];
    let mut comparisons = Vec::new();
    let mut all_rows: Vec<(Scenario, u64, RoundReport)> = Vec::new();
    for &seed in seeds {
        let mut runs = Vec::new();
        for scenario in scenarios {
            let mut c = cfg.clone();
            c.seed = seed;
            c.model.scenario = scenario;
            let (_, reports) = run_to_dir(&c, &seed_dir(&out.join(scenario.name()), seed))?;
            all_rows.extend(reports.iter().map(|r| (scenario, seed, r.clone())));
            runs.push(ScenarioRun { scenario, data_seed: seed, reports });
        }
        let cmp = compare_scenarios(&runs[0], &runs[1], &runs[2])?;
        log::info!(
            "seed {seed}: threshold_dim homo-shared {} / homo-local {} / hetero {}",
            cmp.homo_shared.threshold_dim,
            cmp.homo_local.threshold_dim,
            cmp.hetero_local.threshold_dim
        );
        comparisons.push(cmp);
    }
    let rows: Vec<_> = all_rows.iter().map(|(s, seed, r)| (*s, *seed, r)).collect();
    files::write_summary_csv(&out.join(files::SUMMARY_CSV), &rows)?;
    files::write_text(&out.join("dimensionality.json"), &serde_json::to_string_pretty(&comparisons)?)?;
    Ok(comparisons)
}

/// Writes `dataset/train.csv`, `dataset/test.csv` and
/// `dataset/client_<i>_{train,test}.csv`.
pub fn export_data(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let prepared = prepare(cfg)?;
    let dir = out.join("dataset");
    files::create_dir(&dir)?;
    files::write_dataset_csv(&dir.join("train.csv"), &prepared.dataset.train)?;
    files::write_dataset_csv(&dir.join("test.csv"), &prepared.dataset.test)?;
    for s in &prepared.shards {
        files::write_dataset_csv(&dir.join(format!("client_{}_train.csv", s.client)), &s.train)?;
        files::write_dataset_csv(&dir.join(format!("client_{}_test.csv", s.client)), &s.test)?;
    }
    Ok(())
}
