//! Acceptance checks: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs without the libtest harness so the lines are never captured.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fedsaf::config::ExperimentConfig;
use fedsaf::experiment;
use fedsaf_core::fed::{local_objective, PrototypeSet, RoundConfig};
use fedsaf_core::losses::{
    check_gradient, check_gradient_flat, loss_contrastive, loss_gcsa, loss_rcsa, procrustes_decompose, AlignmentKind,
};
use fedsaf_core::model::{build_model, ArchitectureSpec};
use fedsaf_core::rng::{rng_from, SimRng};
use fedsaf_core::tensor::random_orthogonal_with;
use fedsaf_core::FeatureMatrix;
use rand::Rng;
use serde::Deserialize;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

const TRIALS: u64 = 200;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];

fn rng(criterion: u64, trial: u64) -> SimRng {
    rng_from(0xacce, &[criterion, trial])
}

fn random_problem(rng: &mut SimRng) -> (usize, usize, FeatureMatrix) {
    let n = rng.random_range(3..=8);
    let d = rng.random_range(3..=16);
    (n, d, FeatureMatrix::random_normal(n, d, rng))
}

fn gcsa_invariance() -> Outcome {
    let mut worst = 0.0f64;
    for t in 0..TRIALS {
        let mut r = rng(1, t);
        let (_, d, p) = random_problem(&mut r);
        // α drawn from (0, 10]: 1 − u with u ∈ [0, 1) lies in (0, 1].
        let alpha = 10.0 * (1.0 - r.random::<f64>());
        let rot = random_orthogonal_with(d, &mut r);
        let b = FeatureMatrix::random_normal(1, d, &mut r).into_vec();
        let q = p.matmul(&rot).unwrap().scale(alpha).add_row_vector(&b).unwrap();
        worst = worst.max(loss_gcsa(&p, &q).map_or(f64::INFINITY, |l| l.value));
    }
    outcome(worst <= 1e-10, format!("max GCSA(P, αPR + 1bᵀ) = {worst:.2e} over {TRIALS} trials (≤ 1e-10)"))
}

fn rcsa_invariance() -> Outcome {
    let mut worst = 0.0f64;
    let mut weakest_shift = f64::INFINITY;
    for t in 0..TRIALS {
        let mut r = rng(2, t);
        let (_, d, p) = random_problem(&mut r);
        let rot = random_orthogonal_with(d, &mut r);
        worst = worst.max(loss_rcsa(&p, &p.matmul(&rot).unwrap()).map_or(f64::INFINITY, |l| l.value));
        let b = FeatureMatrix::random_normal(1, d, &mut r).into_vec();
        weakest_shift = weakest_shift.min(loss_rcsa(&p, &p.add_row_vector(&b).unwrap()).map_or(0.0, |l| l.value));
    }
    outcome(
        worst <= 1e-10 && weakest_shift > 1e-6,
        format!("max RCSA(P, PR) = {worst:.2e} (≤ 1e-10); min RCSA(P, P + 1bᵀ) = {weakest_shift:.2e} (> 1e-6)"),
    )
}

fn procrustes_split() -> Outcome {
    let mut gap = 0.0f64;
    let mut min_rigid = f64::INFINITY;
    let mut rotated_shape = 0.0f64;
    for t in 0..TRIALS {
        let mut r = rng(3, t);
        let (n, d, p) = random_problem(&mut r);
        let z = FeatureMatrix::random_normal(n, d, &mut r);
        match procrustes_decompose(&z, &p) {
            Ok(s) => {
                gap = gap.max((s.l_coord - (s.l_shape + s.l_rigid)).abs());
                min_rigid = min_rigid.min(s.l_rigid);
            }
            Err(_) => gap = f64::INFINITY,
        }
        let r0 = random_orthogonal_with(d, &mut r);
        let shape = procrustes_decompose(&p.matmul(&r0).unwrap(), &p).map_or(f64::INFINITY, |s| s.l_shape);
        rotated_shape = rotated_shape.max(shape);
    }
    outcome(
        gap <= 1e-9 && min_rigid >= -1e-12 && rotated_shape <= 1e-9,
        format!(
            "max |l_coord − l_shape − l_rigid| = {gap:.2e} (≤ 1e-9); min l_rigid = {min_rigid:.2e} (≥ −1e-12); \
             max l_shape(pR₀, p) = {rotated_shape:.2e} (≤ 1e-9)"
        ),
    )
}

fn gradient_suite() -> Outcome {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut passed = true;
    let kinds = [
        AlignmentKind::Mse,
        AlignmentKind::Cosine,
        AlignmentKind::Gcsa,
        AlignmentKind::Rcsa,
        AlignmentKind::Contrastive { temperature: 0.5 },
    ];
    for kind in kinds {
        let mut w = 0.0f64;
        for t in 0..10 {
            let mut r = rng(4, t);
            let n = r.random_range(3..=8);
            let d = r.random_range(3..=8);
            let a = FeatureMatrix::random_normal(n, d, &mut r);
            let (b, labels) = match kind {
                AlignmentKind::Contrastive { .. } => {
                    let c = r.random_range(2..=5);
                    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
                    (FeatureMatrix::random_normal(c, d, &mut r), labels)
                }
                _ => (FeatureMatrix::random_normal(n, d, &mut r), Vec::new()),
            };
            let report = check_gradient(kind, &a, &b, &labels, STEP, TOL);
            passed &= report.passed;
            w = w.max(report.max_rel_error);
        }
        worst.push((kind.name(), w));
    }

    // Full local objective through a tiny model, one kind at a time.
    let mut composite = 0.0f64;
    for (t, kind) in kinds.into_iter().enumerate() {
        let mut r = rng(40, t as u64);
        let model = build_model(&ArchitectureSpec::new(vec![5], 3).unwrap(), 4, 4, t as u64).unwrap();
        let x = FeatureMatrix::random_normal(10, 4, &mut r);
        let y: Vec<usize> = (0..10).map(|i| i % 4).collect();
        let g = FeatureMatrix::random_normal(4, 3, &mut r);
        let mut global = PrototypeSet::new();
        for c in 0..4 {
            global.insert(c, g.row(c).to_vec(), 3).unwrap();
        }
        let cfg = RoundConfig { lambda: 0.7, gamma: 1.3, alignment: kind, ..RoundConfig::default() };
        let (breakdown, grads) = local_objective(&model, &x, &y, &global, &cfg).unwrap();
        passed &= !breakdown.proto_skipped && !breakdown.inst_skipped;
        let report = check_gradient_flat(
            &model.params_flat(),
            &grads.flatten(),
            |p| {
                let mut probe = model.clone();
                probe.set_params_flat(p)?;
                Ok(local_objective(&probe, &x, &y, &global, &cfg)?.0.total)
            },
            STEP,
            TOL,
        );
        passed &= report.passed;
        composite = composite.max(report.max_rel_error);
    }
    worst.push(("composite", composite));
    let detail = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(passed, format!("max relative error per loss (≤ 1e-4, step 1e-5): {detail}"))
}

fn contrastive_split() -> Outcome {
    let mut gap = 0.0f64;
    for t in 0..100 {
        let mut r = rng(5, t);
        let n = r.random_range(2..=12);
        let d = r.random_range(2..=8);
        let c = r.random_range(2..=6);
        let z = FeatureMatrix::random_normal(n, d, &mut r);
        let p = FeatureMatrix::random_normal(c, d, &mut r);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let tau = 0.05 + 2.0 * r.random::<f64>();
        match loss_contrastive(&z, &p, &labels, tau) {
            Ok(l) => gap = gap.max((l.total.value - (l.alignment.value + l.uniformity.value)).abs()),
            Err(_) => gap = f64::INFINITY,
        }
    }
    let mut r = rng(5, 1000);
    let z = FeatureMatrix::random_normal(6, 4, &mut r);
    let one = FeatureMatrix::random_normal(1, 4, &mut r);
    let single = loss_contrastive(&z, &one, &[0; 6], 0.5).map_or(f64::INFINITY, |l| l.total.value.abs());
    outcome(
        gap <= 1e-9 && single <= 1e-12,
        format!("max |total − (alignment + uniformity)| = {gap:.2e} over 100 batches (≤ 1e-9); C = 1 total = {single:.1e}"),
    )
}

fn desk(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.num_classes = 10;
    cfg.partition.num_clients = 8;
    cfg.partition.alpha = 0.1;
    cfg.model.hidden_widths = vec![vec![], vec![16], vec![32, 16], vec![64, 32, 16]];
    cfg.training.rounds = 30;
    cfg.training.local_epochs = 2;
    cfg.training.batch_size = 32;
    cfg.output.dir = out.to_owned();
    cfg
}

fn dimensionality_trend(tmp: &Path) -> Outcome {
    let cfg = desk(tmp);
    let cmps = match experiment::dimensionality(&cfg, &DESK_SEEDS, tmp) {
        Ok(c) => c,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let wins = cmps.iter().filter(|c| c.hetero_local.threshold_dim > c.homo_shared.threshold_dim).count();
    let detail = cmps
        .iter()
        .map(|c| {
            format!(
                "seed {}: shared {} / local {} / hetero {}",
                c.data_seed, c.homo_shared.threshold_dim, c.homo_local.threshold_dim, c.hetero_local.threshold_dim
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(wins == DESK_SEEDS.len(), format!("Hetero > Homo-Shared in {wins}/3 seeds ({detail})"))
}

fn alignment_table(tmp: &Path) -> Outcome {
    let rows = match experiment::compare_alignments(&desk(tmp), &DESK_SEEDS, true, tmp) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let acc = |label: &str| 100.0 * rows.iter().find(|r| r.label == label).unwrap().mean_best_accuracy;
    let (none, mse, cos, gcsa, rcsa, ctr) =
        (acc("none"), acc("mse"), acc("cosine"), acc("gcsa"), acc("rcsa"), acc("contrastive"));
    let structural_margin = [gcsa - mse, gcsa - cos, rcsa - mse, rcsa - cos].into_iter().fold(f64::INFINITY, f64::min);
    let below: Vec<&str> = [("mse", mse), ("cosine", cos), ("gcsa", gcsa), ("rcsa", rcsa), ("contrastive", ctr)]
        .into_iter()
        .filter(|(_, a)| *a <= none)
        .map(|(n, _)| n)
        .collect();
    let passed = structural_margin >= 1.0 && below.is_empty();
    outcome(
        passed,
        format!(
            "mean best acc: none {none:.2}, mse {mse:.2}, cosine {cos:.2}, gcsa {gcsa:.2}, rcsa {rcsa:.2}, \
             contrastive {ctr:.2}; min structural margin over mse/cosine {structural_margin:+.2} pts (≥ 1.0); \
             not above baseline: {}",
            if below.is_empty() { "none".to_owned() } else { below.join(", ") }
        ),
    )
}

fn sweep_robustness(tmp: &Path) -> Outcome {
    let grid = [0.1, 1.0, 5.0];
    let mut gcsa_cfg = desk(tmp);
    gcsa_cfg.training.loss = "gcsa".into();
    let mut mse_cfg = desk(tmp);
    mse_cfg.training.loss = "mse".into();
    let (g, m) = match (
        experiment::sweep(&gcsa_cfg, &grid, &grid, &DESK_SEEDS, &tmp.join("gcsa")),
        experiment::sweep(&mse_cfg, &grid, &grid, &DESK_SEEDS, &tmp.join("mse")),
    ) {
        (Ok(g), Ok(m)) => (g, m),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("run failed: {e}")),
    };
    let g_min = g.cells.iter().map(|c| c.improvement).fold(f64::INFINITY, f64::min);
    let m_min = m.cells.iter().map(|c| c.improvement).fold(f64::INFINITY, f64::min);
    let m_negative = m.cells.iter().filter(|c| c.improvement < 0.0).count();
    outcome(
        g_min >= 0.0 && m_negative >= 1,
        format!(
            "gcsa min improvement {:+.2} pts over 9 cells (≥ 0); mse negative in {m_negative}/9 cells (min {:+.2} pts)",
            100.0 * g_min,
            100.0 * m_min
        ),
    )
}

fn determinism(tmp: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_fedsaf");
    let run = |dir: &Path, threads: &str| {
        Command::new(bin)
            .args(["run", "--seed", "7", "--threads", threads, "--out"])
            .arg(dir)
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    };
    let (a, b, c) = (tmp.join("a"), tmp.join("b"), tmp.join("c"));
    if !(run(&a, "1") && run(&b, "1") && run(&c, "3")) {
        return outcome(false, "fedsaf run exited with failure".into());
    }
    let read = |d: &Path| std::fs::read(d.join("rounds.jsonl")).unwrap_or_default();
    let (ra, rb, rc) = (read(&a), read(&b), read(&c));
    let lines = ra.iter().filter(|&&x| x == b'\n').count();
    outcome(
        !ra.is_empty() && ra == rb && ra == rc,
        format!(
            "two runs byte-identical: {}; threaded run identical: {}; {lines} rounds, {} bytes",
            ra == rb,
            ra == rc,
            ra.len()
        ),
    )
}

#[derive(Deserialize)]
struct GoldenSplit {
    coord: f64,
    shape: f64,
    rigid: f64,
}

#[derive(Deserialize)]
struct GoldenCase {
    rows: usize,
    cols: usize,
    p: Vec<f64>,
    q: Vec<f64>,
    gcsa: f64,
    rcsa: f64,
    procrustes_z_p: GoldenSplit,
}

fn oracle_equivalence() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden_alignment.json");
    let cases: Vec<GoldenCase> = match std::fs::read_to_string(&path).map(|t| serde_json::from_str(&t)) {
        Ok(Ok(c)) => c,
        _ => return outcome(false, format!("cannot read {}", path.display())),
    };
    let mut worst = 0.0f64;
    for c in &cases {
        let p = FeatureMatrix::new(c.rows, c.cols, c.p.clone()).unwrap();
        let q = FeatureMatrix::new(c.rows, c.cols, c.q.clone()).unwrap();
        let diffs = match (loss_gcsa(&p, &q), loss_rcsa(&p, &q), procrustes_decompose(&p, &q)) {
            (Ok(g), Ok(r), Ok(s)) => [
                g.value - c.gcsa,
                r.value - c.rcsa,
                s.l_coord - c.procrustes_z_p.coord,
                s.l_shape - c.procrustes_z_p.shape,
                s.l_rigid - c.procrustes_z_p.rigid,
            ],
            _ => [f64::INFINITY; 5],
        };
        worst = diffs.iter().fold(worst, |w, d| w.max(d.abs()));
    }
    outcome(
        cases.len() == 5 && worst <= 1e-9,
        format!("{} golden cases, max |library − oracle| = {worst:.2e} (≤ 1e-9)", cases.len()),
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path().to_owned();
    type Check<'a> = (u32, &'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let checks: Vec<Check> = vec![
        (1, "GCSA invariance", Duration::from_secs(5), Box::new(gcsa_invariance)),
        (2, "RCSA invariance", Duration::from_secs(5), Box::new(rcsa_invariance)),
        (3, "Procrustes decomposition", Duration::from_secs(10), Box::new(procrustes_split)),
        (4, "gradient suite", Duration::from_secs(30), Box::new(gradient_suite)),
        (5, "contrastive decomposition", Duration::from_secs(30), Box::new(contrastive_split)),
        (6, "dimensionality trend", Duration::from_secs(180), Box::new(|| dimensionality_trend(&root.join("c6")))),
        (7, "alignment comparison", Duration::from_secs(600), Box::new(|| alignment_table(&root.join("c7")))),
        (8, "λ×γ robustness", Duration::from_secs(1800), Box::new(|| sweep_robustness(&root.join("c8")))),
        (9, "run determinism", Duration::from_secs(120), Box::new(|| determinism(&root.join("c9")))),
        (10, "oracle equivalence", Duration::from_secs(5), Box::new(oracle_equivalence)),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in &checks {
        let start = Instant::now();
        let mut result = check();
        let elapsed = start.elapsed();
        if elapsed > *budget {
            result.passed = false;
            result.detail += &format!("; over time budget {budget:?}");
        }
        println!(
            "criterion {id:>2} {:<4} {name} [{:.2}s]: {}",
            if result.passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            result.detail
        );
        failed += usize::from(!result.passed);
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
