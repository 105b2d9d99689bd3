//! Seeded property suites run by `fedsaf selftest`.

use fedsaf_core::data::{generate_mixture, partition_dirichlet, MixtureParams};
use fedsaf_core::fed::{aggregate_prototypes, local_objective, run_experiment, ExperimentPlan, PrototypeSet, RoundConfig, Scenario};
use fedsaf_core::losses::{check_gradient, check_gradient_flat, loss_contrastive, loss_gcsa, loss_rcsa, procrustes_decompose, AlignmentKind};
use fedsaf_core::model::{build_model, htfe4, ArchitectureSpec};
use fedsaf_core::rng::{rng_from, SimRng};
use fedsaf_core::tensor::random_orthogonal_with;
use fedsaf_core::FeatureMatrix;
use rand::Rng;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const TRIALS: u64 = 200;

fn trial_rng(suite: u64, trial: u64) -> SimRng {
    rng_from(0x5e1f, &[suite, trial])
}

fn random_shape(rng: &mut SimRng) -> (usize, usize) {
    (rng.random_range(3..=8), rng.random_range(3..=16))
}

fn gcsa_invariance() -> Check {
    let mut worst = 0.0f64;
    for t in 0..TRIALS {
        let mut rng = trial_rng(1, t);
        let (n, d) = random_shape(&mut rng);
        let p = FeatureMatrix::random_normal(n, d, &mut rng);
        let r = random_orthogonal_with(d, &mut rng);
        let alpha = rng.random_range(1e-3..=10.0);
        let b: Vec<f64> = FeatureMatrix::random_normal(1, d, &mut rng).into_vec();
        let q = p.matmul(&r).unwrap().scale(alpha).add_row_vector(&b).unwrap();
        worst = worst.max(loss_gcsa(&p, &q).map_or(f64::INFINITY, |l| l.value));
    }
    Check { name: "gcsa invariance", passed: worst <= 1e-10, detail: format!("max {worst:.3e} over {TRIALS} trials") }
}

fn rcsa_invariance() -> Check {
    let mut worst = 0.0f64;
    let mut min_shift = f64::INFINITY;
    for t in 0..TRIALS {
        let mut rng = trial_rng(2, t);
        let (n, d) = random_shape(&mut rng);
        let p = FeatureMatrix::random_normal(n, d, &mut rng);
        let r = random_orthogonal_with(d, &mut rng);
        worst = worst.max(loss_rcsa(&p, &p.matmul(&r).unwrap()).map_or(f64::INFINITY, |l| l.value));
        let b: Vec<f64> = FeatureMatrix::random_normal(1, d, &mut rng).into_vec();
        let shifted = p.add_row_vector(&b).unwrap();
        min_shift = min_shift.min(loss_rcsa(&p, &shifted).map_or(0.0, |l| l.value));
    }
    Check {
        name: "rcsa invariance",
        passed: worst <= 1e-10 && min_shift > 1e-6,
        detail: format!("rotation max {worst:.3e}, translation min {min_shift:.3e}"),
    }
}

fn procrustes() -> Check {
    let mut gap = 0.0f64;
    let mut min_rigid = f64::INFINITY;
    let mut rotated_shape = 0.0f64;
    for t in 0..TRIALS {
        let mut rng = trial_rng(3, t);
        let (n, d) = random_shape(&mut rng);
        let p = FeatureMatrix::random_normal(n, d, &mut rng);
        let z = FeatureMatrix::random_normal(n, d, &mut rng);
        match procrustes_decompose(&z, &p) {
            Ok(dec) => {
                gap = gap.max((dec.l_coord - dec.l_shape - dec.l_rigid).abs());
                min_rigid = min_rigid.min(dec.l_rigid);
            }
            Err(_) => gap = f64::INFINITY,
        }
        let r0 = random_orthogonal_with(d, &mut rng);
        rotated_shape = rotated_shape.max(procrustes_decompose(&p.matmul(&r0).unwrap(), &p).map_or(f64::INFINITY, |d| d.l_shape));
    }
    Check {
        name: "procrustes decomposition",
        passed: gap <= 1e-9 && min_rigid >= -1e-12 && rotated_shape <= 1e-9,
        detail: format!("gap {gap:.3e}, min rigid {min_rigid:.3e}, rotated shape {rotated_shape:.3e}"),
    }
}

fn gradients() -> Check {
    let mut rng = trial_rng(4, 0);
    let a = FeatureMatrix::random_normal(5, 8, &mut rng);
    let b = FeatureMatrix::random_normal(5, 8, &mut rng);
    let protos = FeatureMatrix::random_normal(3, 8, &mut rng);
    let labels = [0, 1, 2, 1, 0];
    let mut worst = 0.0f64;
    let mut ok = true;
    for kind in [AlignmentKind::Mse, AlignmentKind::Cosine, AlignmentKind::Gcsa, AlignmentKind::Rcsa] {
        let r = check_gradient(kind, &a, &b, &labels, 1e-5, 1e-4);
        worst = worst.max(r.max_rel_error);
        ok &= r.passed;
    }
    let r = check_gradient(AlignmentKind::Contrastive { temperature: 0.5 }, &a, &protos, &labels, 1e-5, 1e-4);
    worst = worst.max(r.max_rel_error);
    ok &= r.passed;

    let spec = ArchitectureSpec::new(vec![5], 3).unwrap();
    let model = build_model(&spec, 4, 4, 7).unwrap();
    let x = FeatureMatrix::random_normal(8, 4, &mut rng);
    let y = [0, 1, 2, 3, 0, 1, 2, 3];
    let g = FeatureMatrix::random_normal(4, 3, &mut rng);
    let mut global = PrototypeSet::new();
    for c in 0..4 {
        global.insert(c, g.row(c).to_vec(), 2).unwrap();
    }
    let cfg = RoundConfig { lambda: 0.7, gamma: 1.3, ..RoundConfig::default() };
    let (_, grads) = local_objective(&model, &x, &y, &global, &cfg).unwrap();
    let r = check_gradient_flat(
        &model.params_flat(),
        &grads.flatten(),
        |p| {
            let mut probe = model.clone();
            probe.set_params_flat(p)?;
            Ok(local_objective(&probe, &x, &y, &global, &cfg)?.0.total)
        },
        1e-5,
        1e-4,
    );
    worst = worst.max(r.max_rel_error);
    ok &= r.passed;
    Check { name: "analytic gradients", passed: ok, detail: format!("max relative error {worst:.3e}") }
}

fn contrastive_split() -> Check {
    let mut gap = 0.0f64;
    for t in 0..100 {
        let mut rng = trial_rng(5, t);
        let c = rng.random_range(2..=6);
        let z = FeatureMatrix::random_normal(7, 5, &mut rng);
        let p = FeatureMatrix::random_normal(c, 5, &mut rng);
        let labels: Vec<usize> = (0..7).map(|_| rng.random_range(0..c)).collect();
        match loss_contrastive(&z, &p, &labels, 0.5) {
            Ok(l) => gap = gap.max((l.total.value - l.alignment.value - l.uniformity.value).abs()),
            Err(_) => gap = f64::INFINITY,
        }
    }
    let mut rng = trial_rng(5, 1000);
    let z = FeatureMatrix::random_normal(4, 3, &mut rng);
    let p = FeatureMatrix::random_normal(1, 3, &mut rng);
    let single = loss_contrastive(&z, &p, &[0; 4], 0.5).map_or(f64::INFINITY, |l| l.total.value.abs());
    Check {
        name: "contrastive decomposition",
        passed: gap <= 1e-9 && single <= 1e-12,
        detail: format!("max gap {gap:.3e}, single-class total {single:.3e}"),
    }
}

fn aggregation() -> Check {
    let mut rng = trial_rng(6, 0);
    let uploads: Vec<PrototypeSet> = (0..5)
        .map(|_| {
            let mut s = PrototypeSet::new();
            for c in 0..4 {
                if rng.random_bool(0.7) {
                    let v = FeatureMatrix::random_normal(1, 3, &mut rng).into_vec();
                    s.insert(c, v, rng.random_range(1..20)).unwrap();
                }
            }
            s
        })
        .collect();
    let forward = aggregate_prototypes(&uploads, None).unwrap();
    let reversed: Vec<_> = uploads.iter().rev().cloned().collect();
    let backward = aggregate_prototypes(&reversed, None).unwrap();
    let mut gap = 0.0f64;
    let mut convex = true;
    for (c, e) in forward.iter() {
        let other = backward.get(c).unwrap();
        for (k, v) in e.vector.iter().enumerate() {
            gap = gap.max((v - other.vector[k]).abs());
            let vals: Vec<f64> = uploads.iter().filter_map(|u| u.get(c)).map(|x| x.vector[k]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            convex &= *v >= lo - 1e-12 && *v <= hi + 1e-12;
        }
    }
    Check {
        name: "aggregation order and convexity",
        passed: gap <= 1e-12 && convex,
        detail: format!("order gap {gap:.3e}"),
    }
}

fn determinism() -> Check {
    let ds = generate_mixture(&MixtureParams { samples_per_class: 20, ..MixtureParams::default() }).unwrap();
    let shards = partition_dirichlet(&ds, 0.5, 4, 1).unwrap();
    let plan = ExperimentPlan {
        round: RoundConfig { batch_size: 8, ..RoundConfig::default() },
        archs: htfe4(8),
        rounds: 2,
        seed: 3,
        scenario: Scenario::Hetero,
        num_classes: 10,
        normalize_stacked: false,
    };
    let a = run_experiment(&plan, &shards).map(|o| o.reports);
    let b = run_experiment(&plan, &shards).map(|o| o.reports);
    let passed = matches!((&a, &b), (Ok(x), Ok(y)) if x == y);
    Check { name: "run determinism", passed, detail: "two identical runs".into() }
}

pub fn run_all() -> Vec<Check> {
    vec![
        gcsa_invariance(),
        rcsa_invariance(),
        procrustes(),
        gradients(),
        contrastive_split(),
        aggregation(),
        determinism(),
    ]
}
