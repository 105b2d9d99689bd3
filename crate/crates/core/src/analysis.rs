//! Spectrum diagnostics of stacked client prototypes and per-round reports.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::Scenario;
use crate::tensor::{normalize_rows, svd, FeatureMatrix};

/// Fraction of spectral energy the threshold dimension must capture.
pub const ENERGY_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveDimensionality {
    /// Smallest `k` whose top-`k` squared singular values hold 95% of the
    /// total.
    pub threshold_dim: usize,
    /// `(Σσ²)² / Σσ⁴`.
    pub participation_ratio: f64,
}

/// Effective dimensionality of a stack of prototype rows.
pub fn effective_dimensionality(stacked: &FeatureMatrix) -> Result<EffectiveDimensionality> {
    if stacked.rows() < 2 {
        return Err(Error::contract("effective_dimensionality", "needs at least 2 stacked rows"));
    }
    let peak = stacked.max_abs();
    if peak == 0.0 {
        return Err(Error::degenerate("effective_dimensionality", "all-zero matrix"));
    }
    // Both measures are scale-free; dividing by the largest entry keeps σ⁴
    // representable for very large prototypes.
    let energies: Vec<f64> = svd(&stacked.scale(1.0 / peak))?.singular_values.iter().map(|s| s * s).collect();
    let total: f64 = energies.iter().sum();
    let target = ENERGY_THRESHOLD * total * (1.0 - 1e-12);
    let mut cum = 0.0;
    let mut threshold_dim = energies.len();
    for (k, e) in energies.iter().enumerate() {
        cum += e;
        if cum >= target {
            threshold_dim = k + 1;
            break;
        }
    }
    let fourth: f64 = energies.iter().map(|e| e * e).sum();
    Ok(EffectiveDimensionality { threshold_dim, participation_ratio: total * total / fourth })
}

/// [`effective_dimensionality`] after optionally scaling every row to unit
/// norm.
pub fn effective_dimensionality_with(stacked: &FeatureMatrix, normalize: bool) -> Result<EffectiveDimensionality> {
    if normalize {
        effective_dimensionality(&normalize_rows(stacked)?)
    } else {
        effective_dimensionality(stacked)
    }
}

/// Per-client mean local loss terms over one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sup: f64,
    pub proto: f64,
    pub inst: f64,
}

/// Metrics recorded at the end of every communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Test accuracy of every client on its own test split, by client id.
    pub per_client_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Highest `mean_accuracy` seen so far in the run.
    pub best_mean_accuracy: f64,
    /// `None` for clients that did not train this round.
    pub loss_terms: Vec<Option<LossTerms>>,
    /// Structural alignment terms skipped this round (fewer than three rows
    /// or degenerate descriptors), summed over clients.
    pub skipped_structural_steps: usize,
    pub participants: Vec<usize>,
    pub evaluated_test_samples: usize,
    /// Of the prototypes uploaded this round, stacked.
    pub effective_dimensionality: Option<EffectiveDimensionality>,
}

impl RoundReport {
    /// Best `mean_accuracy` across a run (0 for an empty run).
    pub fn best_of(reports: &[RoundReport]) -> f64 {
        reports.last().map_or(0.0, |r| r.best_mean_accuracy)
    }
}

/// A finished run of one model-sharing setting.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub data_seed: u64,
    pub reports: Vec<RoundReport>,
}

impl ScenarioRun {
    pub fn final_dimensionality(&self) -> Result<EffectiveDimensionality> {
        self.reports
            .last()
            .and_then(|r| r.effective_dimensionality)
            .ok_or_else(|| {
                Error::contract(
                    "compare_scenarios",
                    format!("{:?} run has no final effective dimensionality", self.scenario),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioComparison {
    pub data_seed: u64,
    pub homo_shared: EffectiveDimensionality,
    pub homo_local: EffectiveDimensionality,
    pub hetero_local: EffectiveDimensionality,
    /// `hetero_local.threshold_dim >= homo_shared.threshold_dim`.
    pub ordering_holds: bool,
    /// Same comparison, strict.
    pub hetero_strictly_higher: bool,
}

/// Final-round effective dimensionality of the three settings, checked for
/// the Hetero-Local ≥ Homo-Shared ordering. Homo-Local is reported only.
pub fn compare_scenarios(
    homo_shared: &ScenarioRun,
    homo_local: &ScenarioRun,
    hetero_local: &ScenarioRun,
) -> Result<ScenarioComparison> {
    let expected = [Scenario::HomoShared, Scenario::HomoLocal, Scenario::Hetero];
    for (run, want) in [homo_shared, homo_local, hetero_local].iter().zip(expected) {
        if run.scenario != want {
            return Err(Error::contract(
                "compare_scenarios",
                format!("expected a {want:?} run, got {:?}", run.scenario),
            ));
        }
    }
    if homo_local.data_seed != homo_shared.data_seed || hetero_local.data_seed != homo_shared.data_seed {
        return Err(Error::contract(
            "compare_scenarios",
            format!(
                "data seeds differ: {} / {} / {}",
                homo_shared.data_seed, homo_local.data_seed, hetero_local.data_seed
            ),
        ));
    }
    let shared = homo_shared.final_dimensionality()?;
    let local = homo_local.final_dimensionality()?;
    let hetero = hetero_local.final_dimensionality()?;
    Ok(ScenarioComparison {
        data_seed: homo_shared.data_seed,
        homo_shared: shared,
        homo_local: local,
        hetero_local: hetero,
        ordering_holds: hetero.threshold_dim >= shared.threshold_dim,
        hetero_strictly_higher: hetero.threshold_dim > shared.threshold_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;
    use crate::tensor::random_orthogonal;
    use alloc::vec;
    use rand::SeedableRng;

    #[test]
    fn identical_rows_are_rank_one() {
        let m = FeatureMatrix::from_rows(&[[1.0, 2.0, 3.0]; 5]).unwrap();
        let e = effective_dimensionality(&m).unwrap();
        assert_eq!(e.threshold_dim, 1);
        assert!((e.participation_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_spectrum_counts_rows() {
        for k in 1..=6 {
            let r = random_orthogonal(6, k as u64);
            let rows = r.select_rows(&(0..k).collect::<Vec<_>>()).unwrap().scale(2.0);
            if k == 1 {
                assert!(effective_dimensionality(&rows).is_err());
                continue;
            }
            let e = effective_dimensionality(&rows).unwrap();
            assert!((e.participation_ratio - k as f64).abs() < 1e-9);
            assert_eq!(e.threshold_dim, k);
        }
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        assert!(effective_dimensionality(&FeatureMatrix::zeros(3, 2)).unwrap_err().is_degenerate());
    }

    #[test]
    fn invariant_to_row_permutation_and_rotation() {
        let m = FeatureMatrix::random_normal(7, 5, &mut SimRng::seed_from_u64(1));
        let base = effective_dimensionality(&m).unwrap();
        let perm = m.select_rows(&[6, 2, 0, 5, 1, 3, 4]).unwrap();
        let rot = m.matmul(&random_orthogonal(5, 2)).unwrap();
        for other in [perm, rot] {
            let e = effective_dimensionality(&other).unwrap();
            assert_eq!(e.threshold_dim, base.threshold_dim);
            assert!((e.participation_ratio - base.participation_ratio).abs() < 1e-9);
        }
        assert!(base.participation_ratio >= 1.0 && base.participation_ratio <= 5.0);
    }

    #[test]
    fn huge_entries_do_not_overflow() {
        let m = FeatureMatrix::from_rows(&[[1e200, 0.0], [0.0, 1e200], [1e200, 1e200]]).unwrap();
        let e = effective_dimensionality(&m).unwrap();
        let small = effective_dimensionality(&m.scale(1e-200)).unwrap();
        assert_eq!(e.threshold_dim, small.threshold_dim);
        assert!((e.participation_ratio - small.participation_ratio).abs() < 1e-12);
    }

    #[test]
    fn normalization_flag() {
        let m = FeatureMatrix::from_rows(&[[10.0, 0.0], [0.0, 0.1], [0.0, 0.1]]).unwrap();
        assert_eq!(effective_dimensionality_with(&m, false).unwrap().threshold_dim, 1);
        assert_eq!(effective_dimensionality_with(&m, true).unwrap().threshold_dim, 2);
    }

    fn run(scenario: Scenario, seed: u64, dims: usize) -> ScenarioRun {
        let ed = EffectiveDimensionality { threshold_dim: dims, participation_ratio: dims as f64 };
        let report = RoundReport {
            round: 0,
            per_client_accuracy: vec![1.0],
            mean_accuracy: 1.0,
            best_mean_accuracy: 1.0,
            loss_terms: vec![None],
            skipped_structural_steps: 0,
            participants: vec![0],
            evaluated_test_samples: 1,
            effective_dimensionality: Some(ed),
        };
        ScenarioRun { scenario, data_seed: seed, reports: vec![report] }
    }

    #[test]
    fn comparison_checks_seeds_and_order() {
        let c = compare_scenarios(
            &run(Scenario::HomoShared, 1, 2),
            &run(Scenario::HomoLocal, 1, 3),
            &run(Scenario::Hetero, 1, 5),
        )
        .unwrap();
        assert!(c.ordering_holds && c.hetero_strictly_higher);
        let err = compare_scenarios(
            &run(Scenario::HomoShared, 1, 2),
            &run(Scenario::HomoLocal, 2, 3),
            &run(Scenario::Hetero, 1, 5),
        );
        assert!(matches!(err, Err(Error::Contract { .. })));
        let swapped = compare_scenarios(
            &run(Scenario::Hetero, 1, 2),
            &run(Scenario::HomoLocal, 1, 3),
            &run(Scenario::HomoShared, 1, 5),
        );
        assert!(swapped.is_err());
    }
}
