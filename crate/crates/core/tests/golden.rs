//! Library values against numbers produced ahead of time by the independent
//! numpy script in `fixtures/gen_golden.py`.

use fedsaf_core::losses::{loss_gcsa, loss_rcsa, procrustes_decompose};
use fedsaf_core::FeatureMatrix;
use serde::Deserialize;

#[derive(Deserialize)]
struct Split {
    coord: f64,
    shape: f64,
    rigid: f64,
}

#[derive(Deserialize)]
struct Case {
    seed: u64,
    rows: usize,
    cols: usize,
    p: Vec<f64>,
    q: Vec<f64>,
    gcsa: f64,
    rcsa: f64,
    procrustes_z_p: Split,
}

const TOL: f64 = 1e-9;

fn cases() -> Vec<Case> {
    serde_json::from_str(include_str!("fixtures/golden_alignment.json")).unwrap()
}

#[test]
fn fixture_has_five_cases() {
    assert_eq!(cases().len(), 5);
}

#[test]
fn gcsa_and_rcsa_match_oracle() {
    for c in cases() {
        let p = FeatureMatrix::new(c.rows, c.cols, c.p).unwrap();
        let q = FeatureMatrix::new(c.rows, c.cols, c.q).unwrap();
        let g = loss_gcsa(&p, &q).unwrap().value;
        let r = loss_rcsa(&p, &q).unwrap().value;
        assert!((g - c.gcsa).abs() <= TOL, "seed {}: gcsa {g} vs {}", c.seed, c.gcsa);
        assert!((r - c.rcsa).abs() <= TOL, "seed {}: rcsa {r} vs {}", c.seed, c.rcsa);
        assert!(c.gcsa > 0.0 && c.rcsa > 0.0);
    }
}

#[test]
fn procrustes_matches_oracle() {
    for c in cases() {
        let p = FeatureMatrix::new(c.rows, c.cols, c.p).unwrap();
        let q = FeatureMatrix::new(c.rows, c.cols, c.q).unwrap();
        let d = procrustes_decompose(&p, &q).unwrap();
        let want = &c.procrustes_z_p;
        assert!((d.l_coord - want.coord).abs() <= TOL, "seed {}: coord", c.seed);
        assert!((d.l_shape - want.shape).abs() <= TOL, "seed {}: shape", c.seed);
        assert!((d.l_rigid - want.rigid).abs() <= TOL, "seed {}: rigid", c.seed);
    }
}
