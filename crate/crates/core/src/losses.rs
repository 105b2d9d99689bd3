//! Alignment losses with analytic gradients.
//!
//! Coordinate losses ([`loss_mse`], [`loss_cosine`], [`loss_contrastive`])
//! compare rows pointwise. Structural losses ([`loss_gcsa`], [`loss_rcsa`])
//! compare relational descriptors (centered Gram matrix, squared-distance
//! RDM) through `1 − cosine`, so they ignore the coordinate basis each side
//! lives in. All gradients are taken with respect to the first argument only;
//! the second argument is a fixed target.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    center_rows, dot, gram_centered, norm, normalize_rows, rdm_squared, svd, upper_pairs,
    FeatureMatrix, EPS_NORM,
};

/// Which discrepancy to use when aligning embeddings with prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum AlignmentKind {
    Mse,
    Cosine,
    Gcsa,
    Rcsa,
    Contrastive { temperature: f64 },
}

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

impl AlignmentKind {
    pub const ALL_NAMES: [&'static str; 5] = ["mse", "cosine", "gcsa", "rcsa", "contrastive"];

    pub fn contrastive(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::contract(
                "AlignmentKind::contrastive",
                format!("temperature must be positive, got {temperature}"),
            ));
        }
        Ok(AlignmentKind::Contrastive { temperature })
    }

    /// GCSA and RCSA compare relational descriptors rather than rows.
    pub fn is_structural(&self) -> bool {
        matches!(self, AlignmentKind::Gcsa | AlignmentKind::Rcsa)
    }

    pub fn name(&self) -> &'static str {
        match self {
            AlignmentKind::Mse => "mse",
            AlignmentKind::Cosine => "cosine",
            AlignmentKind::Gcsa => "gcsa",
            AlignmentKind::Rcsa => "rcsa",
            AlignmentKind::Contrastive { .. } => "contrastive",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let AlignmentKind::Contrastive { temperature } = *self {
            AlignmentKind::contrastive(temperature)?;
        }
        Ok(())
    }
}

impl fmt::Display for AlignmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlignmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(AlignmentKind::Mse),
            "cosine" => Ok(AlignmentKind::Cosine),
            "gcsa" => Ok(AlignmentKind::Gcsa),
            "rcsa" => Ok(AlignmentKind::Rcsa),
            "contrastive" => Ok(AlignmentKind::Contrastive { temperature: DEFAULT_TEMPERATURE }),
            other => Err(Error::contract(
                "AlignmentKind::from_str",
                format!("unknown alignment `{other}` (expected one of mse, cosine, gcsa, rcsa, contrastive)"),
            )),
        }
    }
}

/// A loss value together with its gradient with respect to the first input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValueWithGrad {
    pub value: f64,
    pub grad: FeatureMatrix,
}

fn check_same_shape(op: &'static str, a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(
            op,
            format!("shape {}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    Ok(())
}

fn check_same_rows(op: &'static str, a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::contract(op, format!("row count {} vs {}", a.rows(), b.rows())));
    }
    Ok(())
}

/// Mean over rows of `‖aᵢ − bᵢ‖²`.
pub fn loss_mse(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<LossValueWithGrad> {
    check_same_shape("loss_mse", a, b)?;
    let n = a.rows() as f64;
    let diff = a.sub(b)?;
    let value = diff.as_slice().iter().map(|x| x * x).sum::<f64>() / n;
    Ok(LossValueWithGrad { value, grad: diff.scale(2.0 / n) })
}

/// Mean over rows of `1 − cos(aᵢ, bᵢ)`.
pub fn loss_cosine(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<LossValueWithGrad> {
    check_same_shape("loss_cosine", a, b)?;
    let a_hat = normalize_rows(a)?;
    let b_hat = normalize_rows(b)?;
    let n = a.rows() as f64;
    let mut value = 0.0;
    let mut grad = FeatureMatrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let (ah, bh) = (a_hat.row(i), b_hat.row(i));
        let cos = dot(ah, bh);
        value += 1.0 - cos;
        let len = a.row_norm(i);
        for ((g, &x), &y) in grad.row_mut(i).iter_mut().zip(ah).zip(bh) {
            *g = -(y - cos * x) / (len * n);
        }
    }
    Ok(LossValueWithGrad { value: (value / n).max(0.0), grad })
}

/// `1 − ⟨u, v⟩ / (‖u‖‖v‖)` and its gradient with respect to `u`.
fn one_minus_cosine(u: &[f64], v: &[f64]) -> (f64, Vec<f64>) {
    let nu = norm(u);
    let nv = norm(v);
    let c = dot(u, v);
    let value = 1.0 - c / (nu * nv);
    let grad = u
        .iter()
        .zip(v)
        .map(|(&x, &y)| -(y / (nu * nv) - c * x / (nu * nu * nu * nv)))
        .collect();
    (value.max(0.0), grad)
}

/// Gram-cosine structural alignment:
/// `1 − ⟨K_P, K_Q⟩ / (‖K_P‖_F ‖K_Q‖_F)` with `K = P_c P_cᵀ`.
///
/// Invariant to translation, orthogonal transforms and positive scaling of
/// either argument. Requires equal row counts; column counts may differ.
pub fn loss_gcsa(p: &FeatureMatrix, q: &FeatureMatrix) -> Result<LossValueWithGrad> {
    check_same_rows("loss_gcsa", p, q)?;
    let kp = gram_centered(p)?;
    let kq = gram_centered(q)?;
    for (k, m, name) in [(&kp, p, "first"), (&kq, q, "second")] {
        let norm = m.frobenius_norm();
        let scale = (norm * norm).max(1.0);
        if k.frobenius_norm() <= EPS_NORM * EPS_NORM * scale {
            return Err(Error::degenerate(
                "loss_gcsa",
                format!("centered Gram of the {name} argument is zero (all rows identical)"),
            ));
        }
    }
    let (value, g) = one_minus_cosine(kp.as_slice(), kq.as_slice());
    // dL/dP = 2 G P_c for symmetric G; G has zero row sums, so the centering
    // Jacobian leaves it unchanged.
    let g = FeatureMatrix::new(p.rows(), p.rows(), g)?;
    let grad = g.matmul(&center_rows(p))?.scale(2.0);
    Ok(LossValueWithGrad { value, grad })
}

/// RDM-cosine structural alignment: `1 − cos(vec(RDM_P), vec(RDM_Q))` over
/// upper-triangular squared distances of row-normalized inputs.
///
/// Invariant to orthogonal transforms; sensitive to translation.
pub fn loss_rcsa(p: &FeatureMatrix, q: &FeatureMatrix) -> Result<LossValueWithGrad> {
    check_same_rows("loss_rcsa", p, q)?;
    let rp = rdm_squared(p)?;
    let rq = rdm_squared(q)?;
    for (r, name) in [(&rp, "first"), (&rq, "second")] {
        if norm(r) <= EPS_NORM {
            return Err(Error::degenerate(
                "loss_rcsa",
                format!("RDM of the {name} argument is zero (all normalized rows identical)"),
            ));
        }
    }
    let (value, g) = one_minus_cosine(&rp, &rq);

    let n = p.rows();
    let u = normalize_rows(p)?;
    // Gradient with respect to the normalized rows.
    let mut gu = FeatureMatrix::zeros(n, p.cols());
    for ((i, j), gij) in upper_pairs(n).zip(&g) {
        for k in 0..p.cols() {
            let d = 2.0 * gij * (u.get(i, k) - u.get(j, k));
            gu.set(i, k, gu.get(i, k) + d);
            gu.set(j, k, gu.get(j, k) - d);
        }
    }
    // Back through x ↦ x/‖x‖: (I − ûûᵀ) g / ‖x‖.
    let mut grad = gu;
    for i in 0..n {
        let len = p.row_norm(i);
        let proj = dot(grad.row(i), u.row(i));
        let ui = u.row(i).to_vec();
        for (gk, uk) in grad.row_mut(i).iter_mut().zip(ui) {
            *gk = (*gk - proj * uk) / len;
        }
    }
    Ok(LossValueWithGrad { value, grad })
}

/// InfoNCE-style prototype loss split into its alignment and uniformity terms.
///
/// `total` is non-negative; `alignment` (`−sim/τ`) is not.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub total: LossValueWithGrad,
    pub alignment: LossValueWithGrad,
    pub uniformity: LossValueWithGrad,
    pub per_sample_total: Vec<f64>,
    pub per_sample_alignment: Vec<f64>,
    pub per_sample_uniformity: Vec<f64>,
}

/// Contrastive loss of embeddings `z` against the prototype rows, with cosine
/// similarity and temperature `temperature`, averaged over the batch.
pub fn loss_contrastive(
    z: &FeatureMatrix,
    prototypes: &FeatureMatrix,
    labels: &[usize],
    temperature: f64,
) -> Result<ContrastiveLoss> {
    const OP: &str = "loss_contrastive";
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::contract(OP, format!("temperature must be positive, got {temperature}")));
    }
    if labels.len() != z.rows() {
        return Err(Error::contract(OP, format!("{} labels for {} rows", labels.len(), z.rows())));
    }
    if z.cols() != prototypes.cols() {
        return Err(Error::contract(
            OP,
            format!("embedding dim {} vs prototype dim {}", z.cols(), prototypes.cols()),
        ));
    }
    let classes = prototypes.rows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(OP, format!("label {bad} out of range for {classes} prototypes")));
    }
    let z_hat = normalize_rows(z)?;
    let p_hat = normalize_rows(prototypes)?;
    let sims = z_hat.matmul_transpose(&p_hat)?;

    let n = z.rows();
    let nf = n as f64;
    let mut g_total = FeatureMatrix::zeros(n, z.cols());
    let mut g_align = FeatureMatrix::zeros(n, z.cols());
    let mut g_unif = FeatureMatrix::zeros(n, z.cols());
    let mut per_sample_total = Vec::with_capacity(n);
    let mut per_sample_alignment = Vec::with_capacity(n);
    let mut per_sample_uniformity = Vec::with_capacity(n);
    let mut logits = vec![0.0; classes];
    let mut probs = vec![0.0; classes];

    for i in 0..n {
        let y = labels[i];
        logits.iter_mut().zip(sims.row(i)).for_each(|(l, s)| *l = s / temperature);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|l| libm::exp(l - max)).sum();
        let lse = max + libm::log(sum_exp);
        probs.iter_mut().zip(&logits).for_each(|(p, l)| *p = libm::exp(l - lse));

        let align = -logits[y];
        per_sample_alignment.push(align);
        per_sample_uniformity.push(lse);
        // Direct −log softmax; falls back to the split form if p_y underflows.
        per_sample_total.push(if probs[y] > 0.0 { -libm::log(probs[y]) } else { lse + align });

        // d sim_ij / d z_i = (p̂_j − sim_ij ẑ_i) / ‖z_i‖
        let len = z.row_norm(i);
        let zi = z_hat.row(i);
        let d_sim = |j: usize, k: usize| (p_hat.get(j, k) - sims.get(i, j) * zi[k]) / len;
        for k in 0..z.cols() {
            let ga = -d_sim(y, k) / (temperature * nf);
            let gu: f64 = (0..classes).map(|j| probs[j] * d_sim(j, k)).sum::<f64>() / (temperature * nf);
            g_align.set(i, k, ga);
            g_unif.set(i, k, gu);
            g_total.set(i, k, ga + gu);
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / nf;
    Ok(ContrastiveLoss {
        total: LossValueWithGrad { value: mean(&per_sample_total), grad: g_total },
        alignment: LossValueWithGrad { value: mean(&per_sample_alignment), grad: g_align },
        uniformity: LossValueWithGrad { value: mean(&per_sample_uniformity), grad: g_unif },
        per_sample_total,
        per_sample_alignment,
        per_sample_uniformity,
    })
}

/// Split of the normalized coordinate loss `‖Ẑ − P̂‖²_F` into a
/// rotation-invariant shape term and a rigid basis-matching penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesDecomposition {
    pub l_coord: f64,
    /// `min_R ‖Ẑ − P̂R‖²_F` over orthogonal `R`.
    pub l_shape: f64,
    /// `2(⟨Ẑ, P̂R*⟩ − ⟨Ẑ, P̂⟩)`, never negative up to rounding.
    pub l_rigid: f64,
    /// Optimal orthogonal `R*` (d × d).
    pub r_star: FeatureMatrix,
}

/// Row-normalizes both inputs, solves the orthogonal Procrustes problem
/// `R* = U Vᵀ` from `svd(P̂ᵀ Ẑ)` and reports the three loss terms.
pub fn procrustes_decompose(z: &FeatureMatrix, p: &FeatureMatrix) -> Result<ProcrustesDecomposition> {
    check_same_shape("procrustes_decompose", z, p)?;
    let z_hat = normalize_rows(z)?;
    let p_hat = normalize_rows(p)?;
    let s = svd(&p_hat.transpose_matmul(&z_hat)?)?;
    let r_star = s.left_factor.matmul_transpose(&s.right_factor)?;
    let p_rot = p_hat.matmul(&r_star)?;
    let diff = z_hat.sub(&p_hat)?;
    let l_coord = diff.frobenius_inner(&diff)?;
    let diff = z_hat.sub(&p_rot)?;
    let l_shape = diff.frobenius_inner(&diff)?;
    let l_rigid = 2.0 * (z_hat.frobenius_inner(&p_rot)? - z_hat.frobenius_inner(&p_hat)?);
    Ok(ProcrustesDecomposition { l_coord, l_shape, l_rigid, r_star })
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub entries: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the loss itself could not be evaluated.
    pub failure: Option<String>,
}

/// Entries where both gradients are below this are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Central-difference check of any scalar function of a flat parameter
/// vector against its analytic gradient.
pub fn check_gradient_flat(
    params: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    step: f64,
    tolerance: f64,
) -> GradientReport {
    let mut report = GradientReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        entries: params.len(),
        tolerance,
        passed: false,
        failure: None,
    };
    if analytic.len() != params.len() {
        report.failure = Some(format!("{} gradient entries for {} parameters", analytic.len(), params.len()));
        return report;
    }
    let mut x = params.to_vec();
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + step;
        let plus = f(&x);
        x[k] = orig - step;
        let minus = f(&x);
        x[k] = orig;
        let (plus, minus) = match (plus, minus) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                report.failure = Some(format!("{e}"));
                return report;
            }
        };
        let numeric = (plus - minus) / (2.0 * step);
        let rel = relative_error(analytic[k], numeric);
        report.max_abs_error = report.max_abs_error.max((analytic[k] - numeric).abs());
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst_index = k;
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    report
}

/// Gradient check of an alignment loss with respect to its first input.
///
/// For [`AlignmentKind::Contrastive`], `second` holds the prototypes and
/// `labels` indexes its rows; the other kinds ignore `labels`.
pub fn check_gradient(
    kind: AlignmentKind,
    first: &FeatureMatrix,
    second: &FeatureMatrix,
    labels: &[usize],
    step: f64,
    tolerance: f64,
) -> GradientReport {
    let eval = |m: &FeatureMatrix| -> Result<LossValueWithGrad> {
        match kind {
            AlignmentKind::Mse => loss_mse(m, second),
            AlignmentKind::Cosine => loss_cosine(m, second),
            AlignmentKind::Gcsa => loss_gcsa(m, second),
            AlignmentKind::Rcsa => loss_rcsa(m, second),
            AlignmentKind::Contrastive { temperature } => {
                loss_contrastive(m, second, labels, temperature).map(|c| c.total)
            }
        }
    };
    let analytic = match eval(first) {
        Ok(l) => l.grad,
        Err(e) => {
            return GradientReport {
                max_rel_error: f64::INFINITY,
                max_abs_error: f64::INFINITY,
                worst_index: 0,
                entries: 0,
                tolerance,
                passed: false,
                failure: Some(format!("{e}")),
            }
        }
    };
    let (rows, cols) = first.shape();
    check_gradient_flat(
        first.as_slice(),
        analytic.as_slice(),
        |x| eval(&FeatureMatrix::new(rows, cols, x.to_vec())?).map(|l| l.value),
        step,
        tolerance,
    )
}
