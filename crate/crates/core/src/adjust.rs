//! Source-to-target posterior transform under a shift in `p(y|z)`.
//!
//! With `p(x|y,z) = q(x|y,z)`, the target posterior is
//! `q(y=k|x,z) ∝ p(y=k|x,z) · q(y=k|z) / p(y=k|z)`; the per-row normalizer
//! `Σ_l p(y=l|x,z) q(y=l|z) / p(y=l|z)` equals `1 / r(x,z)` with
//! `r(x,z) = p(x|z) / q(x|z)`.

use ndarray::{Array1, Array2, ArrayView2, Zip};

use crate::data::PosteriorMatrix;
use crate::error::{ensure_dim, Error, Result};
use crate::softmax::PROB_FLOOR;

/// Bounds applied to every ratio before normalization.
pub const RATIO_MIN: f64 = 1e-12;
pub const RATIO_MAX: f64 = 1e12;

/// Target and source conditional class probabilities evaluated on the same rows.
#[derive(Debug, Clone)]
pub struct ConditionalRatios {
    numerator: PosteriorMatrix,
    denominator: PosteriorMatrix,
}

impl ConditionalRatios {
    /// `numerator` holds `q(y=k|z)`, `denominator` holds `p(y=k|z)`.
    pub fn new(numerator: PosteriorMatrix, denominator: PosteriorMatrix) -> Result<Self> {
        ensure_dim("ratio rows", numerator.n_rows(), denominator.n_rows())?;
        ensure_dim("ratio classes", numerator.n_classes(), denominator.n_classes())?;
        Ok(Self {
            numerator,
            denominator,
        })
    }

    pub fn numerator(&self) -> &PosteriorMatrix {
        &self.numerator
    }

    pub fn denominator(&self) -> &PosteriorMatrix {
        &self.denominator
    }

    /// Clamped ratio matrix and the number of entries the clamps touched.
    pub fn ratios(&self) -> (Array2<f64>, usize) {
        let mut clamped = 0usize;
        let mut out = Array2::zeros((self.numerator.n_rows(), self.numerator.n_classes()));
        Zip::from(&mut out)
            .and(&self.numerator.probs())
            .and(&self.denominator.probs())
            .for_each(|r, &num, &den| {
                let den_c = den.max(PROB_FLOOR);
                let raw = num / den_c;
                let bounded = raw.clamp(RATIO_MIN, RATIO_MAX);
                if den_c != den || bounded != raw {
                    clamped += 1;
                }
                *r = bounded;
            });
        (out, clamped)
    }
}

/// Adjusted posteriors with per-row diagnostics.
#[derive(Debug, Clone)]
pub struct Adjusted {
    pub posterior: PosteriorMatrix,
    /// `Σ_l p(y=l|x,z) · ratio_l` per row, i.e. `1 / r(x,z)`.
    pub normalizers: Array1<f64>,
    /// Ratio entries altered by clamping; nonzero flags inputs that are not
    /// mutually consistent (e.g. `p(y=k|z) ≈ 0` with `p(y=k|x,z) > 0`).
    pub clamped_entries: usize,
}

/// Reweights `source_posterior` by `q(y|z)/p(y|z)` and renormalizes each row.
pub fn adjust_posterior(source_posterior: &PosteriorMatrix, ratios: &ConditionalRatios) -> Result<Adjusted> {
    let (ratio, clamped) = ratios.ratios();
    let mut adjusted = adjust_with_ratios(source_posterior, ratio.view())?;
    adjusted.clamped_entries = clamped;
    Ok(adjusted)
}

/// Same transform given an explicit positive ratio matrix.
///
/// Rows whose ratios are all exactly one are passed through unchanged.
pub fn adjust_with_ratios(source_posterior: &PosteriorMatrix, ratio: ArrayView2<'_, f64>) -> Result<Adjusted> {
    let probs = source_posterior.probs();
    ensure_dim("ratio rows", probs.nrows(), ratio.nrows())?;
    ensure_dim("ratio classes", probs.ncols(), ratio.ncols())?;
    let mut out = Array2::zeros(probs.raw_dim());
    let mut normalizers = Array1::zeros(probs.nrows());
    for (row, ((p, r), mut dest)) in probs
        .outer_iter()
        .zip(ratio.outer_iter())
        .zip(out.outer_iter_mut())
        .enumerate()
    {
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite { what: "conditional ratios" });
        }
        let norm: f64 = p.iter().zip(r.iter()).map(|(a, b)| a * b).sum();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNormalizer { row });
        }
        normalizers[row] = norm;
        if r.iter().all(|&v| v == 1.0) {
            dest.assign(&p);
        } else {
            Zip::from(&mut dest).and(&p).and(&r).for_each(|d, &a, &b| *d = a * b / norm);
        }
    }
    Ok(Adjusted {
        posterior: PosteriorMatrix::from_normalized(out),
        normalizers,
        clamped_entries: 0,
    })
}

/// `Σ_rows log(Σ_k p(y=k|x,z) q(y=k|z)/p(y=k|z))`: the part of the target
/// observed-data log-likelihood that depends on the `q(y|z)` model.
pub fn surrogate_observed_loglik(source_posterior: &PosteriorMatrix, ratios: &ConditionalRatios) -> Result<f64> {
    let adjusted = adjust_posterior(source_posterior, ratios)?;
    Ok(sum_log(&adjusted.normalizers))
}

pub(crate) fn sum_log(normalizers: &Array1<f64>) -> f64 {
    normalizers.iter().map(|v| v.ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pm(a: Array2<f64>) -> PosteriorMatrix {
        PosteriorMatrix::new(a).unwrap()
    }

    #[test]
    fn equal_conditionals_give_identity() {
        let source = pm(array![[0.3, 0.7], [0.123456789, 0.876543211]]);
        let cond = pm(array![[0.2, 0.8], [0.6, 0.4]]);
        let ratios = ConditionalRatios::new(cond.clone(), cond).unwrap();
        let adjusted = adjust_posterior(&source, &ratios).unwrap();
        assert_eq!(adjusted.posterior, source);
        assert_eq!(surrogate_observed_loglik(&source, &ratios).unwrap(), 0.0);
    }

    #[test]
    fn older_group_example() {
        let source = pm(array![[0.6, 0.4]]);
        let ratios = ConditionalRatios::new(pm(array![[0.5, 0.5]]), pm(array![[0.4, 0.6]])).unwrap();
        let adjusted = adjust_posterior(&source, &ratios).unwrap();
        // 0.75 / (0.75 + 0.4 * 0.5 / 0.6)
        let expected = 0.75 / (0.75 + 0.4 * (0.5 / 0.6));
        assert!((adjusted.posterior.probs()[[0, 0]] - expected).abs() < 1e-15);
        assert!((expected - 0.692308).abs() < 1e-6);
        let s = surrogate_observed_loglik(&source, &ratios).unwrap();
        assert!((s - (0.75f64 + 0.4 * (0.5 / 0.6)).ln()).abs() < 1e-15);
        assert!((s - 0.080043).abs() < 1e-6);
    }

    #[test]
    fn zero_denominator_is_clamped_and_flagged() {
        let source = pm(array![[0.5, 0.5]]);
        let ratios = ConditionalRatios::new(pm(array![[0.5, 0.5]]), pm(array![[0.0, 1.0]])).unwrap();
        let adjusted = adjust_posterior(&source, &ratios).unwrap();
        assert!(adjusted.clamped_entries > 0);
        let row = adjusted.posterior.probs().row(0).to_owned();
        assert!(row.iter().all(|v| v.is_finite()));
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let source = pm(array![[0.5, 0.5]]);
        let bad = ConditionalRatios::new(pm(array![[0.5, 0.5], [0.1, 0.9]]), pm(array![[0.5, 0.5], [0.5, 0.5]]))
            .unwrap();
        assert!(matches!(adjust_posterior(&source, &bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_normalizer_is_an_error() {
        let source = pm(array![[1.0, 0.0]]);
        assert!(matches!(
            adjust_with_ratios(&source, array![[0.0, 1.0]].view()),
            Err(Error::ZeroNormalizer { row: 0 })
        ));
    }

    #[test]
    fn raising_one_ratio_raises_its_probability() {
        let source = pm(array![[0.2, 0.5, 0.3]]);
        let base = adjust_with_ratios(&source, array![[1.0, 2.0, 0.5]].view()).unwrap();
        let up = adjust_with_ratios(&source, array![[1.5, 2.0, 0.5]].view()).unwrap();
        assert!(up.posterior.probs()[[0, 0]] > base.posterior.probs()[[0, 0]]);
    }
}
