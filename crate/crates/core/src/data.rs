//! Datasets and row-stochastic probability matrices.
//!
//! Labels are 1-based class indices in `1..=n_classes`; probability matrices
//! are 0-based, so class `k` lives in column `k - 1`.

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{ensure_dim, Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;

/// Source-domain style data: conditioning block `z`, remaining block `x`, labels `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    z: Array2<f64>,
    x: Array2<f64>,
    y: Vec<usize>,
    n_classes: usize,
    weights: Option<Array1<f64>>,
}

impl LabeledDataset {
    pub fn new(z: Array2<f64>, x: Array2<f64>, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid(format!("n_classes must be >= 2, got {n_classes}")));
        }
        ensure_dim("LabeledDataset x rows", z.nrows(), x.nrows())?;
        ensure_dim("LabeledDataset y length", z.nrows(), y.len())?;
        if let Some(bad) = y.iter().find(|&&label| label == 0 || label > n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside 1..={n_classes}"
            )));
        }
        if y.is_empty() {
            return Err(Error::invalid("labeled dataset has no rows"));
        }
        Ok(Self {
            z,
            x,
            y,
            n_classes,
            weights: None,
        })
    }

    pub fn with_weights(mut self, weights: Array1<f64>) -> Result<Self> {
        ensure_dim("LabeledDataset weights length", self.len(), weights.len())?;
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("sample weights must be finite and nonnegative"));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn weights(&self) -> Option<ArrayView1<'_, f64>> {
        self.weights.as_ref().map(|w| w.view())
    }

    pub fn d_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    /// Column block `x ⊕ z`, the input of the posterior model.
    pub fn joint_features(&self) -> Array2<f64> {
        join_features(self.x.view(), self.z.view())
    }

    pub fn features(&self, block: FeatureBlock) -> Array2<f64> {
        match block {
            FeatureBlock::Z => self.z.clone(),
            FeatureBlock::Joint => self.joint_features(),
        }
    }

    /// Drops the labels, keeping `z` and `x`.
    pub fn unlabeled(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            z: self.z.clone(),
            x: self.x.clone(),
        }
    }

    /// Empirical class frequencies (weighted when weights are present).
    pub fn class_frequencies(&self) -> Array1<f64> {
        let mut counts = Array1::<f64>::zeros(self.n_classes);
        for (i, &label) in self.y.iter().enumerate() {
            counts[label - 1] += self.weights.as_ref().map_or(1.0, |w| w[i]);
        }
        let total = counts.sum();
        counts / total
    }

    /// Number of distinct labels that actually occur.
    pub fn distinct_labels(&self) -> usize {
        let mut seen = vec![false; self.n_classes];
        for &label in &self.y {
            seen[label - 1] = true;
        }
        seen.into_iter().filter(|s| *s).count()
    }

    /// Rows selected by index, in the given order (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            z: self.z.select(Axis(0), rows),
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            n_classes: self.n_classes,
            weights: self.weights.as_ref().map(|w| w.select(Axis(0), rows)),
        }
    }
}

/// Which feature block a model is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureBlock {
    /// Conditioning features only, for `p(y|z)`.
    Z,
    /// `x ⊕ z`, for `p(y|x,z)`.
    Joint,
}

/// Target-domain data: features only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    z: Array2<f64>,
    x: Array2<f64>,
}

impl UnlabeledDataset {
    pub fn new(z: Array2<f64>, x: Array2<f64>) -> Result<Self> {
        ensure_dim("UnlabeledDataset x rows", z.nrows(), x.nrows())?;
        Ok(Self { z, x })
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn d_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn joint_features(&self) -> Array2<f64> {
        join_features(self.x.view(), self.z.view())
    }

    /// Moves the conditioning block into `x`, leaving an empty `z`.
    /// The joint features are unchanged by this.
    pub fn without_conditioning(&self) -> Self {
        Self {
            z: Array2::zeros((self.len(), 0)),
            x: self.joint_features(),
        }
    }
}

pub(crate) fn join_features(x: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> Array2<f64> {
    concatenate(Axis(1), &[x, z]).expect("row counts checked at construction")
}

fn check_row_stochastic(what: &'static str, probs: &Array2<f64>) -> Result<()> {
    if probs.ncols() == 0 {
        return Err(Error::invalid(format!("{what} has no columns")));
    }
    for (row, values) in probs.outer_iter().enumerate() {
        if values.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { what });
        }
        if values.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid(format!("{what} row {row} has entries outside [0, 1]")));
        }
        let sum = values.sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::RowSum { what, row, sum });
        }
    }
    Ok(())
}

/// Row-stochastic `n × K` matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix(Array2<f64>);

impl PosteriorMatrix {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        check_row_stochastic("posterior matrix", &probs)?;
        Ok(Self(probs))
    }

    /// Skips validation; callers guarantee row-stochastic input.
    pub(crate) fn from_normalized(probs: Array2<f64>) -> Self {
        Self(probs)
    }

    pub fn probs(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn n_rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }

    /// Probabilities of class `k` (1-based) for every row.
    pub fn class_column(&self, k: usize) -> ArrayView1<'_, f64> {
        self.0.column(k - 1)
    }

    /// Column means: the prior implied by averaging the posteriors.
    pub fn mean_prior(&self) -> Array1<f64> {
        self.0
            .mean_axis(Axis(0))
            .unwrap_or_else(|| Array1::zeros(self.n_classes()))
    }

    pub fn as_targets(&self) -> SoftTargets {
        SoftTargets(self.0.clone())
    }
}

/// Per-sample class-probability targets for soft-label fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets(Array2<f64>);

impl SoftTargets {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        check_row_stochastic("soft targets", &probs)?;
        Ok(Self(probs))
    }

    /// One-hot encoding of 1-based labels.
    pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Self> {
        let mut probs = Array2::zeros((labels.len(), n_classes));
        for (row, &label) in labels.iter().enumerate() {
            if label == 0 || label > n_classes {
                return Err(Error::invalid(format!("label {label} outside 1..={n_classes}")));
            }
            probs[[row, label - 1]] = 1.0;
        }
        Ok(Self(probs))
    }

    pub(crate) fn from_normalized(probs: Array2<f64>) -> Self {
        Self(probs)
    }

    pub fn probs(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn n_rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_posterior(self) -> PosteriorMatrix {
        PosteriorMatrix(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_inconsistent_rows() {
        let z = Array2::zeros((3, 1));
        let x = Array2::zeros((2, 2));
        assert!(matches!(
            LabeledDataset::new(z, x, vec![1, 2, 1], 2),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let z = Array2::zeros((2, 0));
        let x = Array2::zeros((2, 0));
        assert!(LabeledDataset::new(z, x, vec![1, 3], 2).is_err());
    }

    #[test]
    fn empty_blocks_are_legal() {
        let data = LabeledDataset::new(Array2::zeros((3, 0)), Array2::zeros((3, 0)), vec![1, 2, 2], 2)
            .unwrap();
        assert_eq!(data.joint_features().dim(), (3, 0));
        let freq = data.class_frequencies();
        assert!((freq[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn joint_features_put_x_first() {
        let data = LabeledDataset::new(array![[9.0], [8.0]], array![[1.0, 2.0], [3.0, 4.0]], vec![1, 2], 2)
            .unwrap();
        assert_eq!(data.joint_features(), array![[1.0, 2.0, 9.0], [3.0, 4.0, 8.0]]);
        let moved = data.unlabeled().without_conditioning();
        assert_eq!(moved.d_z(), 0);
        assert_eq!(moved.joint_features(), data.joint_features());
    }

    #[test]
    fn soft_targets_validate_rows() {
        assert!(SoftTargets::new(array![[0.5, 0.5], [0.2, 0.7]]).is_err());
        assert!(SoftTargets::new(array![[0.5, 0.5], [0.3, 0.7]]).is_ok());
        assert!(PosteriorMatrix::new(array![[1.2, -0.2]]).is_err());
    }
}
