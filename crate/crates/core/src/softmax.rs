//! Multinomial logistic regression with class `K` as the reference class.
//!
//! The score of class `k < K` is `intercepts[k] + slopes.row(k) · f`; class `K`
//! scores zero. Fitting maximizes the weighted soft-label log-likelihood
//! `Σ_n w_n Σ_k t_nk log p_k(f_n) − (λ/2)·‖slopes‖²` with a deterministic
//! full-batch ascent. Intercepts are never penalized.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureBlock, LabeledDataset, PosteriorMatrix, SoftTargets};
use crate::error::{ensure_dim, Error, Result};

/// Lower clamp applied to probabilities before they enter logs or ratios.
pub const PROB_FLOOR: f64 = 1e-12;

/// Clamps a probability to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Parameters of a `K`-class softmax model over `d` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct SoftmaxParams {
    n_classes: usize,
    intercepts: Array1<f64>,
    slopes: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    n_classes: usize,
    n_features: usize,
    intercepts: Vec<f64>,
    slopes: Vec<Vec<f64>>,
}

impl From<SoftmaxParams> for ParamsRepr {
    fn from(p: SoftmaxParams) -> Self {
        ParamsRepr {
            n_classes: p.n_classes,
            n_features: p.n_features(),
            intercepts: p.intercepts.to_vec(),
            slopes: p.slopes.outer_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl TryFrom<ParamsRepr> for SoftmaxParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        let rows = r.slopes.len();
        ensure_dim("slopes rows", r.n_classes.saturating_sub(1), rows)?;
        let mut slopes = Array2::zeros((rows, r.n_features));
        for (k, row) in r.slopes.iter().enumerate() {
            ensure_dim("slopes columns", r.n_features, row.len())?;
            slopes.row_mut(k).assign(&ArrayView1::from(row.as_slice()));
        }
        SoftmaxParams::new(r.n_classes, Array1::from(r.intercepts), slopes)
    }
}

impl SoftmaxParams {
    pub fn new(n_classes: usize, intercepts: Array1<f64>, slopes: Array2<f64>) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid(format!("n_classes must be >= 2, got {n_classes}")));
        }
        ensure_dim("intercepts length", n_classes - 1, intercepts.len())?;
        ensure_dim("slopes rows", n_classes - 1, slopes.nrows())?;
        if intercepts.iter().chain(slopes.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "softmax parameters" });
        }
        Ok(Self {
            n_classes,
            intercepts,
            slopes,
        })
    }

    pub fn zeros(n_classes: usize, n_features: usize) -> Self {
        assert!(n_classes >= 2, "n_classes must be >= 2");
        Self {
            n_classes,
            intercepts: Array1::zeros(n_classes - 1),
            slopes: Array2::zeros((n_classes - 1, n_features)),
        }
    }

    /// Intercept-only model whose probabilities equal `prior`.
    pub fn intercept_only(prior: ArrayView1<'_, f64>) -> Result<Self> {
        let k = prior.len();
        if k < 2 {
            return Err(Error::invalid("prior needs at least two classes"));
        }
        if prior.iter().any(|p| !p.is_finite() || *p < 0.0) || (prior.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("prior must be a probability vector"));
        }
        let reference = clamp_prob(prior[k - 1]).ln();
        let intercepts = prior
            .iter()
            .take(k - 1)
            .map(|&p| clamp_prob(p).ln() - reference)
            .collect();
        Self::new(k, intercepts, Array2::zeros((k - 1, 0)))
    }

    /// Builds reference-form parameters from an explicit row per class by
    /// subtracting the last row from every other row.
    pub fn from_full_rows(intercepts: ArrayView1<'_, f64>, slopes: ArrayView2<'_, f64>) -> Result<Self> {
        let k = intercepts.len();
        ensure_dim("full slopes rows", k, slopes.nrows())?;
        if k < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let ref_b = intercepts[k - 1];
        let ref_w = slopes.row(k - 1);
        let b = intercepts.slice(ndarray::s![..k - 1]).mapv(|v| v - ref_b);
        let w = &slopes.slice(ndarray::s![..k - 1, ..]) - &ref_w;
        Self::new(k, b, w)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.slopes.ncols()
    }

    pub fn intercepts(&self) -> ArrayView1<'_, f64> {
        self.intercepts.view()
    }

    pub fn slopes(&self) -> ArrayView2<'_, f64> {
        self.slopes.view()
    }

    /// `(λ/2)·‖slopes‖²`.
    pub fn slope_penalty(&self, lambda: f64) -> f64 {
        0.5 * lambda * self.slopes.iter().map(|w| w * w).sum::<f64>()
    }

    /// Largest absolute coordinate difference to `other`.
    pub fn max_abs_diff(&self, other: &SoftmaxParams) -> f64 {
        self.intercepts
            .iter()
            .zip(other.intercepts.iter())
            .chain(self.slopes.iter().zip(other.slopes.iter()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_features(&self, features: ArrayView2<'_, f64>) -> Result<()> {
        ensure_dim("feature columns", self.n_features(), features.ncols())
    }

    /// Writes the class scores of one feature row into `scores` (length K).
    #[inline]
    fn scores_into(&self, row: ArrayView1<'_, f64>, scores: &mut [f64]) {
        let last = self.n_classes - 1;
        for (k, score) in scores.iter_mut().enumerate().take(last) {
            *score = self.intercepts[k] + self.slopes.row(k).dot(&row);
        }
        scores[last] = 0.0;
    }
}

/// In-place max-shifted softmax; returns log-sum-exp of the input.
#[inline]
fn softmax_in_place(scores: &mut [f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
    max + sum.ln()
}

/// Class probabilities for every row of `features`.
pub fn predict_proba(params: &SoftmaxParams, features: ArrayView2<'_, f64>) -> Result<PosteriorMatrix> {
    params.check_features(features)?;
    let k = params.n_classes;
    let mut out = Array2::zeros((features.nrows(), k));
    let mut scores = vec![0.0; k];
    for (row, mut dest) in features.outer_iter().zip(out.outer_iter_mut()) {
        params.scores_into(row, &mut scores);
        softmax_in_place(&mut scores);
        dest.assign(&ArrayView1::from(scores.as_slice()));
    }
    Ok(PosteriorMatrix::from_normalized(out))
}

/// Weighted soft-label log-likelihood, optionally accumulating its gradient.
fn loglik_accumulate(
    params: &SoftmaxParams,
    features: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    weights: Option<ArrayView1<'_, f64>>,
    grad: Option<(&mut Array1<f64>, &mut Array2<f64>)>,
) -> f64 {
    let b = params.intercepts.as_standard_layout();
    let w = params.slopes.as_standard_layout();
    let f = features.as_standard_layout();
    let t = targets.as_standard_layout();
    let weights = weights.map(|w| w.to_vec());
    let kernel = Kernel {
        n_classes: params.n_classes,
        n_features: features.ncols(),
        features: f.as_slice().expect("standard layout"),
        targets: t.as_slice().expect("standard layout"),
        weights: weights.as_deref(),
    };
    let intercepts = b.as_slice().expect("standard layout");
    let slopes = w.as_slice().expect("standard layout");
    match grad {
        None => kernel.eval(intercepts, slopes, None),
        Some((gb, gw)) => {
            let mut gb_buf = gb.to_vec();
            let mut gw_buf = gw.as_standard_layout().to_owned().into_raw_vec_and_offset().0;
            let value = kernel.eval(intercepts, slopes, Some((&mut gb_buf, &mut gw_buf)));
            gb.assign(&ArrayView1::from(gb_buf.as_slice()));
            let shape = gw.raw_dim();
            gw.assign(&ArrayView2::from_shape(shape, gw_buf.as_slice()).expect("gradient shape"));
            value
        }
    }
}

/// `log(1 + e^s)` without overflow.
#[inline]
fn log1p_exp(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Row-major data for the likelihood loop.
struct Kernel<'a> {
    n_classes: usize,
    n_features: usize,
    features: &'a [f64],
    targets: &'a [f64],
    weights: Option<&'a [f64]>,
}

impl Kernel<'_> {
    /// `Σ_n w_n Σ_k t_nk log p_k`; adds the gradient into `grad` when given.
    fn eval(&self, intercepts: &[f64], slopes: &[f64], mut grad: Option<(&mut [f64], &mut [f64])>) -> f64 {
        if self.n_classes == 2 {
            return self.eval_binary(intercepts[0], slopes, grad);
        }
        let (k, d) = (self.n_classes, self.n_features);
        let n = self.targets.len() / k;
        let mut scores = vec![0.0; k];
        let mut total = 0.0;
        for i in 0..n {
            let w = self.weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            let row = &self.features[i * d..(i + 1) * d];
            let target = &self.targets[i * k..(i + 1) * k];
            for c in 0..k - 1 {
                let coef = &slopes[c * d..(c + 1) * d];
                scores[c] = intercepts[c] + coef.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
            scores[k - 1] = 0.0;
            let raw: f64 = target.iter().zip(&scores).map(|(t, s)| t * s).sum();
            let lse = softmax_in_place(&mut scores);
            let t_sum: f64 = target.iter().sum();
            total += w * (raw - t_sum * lse);
            if let Some((gb, gw)) = grad.as_mut() {
                for c in 0..k - 1 {
                    let resid = w * (target[c] - t_sum * scores[c]);
                    gb[c] += resid;
                    if resid != 0.0 {
                        for (g, x) in gw[c * d..(c + 1) * d].iter_mut().zip(row) {
                            *g += resid * x;
                        }
                    }
                }
            }
        }
        total
    }

    /// Two classes: one score per row, `log p_1 = s - log(1 + e^s)`.
    fn eval_binary(&self, intercept: f64, slopes: &[f64], mut grad: Option<(&mut [f64], &mut [f64])>) -> f64 {
        let d = self.n_features;
        let n = self.targets.len() / 2;
        let mut total = 0.0;
        for i in 0..n {
            let w = self.weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            let row = &self.features[i * d..(i + 1) * d];
            let (t1, t2) = (self.targets[2 * i], self.targets[2 * i + 1]);
            let score = intercept + slopes.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            let lse = log1p_exp(score);
            total += w * (t1 * score - (t1 + t2) * lse);
            if let Some((gb, gw)) = grad.as_mut() {
                let p1 = (score - lse).exp();
                let resid = w * (t1 - (t1 + t2) * p1);
                gb[0] += resid;
                if resid != 0.0 {
                    for (g, x) in gw.iter_mut().zip(row) {
                        *g += resid * x;
                    }
                }
            }
        }
        total
    }
}

fn check_pair(params: &SoftmaxParams, features: ArrayView2<'_, f64>, targets: &SoftTargets) -> Result<()> {
    params.check_features(features)?;
    ensure_dim("target rows", features.nrows(), targets.n_rows())?;
    ensure_dim("target classes", params.n_classes, targets.n_classes())
}

/// Soft-target log-likelihood `Σ_n Σ_k t_nk log p_k(f_n)`.
pub fn log_likelihood(
    params: &SoftmaxParams,
    features: ArrayView2<'_, f64>,
    targets: &SoftTargets,
) -> Result<f64> {
    check_pair(params, features, targets)?;
    Ok(loglik_accumulate(params, features, targets.probs(), None, None))
}

/// Analytic gradient of [`log_likelihood`], laid out like the parameters.
pub fn log_likelihood_gradient(
    params: &SoftmaxParams,
    features: ArrayView2<'_, f64>,
    targets: &SoftTargets,
) -> Result<SoftmaxParams> {
    check_pair(params, features, targets)?;
    let mut gb = Array1::zeros(params.n_classes - 1);
    let mut gw = Array2::zeros(params.slopes.raw_dim());
    loglik_accumulate(params, features, targets.probs(), None, Some((&mut gb, &mut gw)));
    SoftmaxParams::new(params.n_classes, gb, gw)
}

/// Optimizer settings shared by every fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Initial global step multiplier; adapted during the run.
    pub step_size: f64,
    /// Stop once the largest parameter change of an accepted step falls below this.
    pub tolerance: f64,
    /// `λ` of the slope penalty, on the scale of the summed (not averaged)
    /// log-likelihood; `λ = 1` matches a unit-`C` logistic regression.
    pub l2_penalty: f64,
    /// Recorded for provenance; fitting itself is deterministic.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            step_size: 0.1,
            tolerance: 1e-7,
            l2_penalty: 1e-6,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        if !(self.tolerance > 0.0) || !(self.step_size > 0.0) || !(self.l2_penalty >= 0.0) {
            return Err(Error::invalid(
                "tolerance and step_size must be positive, l2_penalty nonnegative",
            ));
        }
        Ok(())
    }
}

/// Result of a fit, with the per-iteration objective trace.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: SoftmaxParams,
    /// Penalized objective divided by the total weight, starting at the
    /// initial point, one entry per accepted step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl FitOutcome {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace starts with the initial objective")
    }
}

/// Fits `p(y | block)` on hard labels.
pub fn fit_hard(data: &LabeledDataset, block: FeatureBlock, config: &FitConfig) -> Result<SoftmaxParams> {
    fit_hard_traced(data, block, config).map(|o| o.params)
}

pub fn fit_hard_traced(data: &LabeledDataset, block: FeatureBlock, config: &FitConfig) -> Result<FitOutcome> {
    let distinct = data.distinct_labels();
    if distinct < 2 {
        return Err(Error::DegenerateLabels { distinct });
    }
    let features = data.features(block);
    let targets = SoftTargets::one_hot(data.labels(), data.n_classes())?;
    fit_soft_weighted(features.view(), &targets, data.weights(), config, None)
}

/// Fits soft-label targets from a zero start.
pub fn fit_soft(features: ArrayView2<'_, f64>, targets: &SoftTargets, config: &FitConfig) -> Result<SoftmaxParams> {
    fit_soft_weighted(features, targets, None, config, None).map(|o| o.params)
}

/// Full-control soft fit: optional row weights and warm start.
pub fn fit_soft_weighted(
    features: ArrayView2<'_, f64>,
    targets: &SoftTargets,
    weights: Option<ArrayView1<'_, f64>>,
    config: &FitConfig,
    init: Option<&SoftmaxParams>,
) -> Result<FitOutcome> {
    config.validate()?;
    let (n, d) = features.dim();
    let k = targets.n_classes();
    ensure_dim("target rows", n, targets.n_rows())?;
    if k < 2 {
        return Err(Error::invalid("soft targets need at least two classes"));
    }
    if n == 0 {
        return Err(Error::invalid("cannot fit on zero rows"));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "features" });
    }
    if let Some(w) = weights {
        ensure_dim("weights length", n, w.len())?;
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.sum() <= 0.0 {
            return Err(Error::invalid("weights must be nonnegative with positive total"));
        }
    }
    if let Some(p) = init {
        ensure_dim("initial classes", k, p.n_classes())?;
        ensure_dim("initial features", d, p.n_features())?;
    }
    // Re-validate rows: targets may have been built unchecked.
    for (row, t) in targets.probs().outer_iter().enumerate() {
        let sum = t.sum();
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::RowSum {
                what: "soft targets",
                row,
                sum,
            });
        }
    }

    if d == 0 {
        return Ok(fit_intercept_only(targets, weights, init));
    }
    Ok(Ascent::new(features, targets, weights, config).run(init))
}

/// Closed-form optimum when there are no features: intercepts match the
/// weighted mean targets. The L2 penalty never touches intercepts.
fn fit_intercept_only(
    targets: &SoftTargets,
    weights: Option<ArrayView1<'_, f64>>,
    init: Option<&SoftmaxParams>,
) -> FitOutcome {
    let k = targets.n_classes();
    let probs = targets.probs();
    let total_w = weights.map_or(probs.nrows() as f64, |w| w.sum());
    let mut mass = Array1::<f64>::zeros(k);
    for (i, row) in probs.outer_iter().enumerate() {
        mass.scaled_add(weights.map_or(1.0, |w| w[i]), &row);
    }
    let mean = mass / total_w;
    let reference = clamp_prob(mean[k - 1]).ln();
    let intercepts: Array1<f64> = (0..k - 1).map(|c| clamp_prob(mean[c]).ln() - reference).collect();
    let params = SoftmaxParams {
        n_classes: k,
        intercepts,
        slopes: Array2::zeros((k - 1, 0)),
    };
    let empty = Array2::zeros((probs.nrows(), 0));
    let objective = |p: &SoftmaxParams| loglik_accumulate(p, empty.view(), probs, weights, None) / total_w;
    let start = init.cloned().unwrap_or_else(|| SoftmaxParams::zeros(k, 0));
    let mut trace = vec![objective(&start)];
    let end = objective(&params);
    // Clamping can make the closed form marginally worse than an exact start.
    let params = if end >= trace[0] { params } else { start };
    trace.push(end.max(trace[0]));
    FitOutcome {
        params,
        objective_trace: trace,
        iterations: 1,
        converged: true,
    }
}

struct Evaluation {
    value: f64,
    direction: SoftmaxParams,
}

const MOMENTUM: f64 = 0.9;
const STEP_GROWTH: f64 = 1.2;
const MAX_STEP: f64 = 1e3;
const MIN_STEP: f64 = 1e-14;

/// Preconditioned full-batch gradient ascent on standardized features.
///
/// Each coordinate is scaled by the inverse of a curvature bound; a global
/// multiplier grows after accepted steps and halves after rejected ones, and
/// heavy-ball momentum is dropped whenever a step fails. Only steps that do
/// not decrease the objective are accepted, so the trace is monotone.
struct Ascent<'a> {
    std_features: Array2<f64>,
    means: Array1<f64>,
    scales: Array1<f64>,
    targets: Array2<f64>,
    weights: Option<Vec<f64>>,
    total_weight: f64,
    n_classes: usize,
    /// Penalty rescaled to the mean objective.
    lambda: f64,
    precond_b: f64,
    precond_w: Array1<f64>,
    config: &'a FitConfig,
}

impl<'a> Ascent<'a> {
    fn new(
        features: ArrayView2<'_, f64>,
        targets: &'a SoftTargets,
        weights: Option<ArrayView1<'a, f64>>,
        config: &'a FitConfig,
    ) -> Self {
        let (n, d) = features.dim();
        let total_weight = weights.map_or(n as f64, |w| w.sum());
        let weight_of = |i: usize| weights.map_or(1.0, |w| w[i]);

        let mut means = Array1::<f64>::zeros(d);
        for (i, row) in features.outer_iter().enumerate() {
            means.scaled_add(weight_of(i), &row);
        }
        means /= total_weight;
        let mut var = Array1::<f64>::zeros(d);
        for (i, row) in features.outer_iter().enumerate() {
            let centered = &row - &means;
            var.scaled_add(weight_of(i), &centered.mapv(|v| v * v));
        }
        var /= total_weight;
        let scales = var.mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });

        let mut std_features = features.as_standard_layout().into_owned();
        for mut row in std_features.outer_iter_mut() {
            row -= &means;
            row /= &scales;
        }
        let mut second_moment = Array1::<f64>::zeros(d);
        for (i, row) in std_features.outer_iter().enumerate() {
            second_moment.scaled_add(weight_of(i), &row.mapv(|v| v * v));
        }
        second_moment /= total_weight;

        let lambda = config.l2_penalty / total_weight;
        let precond_w = second_moment
            .iter()
            .zip(scales.iter())
            .map(|(&m2, &s)| {
                let curvature = 0.5 * m2 + lambda / (s * s);
                if curvature > 1e-12 {
                    1.0 / curvature
                } else {
                    1.0
                }
            })
            .collect();

        Self {
            std_features,
            means,
            scales,
            targets: targets.probs().as_standard_layout().into_owned(),
            weights: weights.map(|w| w.to_vec()),
            total_weight,
            n_classes: targets.n_classes(),
            lambda,
            precond_b: 2.0,
            precond_w,
            config,
        }
    }

    fn to_standard(&self, p: &SoftmaxParams) -> SoftmaxParams {
        let slopes = &p.slopes * &self.scales;
        let intercepts = &p.intercepts + &p.slopes.dot(&self.means);
        SoftmaxParams {
            n_classes: p.n_classes,
            intercepts,
            slopes,
        }
    }

    fn to_original(&self, p: &SoftmaxParams) -> SoftmaxParams {
        let slopes = &p.slopes / &self.scales;
        let intercepts = &p.intercepts - &slopes.dot(&self.means);
        SoftmaxParams {
            n_classes: p.n_classes,
            intercepts,
            slopes,
        }
    }

    fn penalty(&self, p: &SoftmaxParams) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let sum: f64 = p
            .slopes
            .outer_iter()
            .map(|row| row.iter().zip(&self.scales).map(|(w, s)| (w / s).powi(2)).sum::<f64>())
            .sum();
        0.5 * self.lambda * sum
    }

    /// Penalized mean objective and its gradient, in one pass over the rows.
    fn evaluate(&self, p: &SoftmaxParams) -> Evaluation {
        let kernel = Kernel {
            n_classes: self.n_classes,
            n_features: self.std_features.ncols(),
            features: self.std_features.as_slice().expect("standard layout"),
            targets: self.targets.as_slice().expect("standard layout"),
            weights: self.weights.as_deref(),
        };
        let b = p.intercepts.as_standard_layout();
        let w = p.slopes.as_standard_layout();
        let mut gb = vec![0.0; self.n_classes - 1];
        let mut gw = vec![0.0; p.slopes.len()];
        let ll = kernel.eval(
            b.as_slice().expect("standard layout"),
            w.as_slice().expect("standard layout"),
            Some((&mut gb, &mut gw)),
        );
        let mut gb = Array1::from(gb) / self.total_weight;
        let mut gw = Array2::from_shape_vec(p.slopes.raw_dim(), gw).expect("gradient shape") / self.total_weight;
        if self.lambda > 0.0 {
            let inv_s2 = self.scales.mapv(|s| 1.0 / (s * s));
            gw.scaled_add(-self.lambda, &(&p.slopes * &inv_s2));
        }
        // Preconditioned ascent direction.
        gw *= &self.precond_w;
        gb *= self.precond_b;
        Evaluation {
            value: ll / self.total_weight - self.penalty(p),
            direction: SoftmaxParams {
                n_classes: self.n_classes,
                intercepts: gb,
                slopes: gw,
            },
        }
    }

    /// Largest change in original coordinates implied by a standardized step.
    fn original_step_size(&self, step_b: &Array1<f64>, step_w: &Array2<f64>) -> f64 {
        let w = step_w / &self.scales;
        let b = step_b - &w.dot(&self.means);
        b.iter().chain(w.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    fn run(self, init: Option<&SoftmaxParams>) -> FitOutcome {
        let d = self.std_features.ncols();
        let mut current = match init {
            Some(p) => self.to_standard(p),
            None => SoftmaxParams::zeros(self.n_classes, d),
        };
        let Evaluation {
            mut value,
            direction: mut dir,
        } = self.evaluate(&current);
        let mut trace = vec![value];
        let mut vel_b = Array1::<f64>::zeros(self.n_classes - 1);
        let mut vel_w = Array2::<f64>::zeros((self.n_classes - 1, d));
        let mut step = self.config.step_size;
        let mut converged = false;
        let mut iterations = 0;

        while iterations < self.config.max_iters {
            iterations += 1;
            let mut accepted = None;
            // Momentum step first, then plain backtracking.
            let with_momentum = vel_b.iter().chain(vel_w.iter()).any(|v| *v != 0.0);
            if with_momentum {
                let sb = &vel_b * MOMENTUM + &dir.intercepts * step;
                let sw = &vel_w * MOMENTUM + &dir.slopes * step;
                let cand = self.shifted(&current, &sb, &sw);
                let eval = self.evaluate(&cand);
                if eval.value.is_finite() && eval.value >= value {
                    accepted = Some((cand, eval, sb, sw));
                }
            }
            if accepted.is_none() {
                vel_b.fill(0.0);
                vel_w.fill(0.0);
                while step >= MIN_STEP {
                    let sb = &dir.intercepts * step;
                    let sw = &dir.slopes * step;
                    let cand = self.shifted(&current, &sb, &sw);
                    let eval = self.evaluate(&cand);
                    if eval.value.is_finite() && eval.value >= value {
                        accepted = Some((cand, eval, sb, sw));
                        break;
                    }
                    step *= 0.5;
                }
            }
            let Some((cand, eval, sb, sw)) = accepted else {
                // No ascent step exists at machine precision: stationary.
                converged = true;
                break;
            };
            let moved = self.original_step_size(&sb, &sw);
            current = cand;
            value = eval.value;
            dir = eval.direction;
            trace.push(value);
            vel_b = sb;
            vel_w = sw;
            step = (step * STEP_GROWTH).min(MAX_STEP);
            if moved < self.config.tolerance {
                converged = true;
                break;
            }
        }

        FitOutcome {
            params: self.to_original(&current),
            objective_trace: trace,
            iterations,
            converged,
        }
    }

    fn shifted(&self, p: &SoftmaxParams, sb: &Array1<f64>, sw: &Array2<f64>) -> SoftmaxParams {
        SoftmaxParams {
            n_classes: p.n_classes,
            intercepts: &p.intercepts + sb,
            slopes: &p.slopes + sw,
        }
    }
}

/// Grouping of rows with bit-identical feature vectors.
///
/// The weighted soft log-likelihood of the grouped problem (group targets
/// averaged, weights equal to group sizes) equals that of the full problem
/// for every model, so fits on repeated feature patterns can run on the
/// groups alone.
#[derive(Debug, Clone)]
pub struct RowGroups {
    group_of_row: Vec<usize>,
    features: Array2<f64>,
    counts: Array1<f64>,
}

impl RowGroups {
    pub fn new(features: ArrayView2<'_, f64>) -> Self {
        use std::collections::HashMap;
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut first_rows = Vec::new();
        let mut counts = Vec::new();
        let group_of_row = features
            .outer_iter()
            .enumerate()
            .map(|(i, row)| {
                let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
                let g = *index.entry(key).or_insert_with(|| {
                    first_rows.push(i);
                    counts.push(0.0);
                    counts.len() - 1
                });
                counts[g] += 1.0;
                g
            })
            .collect();
        Self {
            group_of_row,
            features: features.select(Axis(0), &first_rows),
            counts: Array1::from(counts),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.counts.len()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn counts(&self) -> ArrayView1<'_, f64> {
        self.counts.view()
    }

    /// Per-group mean of the row targets, in group order.
    pub fn aggregate(&self, targets: &SoftTargets) -> Result<SoftTargets> {
        ensure_dim("grouped target rows", self.group_of_row.len(), targets.n_rows())?;
        let mut mass = Array2::<f64>::zeros((self.n_groups(), targets.n_classes()));
        for (&g, t) in self.group_of_row.iter().zip(targets.probs().outer_iter()) {
            let mut dest = mass.row_mut(g);
            dest += &t;
        }
        for (mut row, &c) in mass.outer_iter_mut().zip(self.counts.iter()) {
            row /= c;
        }
        Ok(SoftTargets::from_normalized(mass))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = SoftmaxParams::zeros(3, 2);
        let probs = predict_proba(&p, array![[1.0, -4.0], [100.0, 3.0]].view()).unwrap();
        for v in probs.probs().iter() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn intercept_zero_is_half() {
        let p = SoftmaxParams::zeros(2, 0);
        let probs = predict_proba(&p, Array2::zeros((1, 0)).view()).unwrap();
        assert_eq!(probs.probs()[[0, 0]], 0.5);
    }

    #[test]
    fn logistic_value_at_two() {
        let p = SoftmaxParams::new(2, array![0.0], array![[1.0]]).unwrap();
        let probs = predict_proba(&p, array![[2.0]].view()).unwrap();
        // 1 / (1 + e^-2)
        assert!(close(probs.probs()[[0, 0]], 0.8807970779778823, 1e-15));
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let p = SoftmaxParams::new(3, array![700.0, -700.0], array![[0.0], [0.0]]).unwrap();
        let probs = predict_proba(&p, array![[1.0]].view()).unwrap();
        let row = probs.probs().row(0).to_owned();
        assert!(row.iter().all(|v| v.is_finite()));
        assert!(close(row.sum(), 1.0, 1e-12));
        assert!(close(row[0], 1.0, 1e-12));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = SoftmaxParams::zeros(2, 2);
        assert!(matches!(
            predict_proba(&p, array![[1.0]].view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn loglik_reference_values() {
        let uniform = SoftTargets::new(array![[0.5, 0.5]]).unwrap();
        let v = log_likelihood(&SoftmaxParams::zeros(2, 0), Array2::zeros((1, 0)).view(), &uniform).unwrap();
        assert!(close(v, -std::f64::consts::LN_2, 1e-15));

        let last = SoftTargets::one_hot(&[4], 4).unwrap();
        let v = log_likelihood(&SoftmaxParams::zeros(4, 1), array![[3.0]].view(), &last).unwrap();
        assert!(close(v, -(4.0f64).ln(), 1e-15));
    }

    #[test]
    fn intercept_only_hard_fit_matches_frequency() {
        let labels: Vec<usize> = (0..100).map(|i| if i < 30 { 1 } else { 2 }).collect();
        let data = LabeledDataset::new(Array2::zeros((100, 0)), Array2::zeros((100, 0)), labels, 2).unwrap();
        let cfg = FitConfig {
            l2_penalty: 0.0,
            ..FitConfig::default()
        };
        let p = fit_hard(&data, FeatureBlock::Z, &cfg).unwrap();
        assert!(close(p.intercepts()[0], (0.3f64 / 0.7).ln(), 1e-9));
        let probs = predict_proba(&p, Array2::zeros((1, 0)).view()).unwrap();
        assert!(close(probs.probs()[[0, 0]], 0.3, 1e-4));
    }

    #[test]
    fn single_class_is_degenerate() {
        let data = LabeledDataset::new(Array2::zeros((4, 1)), Array2::zeros((4, 0)), vec![2; 4], 2).unwrap();
        assert!(matches!(
            fit_hard(&data, FeatureBlock::Z, &FitConfig::default()),
            Err(Error::DegenerateLabels { distinct: 1 })
        ));
    }

    #[test]
    fn non_finite_features_rejected() {
        let data = LabeledDataset::new(array![[1.0], [f64::NAN]], Array2::zeros((2, 0)), vec![1, 2], 2).unwrap();
        assert!(matches!(
            fit_hard(&data, FeatureBlock::Z, &FitConfig::default()),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn symmetric_data_has_zero_intercept() {
        let pos = [0.3, 1.1, 2.0, -0.4, 0.9, 1.7, 0.2, 2.4];
        let mut z = Vec::new();
        let mut y = Vec::new();
        for &v in &pos {
            z.push(v);
            y.push(1);
            z.push(-v);
            y.push(2);
        }
        let n = y.len();
        let data = LabeledDataset::new(Array2::from_shape_vec((n, 1), z).unwrap(), Array2::zeros((n, 0)), y, 2)
            .unwrap();
        let p = fit_hard(&data, FeatureBlock::Z, &FitConfig::default()).unwrap();
        assert!(p.intercepts()[0].abs() < 1e-3, "{}", p.intercepts()[0]);
        assert!(p.slopes()[[0, 0]] > 0.0);
    }

    #[test]
    fn separable_data_is_fit_exactly() {
        let z: Vec<f64> = (0..40).map(|i| i as f64 / 4.0 - 5.0).collect();
        let y: Vec<usize> = z.iter().map(|&v| if v > 0.3 { 1 } else { 2 }).collect();
        let data = LabeledDataset::new(Array2::from_shape_vec((40, 1), z).unwrap(), Array2::zeros((40, 0)), y, 2)
            .unwrap();
        let cfg = FitConfig {
            l2_penalty: 1e-4,
            ..FitConfig::default()
        };
        let p = fit_hard(&data, FeatureBlock::Z, &cfg).unwrap();
        let probs = predict_proba(&p, data.z()).unwrap();
        for (row, &label) in probs.probs().outer_iter().zip(data.labels()) {
            let predicted = if row[0] > row[1] { 1 } else { 2 };
            assert_eq!(predicted, label);
        }
    }

    #[test]
    fn uniform_soft_targets_give_zero_intercepts() {
        let targets = SoftTargets::new(Array2::from_elem((10, 3), 1.0 / 3.0)).unwrap();
        let p = fit_soft(Array2::zeros((10, 0)).view(), &targets, &FitConfig::default()).unwrap();
        assert!(p.intercepts().iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn constant_soft_targets_give_mean_probability() {
        let targets = SoftTargets::new(Array2::from_shape_fn((7, 2), |(_, c)| if c == 0 { 0.7 } else { 0.3 }))
            .unwrap();
        let p = fit_soft(Array2::zeros((7, 0)).view(), &targets, &FitConfig::default()).unwrap();
        let probs = predict_proba(&p, Array2::zeros((1, 0)).view()).unwrap();
        assert!(close(probs.probs()[[0, 0]], 0.7, 1e-4));
    }

    #[test]
    fn soft_fit_rejects_bad_rows() {
        let bad = SoftTargets::from_normalized(array![[0.5, 0.6]]);
        assert!(matches!(
            fit_soft(array![[1.0]].view(), &bad, &FitConfig::default()),
            Err(Error::RowSum { .. })
        ));
    }

    #[test]
    fn full_rows_reduce_to_reference_form() {
        let p = SoftmaxParams::from_full_rows(array![1.0, 2.0, 0.5].view(), array![[1.0], [0.0], [2.0]].view())
            .unwrap();
        assert_eq!(p.intercepts(), array![0.5, 1.5]);
        assert_eq!(p.slopes(), array![[-1.0], [-2.0]]);
    }

    #[test]
    fn intercept_only_encoding_roundtrips_prior() {
        let prior = array![0.2, 0.5, 0.3];
        let p = SoftmaxParams::intercept_only(prior.view()).unwrap();
        let probs = predict_proba(&p, Array2::zeros((1, 0)).view()).unwrap();
        for c in 0..3 {
            assert!(close(probs.probs()[[0, c]], prior[c], 1e-15));
        }
    }

    #[test]
    fn compression_preserves_loglik() {
        let features = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]];
        let targets = SoftTargets::new(array![[0.2, 0.8], [0.5, 0.5], [0.9, 0.1], [0.4, 0.6]]).unwrap();
        let groups = RowGroups::new(features.view());
        assert_eq!(groups.n_groups(), 2);
        assert_eq!(groups.counts(), array![3.0, 1.0]);
        let t = groups.aggregate(&targets).unwrap();
        let params = SoftmaxParams::new(2, array![0.3], array![[0.7, -1.2]]).unwrap();
        let full = log_likelihood(&params, features.view(), &targets).unwrap();
        let packed = loglik_accumulate(&params, groups.features(), t.probs(), Some(groups.counts()), None);
        assert!(close(full, packed, 1e-12));
    }

    #[test]
    fn params_json_field_names() {
        let p = SoftmaxParams::new(3, array![0.5, -1.0], array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(json["n_classes"], 3);
        assert_eq!(json["n_features"], 2);
        assert_eq!(json["slopes"][1][0], 3.0);
        let back: SoftmaxParams = serde_json::from_value(json).unwrap();
        assert_eq!(back, p);
    }
}
