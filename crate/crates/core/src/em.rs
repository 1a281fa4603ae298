//! EM estimation of the target conditional model `q_θ(y|z)`.
//!
//! The source models `p(y|x,z)` and `p(y|z)` are fitted once on labeled source
//! data. On the unlabeled target rows the E-step turns the current `θ` into
//! responsibilities through [`adjust_posterior`]; the M-step refits the softmax
//! model `q_θ(y|z)` to those responsibilities, warm-started from the previous
//! `θ`. The surrogate observed log-likelihood recorded after every round is
//! non-decreasing. With an M-step slope penalty `λ > 0` the recorded value is
//! the penalized surrogate `S(θ) − (λ/2)‖slopes‖²`, which is the quantity
//! penalized EM increases; `λ = 0` gives plain EM and the plain surrogate.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::adjust::{adjust_posterior, sum_log, Adjusted, ConditionalRatios};
use crate::data::{FeatureBlock, LabeledDataset, PosteriorMatrix, SoftTargets, UnlabeledDataset};
use crate::error::{ensure_dim, Error, Result};
use crate::softmax::{self, fit_hard, predict_proba, FitConfig, RowGroups, SoftmaxParams};

/// Fitted source-domain models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceModels {
    /// `p(y|x,z)` over the joint features `x ⊕ z`.
    pub posterior_model: SoftmaxParams,
    /// `p(y|z)` over the conditioning features.
    pub conditional_model: SoftmaxParams,
}

impl SourceModels {
    pub fn new(posterior_model: SoftmaxParams, conditional_model: SoftmaxParams) -> Result<Self> {
        ensure_dim(
            "source model classes",
            posterior_model.n_classes(),
            conditional_model.n_classes(),
        )?;
        Ok(Self {
            posterior_model,
            conditional_model,
        })
    }

    /// Fits both models on labeled source data.
    pub fn fit(source: &LabeledDataset, config: &FitConfig) -> Result<Self> {
        let posterior_model = fit_hard(source, FeatureBlock::Joint, config)?;
        let conditional_model = fit_hard(source, FeatureBlock::Z, config)?;
        Self::new(posterior_model, conditional_model)
    }

    pub fn n_classes(&self) -> usize {
        self.posterior_model.n_classes()
    }

    fn check_target(&self, target: &UnlabeledDataset) -> Result<()> {
        ensure_dim(
            "conditional model features (d_z)",
            self.conditional_model.n_features(),
            target.d_z(),
        )?;
        ensure_dim(
            "posterior model features (d_x + d_z)",
            self.posterior_model.n_features(),
            target.d_x() + target.d_z(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Zero runs no rounds and returns the unadjusted source posterior.
    pub max_em_iters: usize,
    /// Stop once a round improves the surrogate log-likelihood by less than this.
    pub em_tolerance: f64,
    /// Optimizer settings for each warm-started M-step.
    pub inner: FitConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_em_iters: 500,
            em_tolerance: 1e-8,
            inner: FitConfig {
                max_iters: 200,
                l2_penalty: 1.0,
                ..FitConfig::default()
            },
        }
    }
}

/// Output of [`fit_cpsm`].
#[derive(Debug, Clone, PartialEq)]
pub struct CpsmFit {
    /// Parameters of the target conditional model `q_θ̂(y|z)`.
    pub theta_hat: SoftmaxParams,
    /// Adjusted posteriors `q̂(y|x,z)` on the target rows.
    pub target_posterior: PosteriorMatrix,
    /// (Penalized) surrogate log-likelihood at `θ^(0)` and after every round.
    pub loglik_trace: Vec<f64>,
    pub iterations_run: usize,
    /// Column means of `target_posterior`.
    pub estimated_prior: Array1<f64>,
}

/// Source-model outputs on the target rows; fixed for the whole EM run.
struct Problem {
    source_posterior: PosteriorMatrix,
    source_conditional: PosteriorMatrix,
    z: ndarray::Array2<f64>,
}

impl Problem {
    fn new(source: &SourceModels, target: &UnlabeledDataset) -> Result<Self> {
        source.check_target(target)?;
        Ok(Self {
            source_posterior: predict_proba(&source.posterior_model, target.joint_features().view())?,
            source_conditional: predict_proba(&source.conditional_model, target.z())?,
            z: target.z().to_owned(),
        })
    }

    fn adjust(&self, theta: &SoftmaxParams) -> Result<Adjusted> {
        let numerator = predict_proba(theta, self.z.view())?;
        let ratios = ConditionalRatios::new(numerator, self.source_conditional.clone())?;
        adjust_posterior(&self.source_posterior, &ratios)
    }
}

fn check_theta(source: &SourceModels, theta: &SoftmaxParams) -> Result<()> {
    ensure_dim("theta classes", source.n_classes(), theta.n_classes())?;
    ensure_dim(
        "theta features",
        source.conditional_model.n_features(),
        theta.n_features(),
    )
}

/// Responsibilities `q_θ(y|x,z)` on the target rows.
pub fn e_step(source: &SourceModels, target: &UnlabeledDataset, theta: &SoftmaxParams) -> Result<SoftTargets> {
    check_theta(source, theta)?;
    let adjusted = Problem::new(source, target)?.adjust(theta)?;
    Ok(adjusted.posterior.as_targets())
}

/// Refits `q_θ(y|z)` to the responsibilities from a zero start.
pub fn m_step(target_z: ArrayView2<'_, f64>, responsibilities: &SoftTargets, inner: &FitConfig) -> Result<SoftmaxParams> {
    let groups = RowGroups::new(target_z);
    m_step_grouped(&groups, responsibilities, inner, None)
}

/// Warm-started M-step; the objective at the result is never below the one at `previous`.
pub fn m_step_from(
    target_z: ArrayView2<'_, f64>,
    responsibilities: &SoftTargets,
    inner: &FitConfig,
    previous: &SoftmaxParams,
) -> Result<SoftmaxParams> {
    let groups = RowGroups::new(target_z);
    m_step_grouped(&groups, responsibilities, inner, Some(previous))
}

fn m_step_grouped(
    groups: &RowGroups,
    responsibilities: &SoftTargets,
    inner: &FitConfig,
    previous: Option<&SoftmaxParams>,
) -> Result<SoftmaxParams> {
    let targets = groups.aggregate(responsibilities)?;
    let outcome = softmax::fit_soft_weighted(groups.features(), &targets, Some(groups.counts()), inner, previous)?;
    Ok(outcome.params)
}

/// Runs EM from `θ^(0)` = the source conditional model.
pub fn fit_cpsm(source: &SourceModels, target: &UnlabeledDataset, config: &EmConfig) -> Result<CpsmFit> {
    if target.is_empty() {
        return Err(Error::invalid("target dataset has no rows"));
    }
    if !(config.em_tolerance >= 0.0) {
        return Err(Error::invalid("em_tolerance must be nonnegative"));
    }
    config.inner.validate()?;
    let problem = Problem::new(source, target)?;
    let groups = RowGroups::new(problem.z.view());

    let lambda = config.inner.l2_penalty;
    let mut theta = source.conditional_model.clone();
    let mut adjusted = problem.adjust(&theta)?;
    let mut current = sum_log(&adjusted.normalizers) - theta.slope_penalty(lambda);
    if !current.is_finite() {
        return Err(Error::NonFiniteSurrogate { iteration: 0 });
    }
    let mut trace = vec![current];
    let mut iterations_run = 0;

    for iteration in 1..=config.max_em_iters {
        let responsibilities = adjusted.posterior.as_targets();
        let next_theta = m_step_grouped(&groups, &responsibilities, &config.inner, Some(&theta))?;
        let next_adjusted = problem.adjust(&next_theta)?;
        let next = sum_log(&next_adjusted.normalizers) - next_theta.slope_penalty(lambda);
        if !next.is_finite() {
            return Err(Error::NonFiniteSurrogate { iteration });
        }
        trace.push(next);
        iterations_run = iteration;
        let improvement = next - current;
        theta = next_theta;
        adjusted = next_adjusted;
        current = next;
        if improvement < config.em_tolerance {
            break;
        }
    }

    let estimated_prior = adjusted.posterior.mean_prior();
    Ok(CpsmFit {
        theta_hat: theta,
        target_posterior: adjusted.posterior,
        loglik_trace: trace,
        iterations_run,
        estimated_prior,
    })
}

/// Label-shift EM: the `d_z = 0` case, with the conditional model reduced to
/// the source prior. Any conditioning block of `target` is treated as part of `x`.
pub fn fit_mlls(
    posterior_model: &SoftmaxParams,
    source_prior: ArrayView1<'_, f64>,
    target: &UnlabeledDataset,
    config: &EmConfig,
) -> Result<CpsmFit> {
    let conditional_model = SoftmaxParams::intercept_only(source_prior)?;
    let source = SourceModels::new(posterior_model.clone(), conditional_model)?;
    fit_cpsm(&source, &target.without_conditioning(), config)
}

/// Source posterior applied to the target rows without correction.
pub fn naive_posterior(source: &SourceModels, target: &UnlabeledDataset) -> Result<PosteriorMatrix> {
    source.check_target(target)?;
    predict_proba(&source.posterior_model, target.joint_features().view())
}
