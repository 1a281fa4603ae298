//! Source fitting followed by one adaptation method.

use std::fmt;
use std::str::FromStr;

use cpsm::em::{fit_cpsm, fit_mlls, CpsmFit, EmConfig, SourceModels};
use cpsm::{FitConfig, LabeledDataset, UnlabeledDataset};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Source posterior, unadjusted.
    Naive,
    /// Label-shift EM; `z` is treated as part of `x`.
    Mlls,
    /// Conditional probability shift EM.
    Cpsm,
    /// Model fitted on the labeled target; evaluation only.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Naive, Method::Mlls, Method::Cpsm, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Mlls => "mlls",
            Method::Cpsm => "cpsm",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected naive, mlls, cpsm or oracle)"))
    }
}

/// Runs `method` given already fitted source models.
///
/// `naive` is `cpsm` with zero EM rounds, so it reports `θ̂ = θ⁰` and a
/// one-entry trace.
pub fn run_method(
    method: Method,
    models: &SourceModels,
    source_prior: ndarray::ArrayView1<'_, f64>,
    target: &UnlabeledDataset,
    em: &EmConfig,
) -> Result<CpsmFit> {
    match method {
        Method::Naive => {
            let em = EmConfig {
                max_em_iters: 0,
                ..em.clone()
            };
            Ok(fit_cpsm(models, target, &em)?)
        }
        Method::Mlls => Ok(fit_mlls(&models.posterior_model, source_prior, target, em)?),
        Method::Cpsm => Ok(fit_cpsm(models, target, em)?),
        Method::Oracle => Err(oracle_unavailable()),
    }
}

/// Fits both source models on `source`, then runs `method` on `target`.
pub fn adapt(
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    method: Method,
    em: &EmConfig,
    fit: &FitConfig,
) -> Result<CpsmFit> {
    if method == Method::Oracle {
        return Err(oracle_unavailable());
    }
    let models = SourceModels::fit(source, fit)?;
    run_method(method, &models, source.class_frequencies().view(), target, em)
}

fn oracle_unavailable() -> CliError {
    CliError::Usage("the oracle needs target labels and is only available in benchmarks".into())
}
