//! Synthetic shift benchmarks.
//!
//! * [`generate_pair`]: binary source/target pairs with `p(y=1|z)` constant and
//!   `q(y=1|z) = σ(θ₀ + k·Σz)`, `x | y,z ~ N((y, z, 0, …), I)` in both domains.
//! * [`generate_gaussian_family`]: `y | z` softmax, `x | y,z ~ N(Mz + a_y, I)`,
//!   whose exact posterior is again a softmax ([`gaussian_posterior_params`]).
//! * [`induce_conditional_shift`]: stratified resampling of any labeled data
//!   with a binary conditioning column.
//!
//! All generation is driven by ChaCha8 streams, so output depends only on
//! the configuration and seed.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::softmax::{predict_proba, SoftmaxParams};

/// Bracket searched by [`calibrate_intercept`].
pub const INTERCEPT_BRACKET: (f64, f64) = (-30.0, 30.0);
/// Monte Carlo sample count for Gaussian `z` calibration.
pub const CALIBRATION_DRAWS: usize = 1_000_000;
/// Seed of the calibration draws used by [`generate_pair`].
pub const CALIBRATION_SEED: u64 = 0x5eed;

const SOURCE_STREAM: u64 = 0;
const TARGET_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZDistribution {
    /// Independent Bernoulli(0.5) coordinates.
    BernoulliZ,
    /// Independent standard normal coordinates.
    GaussianZ,
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_open_unit(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in (0, 1), got {p}")))
    }
}

/// Distribution of `Σz` as weighted support points.
enum SumLaw {
    Exact(Vec<(f64, f64)>),
    Sample(Vec<f64>),
}

impl SumLaw {
    fn new(z_dist: ZDistribution, d_z: usize, seed: u64) -> Self {
        match z_dist {
            ZDistribution::BernoulliZ => {
                // Σz ~ Binomial(d_z, 1/2): enumerate the 2^d_z patterns by their sum.
                let scale = 0.5f64.powi(d_z as i32);
                let mut binom = 1.0;
                let mut points = Vec::with_capacity(d_z + 1);
                for s in 0..=d_z {
                    points.push((s as f64, binom * scale));
                    binom = binom * (d_z - s) as f64 / (s + 1) as f64;
                }
                SumLaw::Exact(points)
            }
            ZDistribution::GaussianZ => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sums = (0..CALIBRATION_DRAWS)
                    .map(|_| (0..d_z).map(|_| rng.sample::<f64, _>(StandardNormal)).sum())
                    .collect();
                SumLaw::Sample(sums)
            }
        }
    }

    fn mean_sigmoid(&self, intercept: f64, slope: f64) -> f64 {
        match self {
            SumLaw::Exact(points) => points.iter().map(|&(s, w)| w * sigmoid(intercept + slope * s)).sum(),
            SumLaw::Sample(sums) => {
                sums.iter().map(|&s| sigmoid(intercept + slope * s)).sum::<f64>() / sums.len() as f64
            }
        }
    }
}

/// Intercept `θ₀` with `E_z[σ(θ₀ + k·Σz)] = target_prior`.
///
/// Bernoulli `z` is enumerated exactly; Gaussian `z` uses [`CALIBRATION_DRAWS`]
/// seeded draws. The root is found by bisection over [`INTERCEPT_BRACKET`].
pub fn calibrate_intercept(
    shift_slope: f64,
    target_prior: f64,
    z_dist: ZDistribution,
    d_z: usize,
    seed: u64,
) -> Result<f64> {
    check_open_unit("target_prior", target_prior)?;
    if !shift_slope.is_finite() {
        return Err(Error::NonFinite { what: "shift slope" });
    }
    if shift_slope == 0.0 || d_z == 0 {
        return Ok(logit(target_prior));
    }
    let law = SumLaw::new(z_dist, d_z, seed);
    let (mut lo, mut hi) = INTERCEPT_BRACKET;
    let (f_lo, f_hi) = (law.mean_sigmoid(lo, shift_slope), law.mean_sigmoid(hi, shift_slope));
    if !(f_lo <= target_prior && target_prior <= f_hi) {
        return Err(Error::Unreachable {
            target: target_prior,
            lo,
            hi,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if law.mean_sigmoid(mid, shift_slope) < target_prior {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Expected `σ(θ₀ + k·Σz)` under the given `z` law (exact for Bernoulli `z`).
pub fn expected_target_prior(intercept: f64, shift_slope: f64, z_dist: ZDistribution, d_z: usize, seed: u64) -> f64 {
    SumLaw::new(z_dist, d_z, seed).mean_sigmoid(intercept, shift_slope)
}

type CalibrationKey = (u64, u64, ZDistribution, usize);

fn cached_intercept(shift_slope: f64, target_prior: f64, z_dist: ZDistribution, d_z: usize) -> Result<f64> {
    static CACHE: OnceLock<Mutex<HashMap<CalibrationKey, f64>>> = OnceLock::new();
    let key = (shift_slope.to_bits(), target_prior.to_bits(), z_dist, d_z);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(&v) = cache.lock().expect("calibration cache poisoned").get(&key) {
        return Ok(v);
    }
    let v = calibrate_intercept(shift_slope, target_prior, z_dist, d_z, CALIBRATION_SEED)?;
    cache.lock().expect("calibration cache poisoned").insert(key, v);
    Ok(v)
}

/// Settings for one synthetic source/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dataset_kind: ZDistribution,
    pub n_source: usize,
    pub n_target: usize,
    pub d_z: usize,
    pub d_x: usize,
    /// `p(y=1|z)`, constant in `z`.
    pub source_cond_prob: f64,
    /// `k` in `q(y=1|z) = σ(θ₀ + k·Σz)`.
    pub shift_slope: f64,
    /// `q(y=1)`, reached by calibrating `θ₀`.
    pub target_prior: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dataset_kind: ZDistribution::BernoulliZ,
            n_source: 5000,
            n_target: 5000,
            d_z: 5,
            d_x: 10,
            source_cond_prob: 0.05,
            shift_slope: 0.0,
            target_prior: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_open_unit("source_cond_prob", self.source_cond_prob)?;
        check_open_unit("target_prior", self.target_prior)?;
        if self.d_x < self.d_z + 1 {
            return Err(Error::invalid(format!(
                "d_x = {} leaves no room for the mean layout (y, z1..z{})",
                self.d_x, self.d_z
            )));
        }
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::invalid("sample sizes must be positive"));
        }
        if !(self.shift_slope.is_finite() && self.shift_slope >= 0.0) {
            return Err(Error::invalid("shift_slope must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// A generated source/target pair. Target labels are for evaluation only.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    /// Calibrated `θ₀` of the target conditional.
    pub intercept: f64,
}

fn draw_z(rng: &mut ChaCha8Rng, kind: ZDistribution, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = match kind {
            ZDistribution::BernoulliZ => {
                if rng.random::<f64>() < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            ZDistribution::GaussianZ => rng.sample(StandardNormal),
        };
    }
}

fn draw_domain(
    rng: &mut ChaCha8Rng,
    config: &SynthConfig,
    n: usize,
    positive_prob: impl Fn(&[f64]) -> f64,
) -> Result<LabeledDataset> {
    let (d_z, d_x) = (config.d_z, config.d_x);
    let mut z = Array2::zeros((n, d_z));
    let mut x = Array2::zeros((n, d_x));
    let mut y = Vec::with_capacity(n);
    let mut zrow = vec![0.0; d_z];
    for i in 0..n {
        draw_z(rng, config.dataset_kind, &mut zrow);
        let positive = rng.random::<f64>() < positive_prob(&zrow);
        y.push(if positive { 1 } else { 2 });
        for (j, v) in zrow.iter().enumerate() {
            z[[i, j]] = *v;
        }
        for j in 0..d_x {
            let mean = match j {
                0 => f64::from(u8::from(positive)),
                j if j <= d_z => zrow[j - 1],
                _ => 0.0,
            };
            x[[i, j]] = mean + rng.sample::<f64, _>(StandardNormal);
        }
    }
    LabeledDataset::new(z, x, y, 2)
}

/// Draws a source/target pair satisfying the shared `x | y,z` law.
pub fn generate_pair(config: &SynthConfig) -> Result<SyntheticPair> {
    config.validate()?;
    let intercept = cached_intercept(config.shift_slope, config.target_prior, config.dataset_kind, config.d_z)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SOURCE_STREAM);
    let p = config.source_cond_prob;
    let source = draw_domain(&mut rng, config, config.n_source, |_| p)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TARGET_STREAM);
    let k = config.shift_slope;
    let target = draw_domain(&mut rng, config, config.n_target, |z| sigmoid(intercept + k * z.iter().sum::<f64>()))?;

    Ok(SyntheticPair {
        source,
        target,
        intercept,
    })
}

/// Gaussian generative family with softmax `y | z`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGenConfig {
    /// `M`, shape `p × d`.
    pub mixing_matrix: Array2<f64>,
    /// `a_k` for every class, each of length `p`.
    pub class_offsets: Vec<Array1<f64>>,
    /// `ω*`: the softmax model of `y | z` over `d` features.
    pub conditional_params: SoftmaxParams,
}

impl GaussianGenConfig {
    pub fn validate(&self) -> Result<()> {
        let (p, d) = self.mixing_matrix.dim();
        ensure_dim("class offsets count", self.conditional_params.n_classes(), self.class_offsets.len())?;
        for a in &self.class_offsets {
            ensure_dim("class offset length", p, a.len())?;
        }
        ensure_dim("conditional features", d, self.conditional_params.n_features())
    }

    pub fn d_z(&self) -> usize {
        self.mixing_matrix.ncols()
    }

    pub fn d_x(&self) -> usize {
        self.mixing_matrix.nrows()
    }
}

/// Samples `z ~ N(0, I)`, `y ~ softmax(ω*; z)`, `x ~ N(Mz + a_y, I)`.
pub fn generate_gaussian_family(config: &GaussianGenConfig, n: usize, seed: u64) -> Result<LabeledDataset> {
    config.validate()?;
    let (p, d) = config.mixing_matrix.dim();
    let k = config.conditional_params.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
    let class_probs = predict_proba(&config.conditional_params, z.view())?;
    let mut x = Array2::zeros((n, p));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = k;
        for c in 0..k {
            acc += class_probs.probs()[[i, c]];
            if u < acc {
                label = c + 1;
                break;
            }
        }
        y.push(label);
        let mean = config.mixing_matrix.dot(&z.row(i)) + &config.class_offsets[label - 1];
        for j in 0..p {
            x[[i, j]] = mean[j] + rng.sample::<f64, _>(StandardNormal);
        }
    }
    LabeledDataset::new(z, x, y, k)
}

/// Exact posterior `P(y|x,z)` of the Gaussian family, as a softmax model over
/// the joint features `x ⊕ z`.
///
/// Class `k` scores `xᵀ(a_k − a_K) + zᵀ(Mᵀ(a_K − a_k) + ω*_k) + ½(a_Kᵀa_K − a_kᵀa_k) + ω*_{k0}`.
pub fn gaussian_posterior_params(config: &GaussianGenConfig) -> Result<SoftmaxParams> {
    config.validate()?;
    let (p, d) = config.mixing_matrix.dim();
    let k = config.conditional_params.n_classes();
    let a_ref = &config.class_offsets[k - 1];
    let mut intercepts = Array1::zeros(k - 1);
    let mut slopes = Array2::zeros((k - 1, p + d));
    for c in 0..k - 1 {
        let a_c = &config.class_offsets[c];
        let diff = a_c - a_ref;
        intercepts[c] =
            0.5 * (a_ref.dot(a_ref) - a_c.dot(a_c)) + config.conditional_params.intercepts()[c];
        let z_part = config.mixing_matrix.t().dot(&(-&diff)) + config.conditional_params.slopes().row(c);
        slopes.slice_mut(ndarray::s![c, ..p]).assign(&diff);
        slopes.slice_mut(ndarray::s![c, p..]).assign(&z_part);
    }
    SoftmaxParams::new(k, intercepts, slopes)
}

/// Stratified resampling settings for a binary label and a binary `z` column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftProtocolConfig {
    /// `a`: positive rate in both source strata and in the target `z = 0` stratum.
    pub base_rate: f64,
    /// `k`: extra positive rate in the target `z = 1` stratum.
    pub shift_delta: f64,
    /// Index of the binary column within the `z` block.
    pub conditioning_column: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub seed: u64,
}

impl ShiftProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        check_open_unit("base_rate", self.base_rate)?;
        check_open_unit("base_rate + shift_delta", self.base_rate + self.shift_delta)?;
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::invalid("sample sizes must be positive"));
        }
        Ok(())
    }
}

struct Strata {
    /// Row indices keyed by `[label - 1][z]`.
    rows: [[Vec<usize>; 2]; 2],
    z_one_share: f64,
}

impl Strata {
    fn new(data: &LabeledDataset, column: usize) -> Result<Self> {
        if data.n_classes() != 2 {
            return Err(Error::invalid("conditional shift protocol needs binary labels"));
        }
        if column >= data.d_z() {
            return Err(Error::invalid(format!(
                "conditioning column {column} outside the {} z columns",
                data.d_z()
            )));
        }
        let mut rows: [[Vec<usize>; 2]; 2] = Default::default();
        let zcol = data.z().column(column).to_owned();
        for (i, (&label, &zv)) in data.labels().iter().zip(zcol.iter()).enumerate() {
            let z = if zv == 0.0 {
                0
            } else if zv == 1.0 {
                1
            } else {
                return Err(Error::invalid(format!(
                    "conditioning column {column} is not binary (row {i} has {zv})"
                )));
            };
            rows[label - 1][z].push(i);
        }
        let ones = rows[0][1].len() + rows[1][1].len();
        Ok(Self {
            rows,
            z_one_share: ones as f64 / data.len() as f64,
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng, n: usize, rates: [f64; 2]) -> Result<Vec<usize>> {
        let n1 = (n as f64 * self.z_one_share).round() as usize;
        let per_z = [n - n1, n1];
        let mut picked = Vec::with_capacity(n);
        for z in 0..2 {
            let positives = (per_z[z] as f64 * rates[z]).round() as usize;
            for (label, needed) in [(1usize, positives), (2, per_z[z] - positives)] {
                let pool = &self.rows[label - 1][z];
                if needed > 0 && pool.is_empty() {
                    return Err(Error::EmptyStratum {
                        label,
                        z: z as u8,
                        needed,
                    });
                }
                picked.extend((0..needed).map(|_| pool[rng.random_range(0..pool.len())]));
            }
        }
        // Fisher-Yates so strata are interleaved.
        for i in (1..picked.len()).rev() {
            let j = rng.random_range(0..=i);
            picked.swap(i, j);
        }
        Ok(picked)
    }
}

/// Resamples `data` with replacement into a source with positive rate `a` in
/// both `z` strata and a target with rates `a` (`z = 0`) and `a + k` (`z = 1`).
///
/// Stratum counts are fixed by rounding, so empirical rates match the
/// requested ones up to one row per stratum. The `z = 1` share of the input is
/// kept in both outputs. All other columns are copied unchanged.
pub fn induce_conditional_shift(
    data: &LabeledDataset,
    config: &ShiftProtocolConfig,
) -> Result<(LabeledDataset, LabeledDataset)> {
    config.validate()?;
    let strata = Strata::new(data, config.conditioning_column)?;
    let a = config.base_rate;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SOURCE_STREAM);
    let source_rows = strata.sample(&mut rng, config.n_source, [a, a])?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TARGET_STREAM);
    let target_rows = strata.sample(&mut rng, config.n_target, [a, a + config.shift_delta])?;

    Ok((data.select_rows(&source_rows), data.select_rows(&target_rows)))
}

/// Empirical `P(y = 1 | z_col = value)`.
pub fn empirical_positive_rate(data: &LabeledDataset, column: usize, value: f64) -> Option<f64> {
    let z = data.z();
    let zcol: ArrayView1<'_, f64> = z.column(column);
    let (mut hits, mut total) = (0usize, 0usize);
    for (&label, &zv) in data.labels().iter().zip(zcol.iter()) {
        if zv == value {
            total += 1;
            hits += usize::from(label == 1);
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}
