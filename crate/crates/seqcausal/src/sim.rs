//! Synthetic designs, outcome generation, and coverage experiments.
//!
//! A design declares treatment-assignment and covariate-transition
//! probabilities; synthesizing it yields a panel skeleton whose cell
//! frequencies realize those probabilities exactly (integer mode) or by
//! multinomial sampling. Standard means encoding a chosen net-effect pattern
//! are built by setting every point effect to `sum_k phi_k c_k` from the
//! design's own proportions and feeding the point parameters through the
//! reconstruction formula. Replicate experiments redraw only the outcome:
//! treatments and covariates stay fixed, replicate `r` uses an RNG substream
//! derived from `(base_seed, r)`, and aggregation is order-independent, so
//! reports do not depend on the worker count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gformula::Regime;
use crate::net_effects::{
    assign_classes, constraint_coefficients, fit_net_effects, Mode, PatternSpec, Sigma2Spec,
};
use crate::panel::PanelData;
use crate::point_params::{
    enumerate_gamma_keys, reconstruct_all_means, PointParams, StandardMeans,
};
use crate::strata::{ArityTable, CellKey, CellTable, CovValue, Level};

/// How cell frequencies are derived from cell probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyMode {
    /// Every `n * pr(cell)` must be an integer; frequencies are exact.
    ExactInteger,
    /// Frequencies drawn once from a multinomial; for sensitivity runs.
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Full,
    Markov,
}

/// One row of a treatment-assignment table: the conditioning values and the
/// probability vector over treatment levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_hist: Option<Vec<Level>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_hist: Option<Vec<CovValue>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_z: Option<Level>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_x: Option<CovValue>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignTable {
    pub conditioning: Conditioning,
    pub rows: Vec<AssignRow>,
}

/// One row of a covariate-transition table: `pr(x_t | z_1^t, x_1^{t-1})`.
/// `p` lists the probabilities of covariate values in lexicographic order of
/// their component vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionRow {
    pub z_hist: Vec<Level>,
    pub x_hist: Vec<CovValue>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionTable {
    pub rows: Vec<TransitionRow>,
}

/// Declarative synthetic design.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub t_horizon: usize,
    pub n_units: u64,
    pub frequency_mode: FrequencyMode,
    /// Number of levels of each `z_t`.
    pub z_levels: Vec<Level>,
    /// Number of levels of each component of each `x_t`.
    pub x_levels: Vec<Vec<Level>>,
    /// Assignment tables, one per treatment time.
    pub z_assign: Vec<AssignTable>,
    /// Transition tables, one per covariate time.
    pub x_transition: Vec<TransitionTable>,
}

const PROB_SUM_TOL: f64 = 1e-12;
const INTEGER_TOL: f64 = 1e-6;

fn check_probability_vector(p: &[f64], expected_len: usize, context: &str) -> Result<()> {
    if p.len() != expected_len {
        return Err(Error::InvalidDesign(format!(
            "{context}: probability vector has length {} but the support has {expected_len} values",
            p.len()
        )));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidDesign(format!(
            "{context}: probabilities must be finite and nonnegative"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::ProbabilitySumError {
            context: context.to_string(),
            sum,
        });
    }
    Ok(())
}

impl DesignSpec {
    pub fn arity(&self) -> ArityTable {
        ArityTable {
            z_levels: self.z_levels.clone(),
            x_levels: self.x_levels.clone(),
        }
    }

    fn validate_shape(&self) -> Result<()> {
        if self.t_horizon == 0 {
            return Err(Error::InvalidDesign("horizon must be at least 1".into()));
        }
        if self.n_units == 0 {
            return Err(Error::InvalidDesign("n_units must be at least 1".into()));
        }
        if self.z_levels.len() != self.t_horizon
            || self.x_levels.len() + 1 != self.t_horizon
            || self.z_assign.len() != self.t_horizon
            || self.x_transition.len() + 1 != self.t_horizon
        {
            return Err(Error::InvalidDesign(format!(
                "tables do not match horizon {}: {} z levels, {} x levels, {} assignment tables, \
                 {} transition tables",
                self.t_horizon,
                self.z_levels.len(),
                self.x_levels.len(),
                self.z_assign.len(),
                self.x_transition.len()
            )));
        }
        if self.z_levels.contains(&0)
            || self
                .x_levels
                .iter()
                .any(|dims| dims.is_empty() || dims.contains(&0))
        {
            return Err(Error::InvalidDesign(
                "every variable needs at least one level and one component".into(),
            ));
        }
        Ok(())
    }

    /// Assignment probabilities `pr(z_t = . | history)`.
    fn assignment_probs(&self, t: usize, z_hist: &[Level], x_hist: &[CovValue]) -> Result<&[f64]> {
        let table = &self.z_assign[t - 1];
        let matches: Vec<&AssignRow> = table
            .rows
            .iter()
            .filter(|row| match table.conditioning {
                Conditioning::Full => {
                    row.z_hist.as_deref() == Some(&z_hist[..t - 1])
                        && row.x_hist.as_deref() == Some(&x_hist[..t - 1])
                }
                Conditioning::Markov => {
                    if t == 1 {
                        row.last_z.is_none() && row.last_x.is_none()
                    } else {
                        row.last_z == Some(z_hist[t - 2])
                            && row.last_x.as_ref() == Some(&x_hist[t - 2])
                    }
                }
            })
            .collect();
        match matches.len() {
            1 => Ok(&matches[0].p),
            0 => Err(Error::InvalidDesign(format!(
                "no assignment row for z{t} given the history reached by the design"
            ))),
            _ => Err(Error::InvalidDesign(format!(
                "multiple assignment rows match one history for z{t}"
            ))),
        }
    }

    fn transition_probs(&self, t: usize, z_hist: &[Level], x_hist: &[CovValue]) -> Result<&[f64]> {
        let table = &self.x_transition[t - 1];
        let matches: Vec<&TransitionRow> = table
            .rows
            .iter()
            .filter(|row| row.z_hist == z_hist[..t] && row.x_hist == x_hist[..t - 1])
            .collect();
        match matches.len() {
            1 => Ok(&matches[0].p),
            0 => Err(Error::InvalidDesign(format!(
                "no transition row for x{t} given the history reached by the design"
            ))),
            _ => Err(Error::InvalidDesign(format!(
                "multiple transition rows match one history for x{t}"
            ))),
        }
    }
}

/// A synthesized panel without outcomes: cells with exact probabilities and
/// realized integer frequencies.
#[derive(Debug, Clone)]
pub struct Skeleton {
    arity: ArityTable,
    cells: Vec<CellKey>,
    probabilities: Vec<f64>,
    frequencies: Vec<u64>,
    n_units: u64,
    table: CellTable,
}

impl Skeleton {
    pub fn n_units(&self) -> u64 {
        self.n_units
    }

    pub fn cells(&self) -> &[CellKey] {
        &self.cells
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Count-weighted cell table realizing the design proportions.
    pub fn table(&self) -> &CellTable {
        &self.table
    }

    /// Attach outcomes drawn as `y ~ Normal(mu(cell), sigma^2)` from a
    /// replicate-specific substream. `sigma = 0` yields the cell means
    /// exactly.
    pub fn generate_outcomes(
        &self,
        means: &StandardMeans,
        sigma: f64,
        seed: [u8; 32],
    ) -> Result<PanelData> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be finite and nonnegative, got {sigma}"
            )));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut groups = Vec::with_capacity(self.cells.len());
        for (cell, &freq) in self.cells.iter().zip(&self.frequencies) {
            if freq == 0 {
                continue;
            }
            let mu = means.get(cell)?;
            let ys: Vec<f64> = (0..freq)
                .map(|_| {
                    if sigma == 0.0 {
                        mu
                    } else {
                        mu + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)
                    }
                })
                .collect();
            groups.push((cell.clone(), ys));
        }
        PanelData::from_cell_outcomes(self.arity.clone(), groups)
    }
}

/// Enumerate the design's cells with exact joint probabilities and realize
/// integer frequencies. The `seed` is used only in multinomial mode.
pub fn synthesize_design(spec: &DesignSpec, seed: [u8; 32]) -> Result<Skeleton> {
    spec.validate_shape()?;
    let arity = spec.arity();
    let mut cells: Vec<CellKey> = Vec::new();
    let mut probabilities: Vec<f64> = Vec::new();

    // depth-first product over z and x supports in canonical order
    fn descend(
        spec: &DesignSpec,
        arity: &ArityTable,
        t: usize,
        z_acc: &mut Vec<Level>,
        x_acc: &mut Vec<CovValue>,
        prob: f64,
        out: &mut (Vec<CellKey>, Vec<f64>),
    ) -> Result<()> {
        let t_max = spec.t_horizon;
        let p_z = spec.assignment_probs(t, z_acc, x_acc)?.to_vec();
        check_probability_vector(&p_z, arity.z_levels[t - 1] as usize, &format!("z{t}"))?;
        for (z_val, &pz) in p_z.iter().enumerate() {
            if pz == 0.0 {
                continue;
            }
            z_acc.push(z_val as Level);
            let prob_z = prob * pz;
            if t == t_max {
                out.0.push(CellKey {
                    z: z_acc.clone(),
                    x: x_acc.clone(),
                });
                out.1.push(prob_z);
            } else {
                let support = arity.covariate_support(t);
                let p_x = spec.transition_probs(t, z_acc, x_acc)?.to_vec();
                check_probability_vector(&p_x, support.len(), &format!("x{t}"))?;
                for (x_val, &px) in support.iter().zip(&p_x) {
                    if px == 0.0 {
                        continue;
                    }
                    x_acc.push(x_val.clone());
                    descend(spec, arity, t + 1, z_acc, x_acc, prob_z * px, out)?;
                    x_acc.pop();
                }
            }
            z_acc.pop();
        }
        Ok(())
    }

    let mut out = (Vec::new(), Vec::new());
    descend(
        spec,
        &arity,
        1,
        &mut Vec::new(),
        &mut Vec::new(),
        1.0,
        &mut out,
    )?;
    cells.append(&mut out.0);
    probabilities.append(&mut out.1);

    let frequencies: Vec<u64> = match spec.frequency_mode {
        FrequencyMode::ExactInteger => {
            let mut freqs = Vec::with_capacity(cells.len());
            for (cell, &p) in cells.iter().zip(&probabilities) {
                let f = p * spec.n_units as f64;
                let rounded = f.round();
                if (f - rounded).abs() > INTEGER_TOL || rounded < 0.0 {
                    return Err(Error::NonIntegerFrequency {
                        cell: cell.to_string(),
                        freq: f,
                        n: spec.n_units,
                    });
                }
                freqs.push(rounded as u64);
            }
            let total: u64 = freqs.iter().sum();
            if total != spec.n_units {
                return Err(Error::InvalidDesign(format!(
                    "cell frequencies sum to {total}, expected {}",
                    spec.n_units
                )));
            }
            freqs
        }
        FrequencyMode::Multinomial => {
            let mut rng = ChaCha8Rng::from_seed(seed);
            let mut freqs = vec![0u64; cells.len()];
            let cumulative: Vec<f64> = probabilities
                .iter()
                .scan(0.0, |acc, p| {
                    *acc += p;
                    Some(*acc)
                })
                .collect();
            for _ in 0..spec.n_units {
                let u: f64 = rng.gen();
                let idx = cumulative.partition_point(|&c| c < u).min(cells.len() - 1);
                freqs[idx] += 1;
            }
            freqs
        }
    };

    let entries: std::collections::BTreeMap<CellKey, f64> = cells
        .iter()
        .cloned()
        .zip(frequencies.iter().map(|&f| f as f64))
        .collect();
    let table = CellTable::new(arity.clone(), entries)?;
    Ok(Skeleton {
        arity,
        cells,
        probabilities,
        frequencies,
        n_units: spec.n_units,
        table,
    })
}

/// Choice of covariate point effects for synthesis. They never influence net
/// effects; nonzero settings exercise exactly that insensitivity.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaSpec {
    #[default]
    Zero,
    Constant(f64),
    /// Deterministic per-stratum variation: the i-th gamma key in canonical
    /// order gets `scale * (1 + (i mod 3))`.
    Varying {
        scale: f64,
    },
}

/// Standard means that encode the pattern: every point effect is set to
/// `sum_k phi_k c_k(stratum)` from the design's own proportions, covariate
/// effects and the grand mean are adopted as given, and the means follow by
/// reconstruction.
pub fn synthesize_standard_means(
    table: &CellTable,
    pattern: &PatternSpec,
    phi: &[f64],
    gamma: &GammaSpec,
    grand_mean: f64,
) -> Result<(StandardMeans, PointParams)> {
    let assign = assign_classes(pattern, table)?;
    if phi.len() != assign.class_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} phi values against {} classes",
            phi.len(),
            assign.class_count()
        )));
    }
    let mut params = PointParams {
        grand_mean,
        ..Default::default()
    };
    for key in table.active_full_strata() {
        let row = constraint_coefficients(table, &assign, &key)?;
        let theta: f64 = row.c.iter().zip(phi).map(|(c, p)| c * p).sum();
        params.theta.insert(key, theta);
    }
    for (i, key) in enumerate_gamma_keys(table).into_iter().enumerate() {
        let value = match gamma {
            GammaSpec::Zero => 0.0,
            GammaSpec::Constant(v) => *v,
            GammaSpec::Varying { scale } => scale * (1 + (i % 3)) as f64,
        };
        params.gamma.insert(key, value);
    }
    let means = reconstruct_all_means(&params, table)?;
    Ok((means, params))
}

/// Full configuration of one simulation scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub design: DesignSpec,
    pub pattern: PatternSpec,
    pub phi: Vec<f64>,
    #[serde(default)]
    pub gamma: GammaSpec,
    #[serde(default)]
    pub grand_mean: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub replicates: u64,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    pub base_seed: u64,
    /// Which point effects are regressed on the constraint.
    pub estimation: Mode,
}

fn default_sigma() -> f64 {
    1.0
}

fn default_ci_level() -> f64 {
    0.95
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidConfig("replicates must be at least 1".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidLevel(self.ci_level));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be finite and nonnegative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Substream seed for replicate `r`: a SplitMix64 expansion of
/// `(base_seed, r)`, so replicates are independent of execution order.
pub fn replicate_seed(base_seed: u64, replicate: u64) -> [u8; 32] {
    fn splitmix(state: &mut u64) -> u64 {
        *state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = *state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    let mut state = base_seed ^ replicate.wrapping_mul(0xd1b54a32d192ed03);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
    }
    seed
}

/// Two-sided normal confidence interval. Degenerate at zero variance.
pub fn confidence_interval(estimate: f64, variance: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidLevel(level));
    }
    if variance < 0.0 || !variance.is_finite() {
        return Err(Error::NegativeVariance(variance));
    }
    let z = normal_quantile(0.5 * (1.0 + level))?;
    let half = z * variance.sqrt();
    Ok((estimate - half, estimate + half))
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidLevel(p));
    }
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(p))
}

/// One replicate's estimation record.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub replicate: u64,
    pub phi_hat: Vec<f64>,
    pub reported_variance: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
    pub covered: Vec<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Aggregated results of one scenario.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub phi_true: Vec<f64>,
    pub estimation: Mode,
    pub n_units: u64,
    pub sigma: f64,
    pub ci_level: f64,
    pub base_seed: u64,
    pub replicates: u64,
    pub failures: u64,
    pub mean_phi_hat: Vec<f64>,
    /// Per class, the across-replicate variance of `phi_hat` (denominator
    /// `n - 1`).
    pub empirical_variance: Vec<f64>,
    /// Per class, the average of the GLS-reported variances.
    pub mean_reported_variance: Vec<f64>,
    /// Per class, the fraction of replicates whose CI contains the truth.
    pub coverage: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_replicate: Option<Vec<ReplicateRecord>>,
}

/// A coverage study: one report per scenario.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub scenarios: Vec<ScenarioReport>,
}

fn run_one_replicate(
    skeleton: &Skeleton,
    means: &StandardMeans,
    config: &SimConfig,
    replicate: u64,
) -> ReplicateRecord {
    let k = config.phi.len();
    let fail = |msg: String| ReplicateRecord {
        replicate,
        phi_hat: vec![],
        reported_variance: vec![],
        ci: vec![],
        covered: vec![],
        error: Some(msg),
    };
    let seed = replicate_seed(config.base_seed, replicate);
    let panel = match skeleton.generate_outcomes(means, config.sigma, seed) {
        Ok(p) => p,
        Err(e) => return fail(e.to_string()),
    };
    // The point-effect covariance is proportional to sigma^2; weights are
    // computed at unit variance and the covariance rescaled, which keeps the
    // noiseless mode well defined.
    let fit = match fit_net_effects(
        &panel,
        &config.pattern,
        config.estimation,
        Sigma2Spec::Declared(1.0),
    ) {
        Ok(f) => f,
        Err(e) => return fail(e.to_string()),
    };
    if fit.estimate.k() != k {
        return fail(format!(
            "pattern yielded {} classes but {} phi values were configured",
            fit.estimate.k(),
            k
        ));
    }
    let scale = config.sigma * config.sigma;
    let phi_hat = fit.estimate.phi.clone();
    let mut reported_variance = Vec::with_capacity(k);
    let mut ci = Vec::with_capacity(k);
    let mut covered = Vec::with_capacity(k);
    for class in 1..=k {
        let var = fit.estimate.variance(class) * scale;
        let interval = match confidence_interval(phi_hat[class - 1], var, config.ci_level) {
            Ok(iv) => iv,
            Err(e) => return fail(e.to_string()),
        };
        reported_variance.push(var);
        covered.push(interval.0 <= config.phi[class - 1] && config.phi[class - 1] <= interval.1);
        ci.push(interval);
    }
    ReplicateRecord {
        replicate,
        phi_hat,
        reported_variance,
        ci,
        covered,
        error: None,
    }
}

/// Run all replicates of one scenario. `jobs` bounds the worker count; the
/// report is identical for any value because replicate seeds depend only on
/// `(base_seed, r)` and aggregation runs in replicate order.
pub fn run_replicates(
    config: &SimConfig,
    keep_replicates: bool,
    jobs: Option<usize>,
) -> Result<ScenarioReport> {
    config.validate()?;
    let skeleton = synthesize_design(&config.design, replicate_seed(config.base_seed, u64::MAX))?;
    let (means, _params) = synthesize_standard_means(
        skeleton.table(),
        &config.pattern,
        &config.phi,
        &config.gamma,
        config.grand_mean,
    )?;

    let indices: Vec<u64> = (0..config.replicates).collect();
    let records: Vec<ReplicateRecord> = match jobs {
        Some(1) => indices
            .iter()
            .map(|&r| run_one_replicate(&skeleton, &means, config, r))
            .collect(),
        _ => {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.unwrap_or(0))
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            pool.install(|| {
                indices
                    .par_iter()
                    .map(|&r| run_one_replicate(&skeleton, &means, config, r))
                    .collect()
            })
        }
    };

    let k = config.phi.len();
    let mut ok = 0u64;
    let mut failures = 0u64;
    let mut sum = vec![0.0; k];
    let mut sum_sq = vec![0.0; k];
    let mut sum_var = vec![0.0; k];
    let mut hits = vec![0u64; k];
    for rec in &records {
        if rec.error.is_some() {
            failures += 1;
            continue;
        }
        ok += 1;
        for i in 0..k {
            sum[i] += rec.phi_hat[i];
            sum_sq[i] += rec.phi_hat[i] * rec.phi_hat[i];
            sum_var[i] += rec.reported_variance[i];
            if rec.covered[i] {
                hits[i] += 1;
            }
        }
    }
    let n = ok.max(1) as f64;
    let mean_phi_hat: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let empirical_variance: Vec<f64> = sum_sq
        .iter()
        .zip(&mean_phi_hat)
        .map(|(&sq, &m)| {
            if ok > 1 {
                (sq - n * m * m) / (n - 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let mean_reported_variance: Vec<f64> = sum_var.iter().map(|s| s / n).collect();
    let coverage: Vec<f64> = hits.iter().map(|&h| h as f64 / n).collect();

    Ok(ScenarioReport {
        phi_true: config.phi.clone(),
        estimation: config.estimation,
        n_units: config.design.n_units,
        sigma: config.sigma,
        ci_level: config.ci_level,
        base_seed: config.base_seed,
        replicates: config.replicates,
        failures,
        mean_phi_hat,
        empirical_variance,
        mean_reported_variance,
        coverage,
        per_replicate: keep_replicates.then_some(records),
    })
}

/// Run several scenarios into one report.
pub fn run_scenarios(
    configs: &[SimConfig],
    keep_replicates: bool,
    jobs: Option<usize>,
) -> Result<CoverageReport> {
    let scenarios = configs
        .iter()
        .map(|c| run_replicates(c, keep_replicates, jobs))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageReport { scenarios })
}

/// Identity checks used by the validation suite: regimes derived from the
/// design's treatment supports.
pub fn all_static_regimes(arity: &ArityTable) -> Vec<Regime> {
    let mut regimes: Vec<Vec<Level>> = vec![vec![]];
    for t in 1..=arity.horizon() {
        let mut next = Vec::new();
        for prefix in &regimes {
            for level in arity.treatment_support(t) {
                let mut r = prefix.clone();
                r.push(level);
                next.push(r);
            }
        }
        regimes = next;
    }
    regimes.into_iter().map(Regime::Static).collect()
}
