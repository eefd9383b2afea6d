//! Point parametrization of the conditional outcome distribution.
//!
//! The point effect of treatment `z_t > 0` on stratum `(z_1^{t-1}, x_1^{t-1})`
//! is the contrast `mu(hist, z_t) - mu(hist, 0)` between layered stratum
//! means; covariate point effects are the analogous contrasts at reference
//! level `x_t = 0`, and together with the grand mean they parametrize every
//! cell mean. This module computes point effects from a panel (estimation),
//! extracts them from a table of cell means (synthesis support), and
//! reconstructs cell means from point parameters — the two directions invert
//! each other whenever both use the same proportion table.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::strata::{CellKey, CellTable, GammaKey, MarkovKey, StratumKey, ThetaKey};

/// The set of all point parameters: treatment effects `theta`, covariate
/// effects `gamma`, and the grand mean. Reference levels (`z_t = 0`,
/// `x_t = 0`) are absent from the maps; lookups there yield zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointParams {
    pub theta: BTreeMap<ThetaKey, f64>,
    pub gamma: BTreeMap<GammaKey, f64>,
    pub grand_mean: f64,
}

impl PointParams {
    /// The null parametrization of a design: every point parameter present
    /// and zero.
    pub fn zeros(table: &CellTable) -> PointParams {
        let mut params = PointParams::default();
        for key in table.active_full_strata() {
            params.theta.insert(key, 0.0);
        }
        for key in enumerate_gamma_keys(table) {
            params.gamma.insert(key, 0.0);
        }
        params
    }

    pub fn theta_at(&self, key: &ThetaKey) -> Result<f64> {
        if key.z_t == 0 {
            return Ok(0.0);
        }
        self.theta
            .get(key)
            .copied()
            .ok_or_else(|| Error::MissingPointParam(key.to_string()))
    }

    pub fn gamma_at(&self, key: &GammaKey) -> Result<f64> {
        if key.x_t.iter().all(|&v| v == 0) {
            return Ok(0.0);
        }
        self.gamma
            .get(key)
            .copied()
            .ok_or_else(|| Error::MissingPointParam(key.to_string()))
    }

    /// Largest absolute difference against another parameter set with the
    /// same key layout.
    pub fn max_abs_difference(&self, other: &PointParams) -> f64 {
        let mut worst = (self.grand_mean - other.grand_mean).abs();
        for (k, v) in &self.theta {
            let o = other.theta.get(k).copied().unwrap_or(f64::NAN);
            worst = worst.max((v - o).abs());
        }
        for (k, v) in &self.gamma {
            let o = other.gamma.get(k).copied().unwrap_or(f64::NAN);
            worst = worst.max((v - o).abs());
        }
        if self.theta.len() != other.theta.len() || self.gamma.len() != other.gamma.len() {
            return f64::INFINITY;
        }
        worst
    }
}

impl Serialize for PointParams {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            grand_mean: f64,
            theta: BTreeMap<String, f64>,
            gamma: BTreeMap<String, f64>,
        }
        Repr {
            grand_mean: self.grand_mean,
            theta: self
                .theta
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            gamma: self
                .gamma
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PointParams {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Repr {
            grand_mean: f64,
            theta: BTreeMap<String, f64>,
            gamma: BTreeMap<String, f64>,
        }
        let repr = Repr::deserialize(deserializer)?;
        let mut theta = BTreeMap::new();
        for (k, v) in repr.theta {
            let key = ThetaKey::parse(&k).map_err(serde::de::Error::custom)?;
            theta.insert(key, v);
        }
        let mut gamma = BTreeMap::new();
        for (k, v) in repr.gamma {
            let key = GammaKey::parse(&k).map_err(serde::de::Error::custom)?;
            gamma.insert(key, v);
        }
        Ok(PointParams {
            theta,
            gamma,
            grand_mean: repr.grand_mean,
        })
    }
}

/// Table of standard parameters: one mean per full cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StandardMeans {
    means: BTreeMap<CellKey, f64>,
}

impl StandardMeans {
    pub fn new() -> Self {
        StandardMeans::default()
    }

    pub fn insert(&mut self, cell: CellKey, mean: f64) {
        self.means.insert(cell, mean);
    }

    pub fn get(&self, cell: &CellKey) -> Result<f64> {
        self.means
            .get(cell)
            .copied()
            .ok_or_else(|| Error::MissingCellMean(cell.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CellKey, &f64)> {
        self.means.iter()
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

impl Serialize for StandardMeans {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.means.len()))?;
        for (k, v) in &self.means {
            map.serialize_entry(&k.to_string(), v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for StandardMeans {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = StandardMeans;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a map from cell key strings to means")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut access: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut means = BTreeMap::new();
                while let Some((k, v)) = access.next_entry::<String, f64>()? {
                    let key = CellKey::parse(&k).map_err(serde::de::Error::custom)?;
                    means.insert(key, v);
                }
                Ok(StandardMeans { means })
            }
        }
        deserializer.deserialize_map(V)
    }
}

/// A point-effect estimate: a mean contrast with its sampling variance and
/// the arm sizes it came from.
#[derive(Debug, Clone, Serialize)]
pub struct ThetaEstimate {
    pub value: f64,
    pub variance: f64,
    #[serde(serialize_with = "crate::point_params::serialize_stratum")]
    pub stratum: StratumKey,
    pub n_active: u64,
    pub n_control: u64,
}

pub(crate) fn serialize_stratum<S: Serializer>(
    key: &StratumKey,
    serializer: S,
) -> std::result::Result<S::Ok, S::Error> {
    serializer.serialize_str(&key.to_string())
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "outcome variance must be positive and finite, got {sigma2}"
        )));
    }
    Ok(())
}

/// Point effect of treatment `key.z_t > 0` on the full-history stratum, from
/// stratum means of the panel. The variance assumes a common outcome
/// variance `sigma2`: `sigma2/n_active + sigma2/n_control`.
pub fn point_effect_treatment(
    panel: &PanelData,
    key: &ThetaKey,
    sigma2: f64,
) -> Result<ThetaEstimate> {
    check_sigma2(sigma2)?;
    mean_contrast(panel, key.stratum(), key.with_treatment(0), sigma2)
}

/// Collapsed point effect on the stratum defined by the latest
/// `(z_{t-1}, x_{t-1})` pair only.
pub fn markov_point_effect(
    panel: &PanelData,
    key: &MarkovKey,
    sigma2: f64,
) -> Result<ThetaEstimate> {
    check_sigma2(sigma2)?;
    mean_contrast(panel, key.stratum(), key.with_treatment(0), sigma2)
}

/// Point effect of covariate `key.x_t != 0` on stratum `(z_1^t, x_1^{t-1})`.
pub fn point_effect_covariate(
    panel: &PanelData,
    key: &GammaKey,
    sigma2: f64,
) -> Result<ThetaEstimate> {
    check_sigma2(sigma2)?;
    let reference = vec![0; key.x_t.len()];
    mean_contrast(
        panel,
        key.with_covariate(&key.x_t),
        key.with_covariate(&reference),
        sigma2,
    )
}

fn mean_contrast(
    panel: &PanelData,
    active: StratumKey,
    control: StratumKey,
    sigma2: f64,
) -> Result<ThetaEstimate> {
    let (active_mean, n_active) = panel
        .stratum_mean_outcome(&active)
        .map_err(|_| Error::EmptyActiveStratum(active.to_string()))?;
    let (control_mean, n_control) = panel
        .stratum_mean_outcome(&control)
        .map_err(|_| Error::EmptyControlStratum(control.to_string()))?;
    Ok(ThetaEstimate {
        value: active_mean - control_mean,
        variance: sigma2 / n_active as f64 + sigma2 / n_control as f64,
        stratum: active,
        n_active,
        n_control,
    })
}

/// Overall mean of the outcome.
pub fn grand_mean(panel: &PanelData) -> f64 {
    panel.mean_outcome()
}

/// Saturated cell-mean table of the panel: the empirical standard parameters.
pub fn saturated_means(panel: &PanelData) -> StandardMeans {
    let mut means = StandardMeans::new();
    for (cell, mean, _) in panel.cell_means() {
        means.insert(cell, mean);
    }
    means
}

/// All non-reference covariate strata `(t, z_1^t, x_1^{t-1}, x_t != 0)` with
/// positive weight, canonical order.
pub fn enumerate_gamma_keys(table: &CellTable) -> Vec<GammaKey> {
    let mut out = Vec::new();
    for t in 1..table.horizon() {
        let mut prefixes = std::collections::BTreeSet::new();
        for (z, x) in table.full_histories(t + 1) {
            prefixes.insert((z[..t].to_vec(), x[..t - 1].to_vec()));
        }
        for (z, x) in prefixes {
            let prefix = StratumKey::FullHistoryTreated {
                t,
                z: z[..t - 1].to_vec(),
                x: x.clone(),
                z_t: z[t - 1],
            };
            for x_t in table.observed_covariates(t, &prefix) {
                if x_t.iter().any(|&v| v != 0) {
                    out.push(GammaKey {
                        t,
                        z: z.clone(),
                        x: x.clone(),
                        x_t,
                    });
                }
            }
        }
    }
    out
}

/// Weight-averaged mean of `means` over the cells of a stratum.
pub fn layered_mean(means: &StandardMeans, table: &CellTable, key: &StratumKey) -> Result<f64> {
    let mut wsum = 0.0;
    let mut acc = 0.0;
    for (cell, &w) in table.cells().iter().zip(table.weights()) {
        if key.matches(cell) {
            acc += w * means.get(cell)?;
            wsum += w;
        }
    }
    if wsum <= 0.0 {
        return Err(Error::EmptyStratum(key.to_string()));
    }
    Ok(acc / wsum)
}

/// Reconstruct the mean of one full cell from point parameters: per time,
/// the treatment term `-sum_z* theta(hist, z*) pr(z* | hist) + theta(hist,
/// z_t)`, the analogous covariate term, plus the grand mean.
pub fn reconstruct_standard_mean(
    params: &PointParams,
    table: &CellTable,
    cell: &CellKey,
) -> Result<f64> {
    let t_max = table.horizon();
    let mut acc = params.grand_mean;
    for t in 1..=t_max {
        let hist = StratumKey::FullHistory {
            t,
            z: cell.z[..t - 1].to_vec(),
            x: cell.x[..t - 1].to_vec(),
        };
        for z_star in table.observed_treatments(t, &hist) {
            let theta = params.theta_at(&ThetaKey {
                t,
                z: cell.z[..t - 1].to_vec(),
                x: cell.x[..t - 1].to_vec(),
                z_t: z_star,
            })?;
            if theta != 0.0 {
                let event = StratumKey::FullHistoryTreated {
                    t,
                    z: cell.z[..t - 1].to_vec(),
                    x: cell.x[..t - 1].to_vec(),
                    z_t: z_star,
                };
                let pr = table
                    .proportion(&event, &hist)
                    .map_err(|_| Error::MissingProportion(hist.to_string()))?;
                acc -= theta * pr;
            }
        }
        acc += params.theta_at(&ThetaKey {
            t,
            z: cell.z[..t - 1].to_vec(),
            x: cell.x[..t - 1].to_vec(),
            z_t: cell.z[t - 1],
        })?;
    }
    for t in 1..t_max {
        let prefix = StratumKey::FullHistoryTreated {
            t,
            z: cell.z[..t - 1].to_vec(),
            x: cell.x[..t - 1].to_vec(),
            z_t: cell.z[t - 1],
        };
        let gamma_key = |x_t: &[u32]| GammaKey {
            t,
            z: cell.z[..t].to_vec(),
            x: cell.x[..t - 1].to_vec(),
            x_t: x_t.to_vec(),
        };
        for x_star in table.observed_covariates(t, &prefix) {
            let gamma = params.gamma_at(&gamma_key(&x_star))?;
            if gamma != 0.0 {
                let key = gamma_key(&x_star);
                let event = key.with_covariate(&x_star);
                let pr = table
                    .proportion(&event, &prefix)
                    .map_err(|_| Error::MissingProportion(prefix.to_string()))?;
                acc -= gamma * pr;
            }
        }
        acc += params.gamma_at(&gamma_key(&cell.x[t - 1]))?;
    }
    Ok(acc)
}

/// Reconstruct the whole mean table over the support of `table`.
pub fn reconstruct_all_means(params: &PointParams, table: &CellTable) -> Result<StandardMeans> {
    let mut out = StandardMeans::new();
    for cell in table.cells() {
        let mu = reconstruct_standard_mean(params, table, cell)?;
        out.insert(cell.clone(), mu);
    }
    Ok(out)
}

/// Extract the full point parametrization from a table of cell means:
/// layered means by proportion-weighted averaging, then reference-level
/// contrasts, then the grand mean.
pub fn extract_point_params(means: &StandardMeans, table: &CellTable) -> Result<PointParams> {
    let t_max = table.horizon();
    let mut params = PointParams::default();

    for t in 1..=t_max {
        for (z, x) in table.full_histories(t) {
            let hist = StratumKey::FullHistory {
                t,
                z: z.clone(),
                x: x.clone(),
            };
            let levels = table.observed_treatments(t, &hist);
            let control = StratumKey::FullHistoryTreated {
                t,
                z: z.clone(),
                x: x.clone(),
                z_t: 0,
            };
            if table.weight_of(&control) <= 0.0 {
                return Err(Error::EmptyControlStratum(control.to_string()));
            }
            let control_mean = layered_mean(means, table, &control)?;
            for z_t in levels {
                if z_t == 0 {
                    continue;
                }
                let treated = StratumKey::FullHistoryTreated {
                    t,
                    z: z.clone(),
                    x: x.clone(),
                    z_t,
                };
                let value = layered_mean(means, table, &treated)? - control_mean;
                params.theta.insert(
                    ThetaKey {
                        t,
                        z: z.clone(),
                        x: x.clone(),
                        z_t,
                    },
                    value,
                );
            }
        }
    }

    for t in 1..t_max {
        let mut prefixes: std::collections::BTreeSet<(Vec<u32>, Vec<crate::strata::CovValue>)> =
            std::collections::BTreeSet::new();
        for (z, x) in table.full_histories(t + 1) {
            // (z_1^t, x_1^{t-1}) prefix with the x_t dimension marginalized
            prefixes.insert((z[..t].to_vec(), x[..t - 1].to_vec()));
        }
        for (z_prefix, x_prefix) in prefixes {
            let gamma_template = GammaKey {
                t,
                z: z_prefix.clone(),
                x: x_prefix.clone(),
                x_t: Vec::new(),
            };
            let prefix = gamma_template.prefix();
            let values = table.observed_covariates(t, &prefix);
            let reference_value = vec![0; table.arity().x_levels[t - 1].len()];
            let reference = gamma_template.with_covariate(&reference_value);
            if table.weight_of(&reference) <= 0.0 {
                return Err(Error::EmptyStratum(reference.to_string()));
            }
            let reference_mean = layered_mean(means, table, &reference)?;
            for x_t in values {
                if x_t.iter().all(|&v| v == 0) {
                    continue;
                }
                let stratum = gamma_template.with_covariate(&x_t);
                let value = layered_mean(means, table, &stratum)? - reference_mean;
                params.gamma.insert(
                    GammaKey {
                        t,
                        z: z_prefix.clone(),
                        x: x_prefix.clone(),
                        x_t,
                    },
                    value,
                );
            }
        }
    }

    let mut total = 0.0;
    for (cell, &w) in table.cells().iter().zip(table.weights()) {
        total += w * means.get(cell)?;
    }
    params.grand_mean = total / table.total_weight();
    Ok(params)
}
