//! Treatment regimes, G-formula evaluation, and sequential causal effects.
//!
//! A regime fixes every treatment in advance (static) or as a deterministic
//! function of the observed covariate history (dynamic). The G-formula
//! identifies the counterfactual outcome mean of a regime as the sum over
//! covariate paths of the terminal cell mean weighted by the product of
//! covariate transition proportions along the path. Under a net-effect
//! pattern the same mean decomposes as the baseline all-control mean plus
//! `sum_k phi_k q_k(regime)`, where `q_k` adds up the proportions of class-k
//! active treatments realized under the regime — so sequential causal effects
//! need only `phi` and the per-regime `q` vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net_effects::{ClassAssignment, Mode, NetEffectEstimate, StratumRef};
use crate::point_params::StandardMeans;
use crate::strata::{CellKey, CellTable, CovValue, Level, MarkovKey, StratumKey, ThetaKey};

/// Condition on one covariate component observed before a decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovCondition {
    /// Covariate time (1-based).
    pub t: usize,
    /// Component index within the covariate vector (1-based).
    pub component: usize,
    pub value: Level,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub conditions: Vec<CovCondition>,
    pub z: Level,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Fixed(Level),
    /// First matching case wins; histories matching no case are an error.
    Cases(Vec<Case>),
}

/// Deterministic static or dynamic treatment policy.
#[derive(Debug, Clone, PartialEq)]
pub enum Regime {
    Static(Vec<Level>),
    Dynamic(Vec<Decision>),
}

// Serialized regime grammar:
//   {"kind":"static","z":[1,0]}
//   {"kind":"dynamic","decisions":[{"t":1,"z":1},
//        {"t":2,"cases":[{"when":{"x1_1":0},"z":1},{"when":{"x1_1":1},"z":0}]}]}
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RegimeFile {
    Static { z: Vec<Level> },
    Dynamic { decisions: Vec<DecisionFile> },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionFile {
    t: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    z: Option<Level>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cases: Option<Vec<CaseFile>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    when: BTreeMap<String, Level>,
    z: Level,
}

fn parse_condition_key(key: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidRegime(format!("condition key `{key}` is not of the form x<t>_<j>"));
    let rest = key.strip_prefix('x').ok_or_else(bad)?;
    let (t, j) = rest.split_once('_').ok_or_else(bad)?;
    let t: usize = t.parse().map_err(|_| bad())?;
    let j: usize = j.parse().map_err(|_| bad())?;
    if t == 0 || j == 0 {
        return Err(bad());
    }
    Ok((t, j))
}

impl Regime {
    pub fn from_json(json: &str) -> Result<Self> {
        let file: RegimeFile = serde_json::from_str(json)?;
        match file {
            RegimeFile::Static { z } => {
                if z.is_empty() {
                    return Err(Error::InvalidRegime(
                        "static regime with no treatments".into(),
                    ));
                }
                Ok(Regime::Static(z))
            }
            RegimeFile::Dynamic { decisions } => {
                let horizon = decisions.len();
                let mut parsed: Vec<Option<Decision>> = vec![None; horizon];
                for d in decisions {
                    if d.t == 0 || d.t > horizon {
                        return Err(Error::InvalidRegime(format!(
                            "decision time {} outside 1..={horizon}",
                            d.t
                        )));
                    }
                    if parsed[d.t - 1].is_some() {
                        return Err(Error::InvalidRegime(format!(
                            "duplicate decision for time {}",
                            d.t
                        )));
                    }
                    let decision = match (d.z, d.cases) {
                        (Some(z), None) => Decision::Fixed(z),
                        (None, Some(cases)) => {
                            if cases.is_empty() {
                                return Err(Error::InvalidRegime(format!(
                                    "decision at time {} has an empty case list",
                                    d.t
                                )));
                            }
                            let mut parsed_cases = Vec::with_capacity(cases.len());
                            for case in cases {
                                let mut conditions = Vec::with_capacity(case.when.len());
                                for (key, value) in case.when {
                                    let (t, component) = parse_condition_key(&key)?;
                                    if t >= d.t {
                                        return Err(Error::InvalidRegime(format!(
                                            "decision at time {} conditions on x{t}_{component}, \
                                             which is not yet observed",
                                            d.t
                                        )));
                                    }
                                    conditions.push(CovCondition {
                                        t,
                                        component,
                                        value,
                                    });
                                }
                                parsed_cases.push(Case {
                                    conditions,
                                    z: case.z,
                                });
                            }
                            Decision::Cases(parsed_cases)
                        }
                        _ => {
                            return Err(Error::InvalidRegime(format!(
                                "decision at time {} must declare exactly one of `z` or `cases`",
                                d.t
                            )))
                        }
                    };
                    parsed[d.t - 1] = decision.into();
                }
                Ok(Regime::Dynamic(
                    parsed.into_iter().map(|d| d.unwrap()).collect(),
                ))
            }
        }
    }

    pub fn to_json(&self) -> String {
        let file = match self {
            Regime::Static(z) => RegimeFile::Static { z: z.clone() },
            Regime::Dynamic(decisions) => RegimeFile::Dynamic {
                decisions: decisions
                    .iter()
                    .enumerate()
                    .map(|(idx, d)| match d {
                        Decision::Fixed(z) => DecisionFile {
                            t: idx + 1,
                            z: Some(*z),
                            cases: None,
                        },
                        Decision::Cases(cases) => DecisionFile {
                            t: idx + 1,
                            z: None,
                            cases: Some(
                                cases
                                    .iter()
                                    .map(|c| CaseFile {
                                        when: c
                                            .conditions
                                            .iter()
                                            .map(|cond| {
                                                (
                                                    format!("x{}_{}", cond.t, cond.component),
                                                    cond.value,
                                                )
                                            })
                                            .collect(),
                                        z: c.z,
                                    })
                                    .collect(),
                            ),
                        },
                    })
                    .collect(),
            },
        };
        serde_json::to_string_pretty(&file).expect("regime serialization cannot fail")
    }

    pub fn horizon(&self) -> usize {
        match self {
            Regime::Static(z) => z.len(),
            Regime::Dynamic(d) => d.len(),
        }
    }

    /// Treatment at time `t` given the observed covariate history.
    pub fn decide(&self, t: usize, x_hist: &[CovValue]) -> Result<Level> {
        match self {
            Regime::Static(z) => Ok(z[t - 1]),
            Regime::Dynamic(decisions) => match &decisions[t - 1] {
                Decision::Fixed(z) => Ok(*z),
                Decision::Cases(cases) => {
                    for case in cases {
                        let hit = case.conditions.iter().all(|cond| {
                            x_hist
                                .get(cond.t - 1)
                                .and_then(|xs| xs.get(cond.component - 1))
                                .is_some_and(|&v| v == cond.value)
                        });
                        if hit {
                            return Ok(case.z);
                        }
                    }
                    Err(Error::UnresolvedDecision {
                        t,
                        history: x_hist
                            .iter()
                            .map(|xs| {
                                xs.iter()
                                    .map(|v| v.to_string())
                                    .collect::<Vec<_>>()
                                    .join(",")
                            })
                            .collect::<Vec<_>>()
                            .join(";"),
                    })
                }
            },
        }
    }

    /// Check the regime against a design: the horizon must match, every
    /// condition must reference an existing covariate component, and every
    /// covariate history reachable under the regime must resolve.
    pub fn validate(&self, table: &CellTable) -> Result<()> {
        if self.horizon() != table.horizon() {
            return Err(Error::InvalidRegime(format!(
                "regime spans {} times but the design has horizon {}",
                self.horizon(),
                table.horizon()
            )));
        }
        if let Regime::Static(z) = self {
            for (idx, (&level, &levels)) in z.iter().zip(&table.arity().z_levels).enumerate() {
                if level >= levels {
                    return Err(Error::InvalidRegime(format!(
                        "treatment z{}={} exceeds the design's arity {}",
                        idx + 1,
                        level,
                        levels
                    )));
                }
            }
        }
        if let Regime::Dynamic(decisions) = self {
            for (idx, d) in decisions.iter().enumerate() {
                if let Decision::Cases(cases) = d {
                    for case in cases {
                        for cond in &case.conditions {
                            let dims = table
                                .arity()
                                .x_levels
                                .get(cond.t - 1)
                                .map(|v| v.len())
                                .unwrap_or(0);
                            if cond.t > idx || cond.component > dims {
                                return Err(Error::InvalidRegime(format!(
                                    "decision at time {} conditions on x{}_{}, which does not \
                                     exist in the design",
                                    idx + 1,
                                    cond.t,
                                    cond.component
                                )));
                            }
                        }
                    }
                }
            }
        }
        // dry-run the walk so unresolved decisions and missing transition
        // proportions surface as load-time errors
        walk_regime(table, self, &mut |_, _, _, _| Ok(()), &mut |_, _| Ok(()))
    }
}

/// Walk every positive-probability covariate path under the regime in
/// canonical order. `on_treatment(t, z_1^t, x_1^{t-1}, prob)` fires for each
/// time; `on_terminal(cell, prob)` fires once per complete path.
fn walk_regime(
    table: &CellTable,
    regime: &Regime,
    on_treatment: &mut impl FnMut(usize, &[Level], &[CovValue], f64) -> Result<()>,
    on_terminal: &mut impl FnMut(&CellKey, f64) -> Result<()>,
) -> Result<()> {
    #[allow(clippy::too_many_arguments)]
    fn visit(
        table: &CellTable,
        regime: &Regime,
        t: usize,
        z_acc: &mut Vec<Level>,
        x_acc: &mut Vec<CovValue>,
        prob: f64,
        on_treatment: &mut impl FnMut(usize, &[Level], &[CovValue], f64) -> Result<()>,
        on_terminal: &mut impl FnMut(&CellKey, f64) -> Result<()>,
    ) -> Result<()> {
        let t_max = table.horizon();
        let z_t = regime.decide(t, x_acc)?;
        z_acc.push(z_t);
        on_treatment(t, z_acc, x_acc, prob)?;
        if t == t_max {
            let cell = CellKey {
                z: z_acc.clone(),
                x: x_acc.clone(),
            };
            on_terminal(&cell, prob)?;
            z_acc.pop();
            return Ok(());
        }
        let cond = StratumKey::FullHistoryTreated {
            t,
            z: z_acc[..t - 1].to_vec(),
            x: x_acc.clone(),
            z_t,
        };
        let denom = table.weight_of(&cond);
        if denom <= 0.0 {
            return Err(Error::MissingTransitionProportion(cond.to_string()));
        }
        for x_val in table.arity().covariate_support(t) {
            let mut x_next = x_acc.clone();
            x_next.push(x_val.clone());
            let event = StratumKey::FullHistory {
                t: t + 1,
                z: z_acc.clone(),
                x: x_next,
            };
            let p = table.weight_of(&event) / denom;
            if p > 0.0 {
                x_acc.push(x_val);
                visit(
                    table,
                    regime,
                    t + 1,
                    z_acc,
                    x_acc,
                    prob * p,
                    on_treatment,
                    on_terminal,
                )?;
                x_acc.pop();
            }
        }
        z_acc.pop();
        Ok(())
    }
    visit(
        table,
        regime,
        1,
        &mut Vec::new(),
        &mut Vec::new(),
        1.0,
        on_treatment,
        on_terminal,
    )
}

/// Counterfactual outcome mean of a regime: the sum over covariate paths of
/// `mu(z_1^T, x_1^{T-1})` times the product of transition proportions.
pub fn evaluate_gformula(means: &StandardMeans, table: &CellTable, regime: &Regime) -> Result<f64> {
    regime.validate(table)?;
    let mut acc = 0.0;
    walk_regime(
        table,
        regime,
        &mut |_, _, _, _| Ok(()),
        &mut |cell, prob| {
            let mu = means
                .get(cell)
                .map_err(|_| Error::UnreachableCellMean(cell.to_string()))?;
            acc += prob * mu;
            Ok(())
        },
    )?;
    Ok(acc)
}

/// Per-class sums of proportions of active treatments realized under the
/// regime. Non-integer values arise for dynamic regimes, where a treatment is
/// active only on part of the covariate paths.
pub fn q_coefficients(
    table: &CellTable,
    assign: &ClassAssignment,
    regime: &Regime,
) -> Result<Vec<f64>> {
    regime.validate(table)?;
    let mut q = vec![0.0; assign.class_count()];
    walk_regime(
        table,
        regime,
        &mut |t, z_acc, x_acc, prob| {
            let z_t = z_acc[t - 1];
            if z_t == 0 {
                return Ok(());
            }
            let stratum = match assign.mode() {
                Mode::Full => StratumRef::Full(ThetaKey {
                    t,
                    z: z_acc[..t - 1].to_vec(),
                    x: x_acc.to_vec(),
                    z_t,
                }),
                Mode::Markov => StratumRef::Markov(MarkovKey {
                    t,
                    last: if t == 1 {
                        None
                    } else {
                        Some((z_acc[t - 2], x_acc[t - 2].clone()))
                    },
                    z_t,
                }),
            };
            let class = assign.classify(&stratum)?;
            q[class - 1] += prob;
            Ok(())
        },
        &mut |_, _| Ok(()),
    )?;
    Ok(q)
}

/// A sequential causal effect derived from net effects.
#[derive(Debug, Clone, Serialize)]
pub struct SceEstimate {
    pub value: f64,
    /// `(q_a - q_b)' cov(phi) (q_a - q_b)`, treating the q vectors as fixed.
    pub variance: f64,
    pub q_a: Vec<f64>,
    pub q_b: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Contrast two regimes through the net-effect decomposition.
pub fn sce_from_net_effects(
    estimate: &NetEffectEstimate,
    q_a: &[f64],
    q_b: &[f64],
) -> Result<SceEstimate> {
    let k = estimate.k();
    if q_a.len() != k || q_b.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "q vectors of length {} and {} against {} classes",
            q_a.len(),
            q_b.len(),
            k
        )));
    }
    let d: Vec<f64> = q_a.iter().zip(q_b).map(|(a, b)| a - b).collect();
    let value = estimate.phi.iter().zip(&d).map(|(p, d)| p * d).sum();
    let mut variance = 0.0;
    for i in 0..k {
        for j in 0..k {
            variance += d[i] * estimate.covariance[i][j] * d[j];
        }
    }
    Ok(SceEstimate {
        value,
        variance,
        q_a: q_a.to_vec(),
        q_b: q_b.to_vec(),
        phi: estimate.phi.clone(),
    })
}

/// Direct G-formula contrast of two regimes, used as the cross-check against
/// the net-effect route.
pub fn sce_from_gformula(
    means: &StandardMeans,
    table: &CellTable,
    a: &Regime,
    b: &Regime,
) -> Result<f64> {
    Ok(evaluate_gformula(means, table, a)? - evaluate_gformula(means, table, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net_effects::{assign_classes, PatternSpec};
    use crate::panel::load_panel;
    use crate::strata::ArityTable;

    /// T=2 binary fixture with pr(x1=1|z1=1) = 3/4, pr(x1=1|z1=0) = 1/2 and
    /// distinct cell means.
    fn fixture() -> (StandardMeans, CellTable) {
        let arity = ArityTable {
            z_levels: vec![2, 2],
            x_levels: vec![vec![2]],
        };
        let mut entries = BTreeMap::new();
        let mut means = StandardMeans::new();
        // counts: (z1=0): x1=0 -> 4, x1=1 -> 4; (z1=1): x1=0 -> 2, x1=1 -> 6
        // each split evenly over z2.
        let data = [
            ((0, 0, 0), 2.0, 0.0),
            ((0, 0, 1), 2.0, 2.0),
            ((0, 1, 0), 2.0, 1.0),
            ((0, 1, 1), 2.0, 5.0),
            ((1, 0, 0), 1.0, 1.0),
            ((1, 0, 1), 1.0, 7.0),
            ((1, 1, 0), 3.0, 3.0),
            ((1, 1, 1), 3.0, 9.0),
        ];
        for ((z1, x1, z2), w, mu) in data {
            let cell = CellKey {
                z: vec![z1, z2],
                x: vec![vec![x1]],
            };
            entries.insert(cell.clone(), w);
            means.insert(cell, mu);
        }
        (means, CellTable::new(arity, entries).unwrap())
    }

    #[test]
    fn static_regime_json_round_trip() {
        let r = Regime::from_json(r#"{"kind":"static","z":[1,0]}"#).unwrap();
        assert_eq!(r, Regime::Static(vec![1, 0]));
        let back = Regime::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn dynamic_regime_json_round_trip() {
        let json = r#"{"kind":"dynamic","decisions":[{"t":1,"z":1},
            {"t":2,"cases":[{"when":{"x1_1":0},"z":1},{"when":{"x1_1":1},"z":0}]}]}"#;
        let r = Regime::from_json(json).unwrap();
        assert_eq!(r.decide(1, &[]).unwrap(), 1);
        assert_eq!(r.decide(2, &[vec![0]]).unwrap(), 1);
        assert_eq!(r.decide(2, &[vec![1]]).unwrap(), 0);
        let back = Regime::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn conditioning_on_the_future_is_rejected() {
        let json = r#"{"kind":"dynamic","decisions":[
            {"t":1,"cases":[{"when":{"x1_1":0},"z":1}]},{"t":2,"z":0}]}"#;
        assert!(matches!(
            Regime::from_json(json),
            Err(Error::InvalidRegime(_))
        ));
    }

    #[test]
    fn t1_gformula_is_the_raw_mean() {
        let arity = ArityTable {
            z_levels: vec![2],
            x_levels: vec![],
        };
        let mut entries = BTreeMap::new();
        entries.insert(
            CellKey {
                z: vec![0],
                x: vec![],
            },
            3.0,
        );
        entries.insert(
            CellKey {
                z: vec![1],
                x: vec![],
            },
            1.0,
        );
        let table = CellTable::new(arity, entries).unwrap();
        let mut means = StandardMeans::new();
        means.insert(
            CellKey {
                z: vec![0],
                x: vec![],
            },
            -1.0,
        );
        means.insert(
            CellKey {
                z: vec![1],
                x: vec![],
            },
            8.0,
        );
        let v = evaluate_gformula(&means, &table, &Regime::Static(vec![1])).unwrap();
        assert_eq!(v, 8.0);
    }

    #[test]
    fn constant_means_give_constant_value_for_every_regime() {
        let (_, table) = fixture();
        let mut means = StandardMeans::new();
        for cell in table.cells() {
            means.insert(cell.clone(), 4.25);
        }
        for z1 in 0..2 {
            for z2 in 0..2 {
                let v = evaluate_gformula(&means, &table, &Regime::Static(vec![z1, z2])).unwrap();
                assert!((v - 4.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_summed_t2_value() {
        let (means, table) = fixture();
        // regime (1,0): pr(x1=0|z1=1)=1/4, pr(x1=1|z1=1)=3/4
        // value = 1/4 * mu(1,x=0,0) + 3/4 * mu(1,x=1,0) = 0.25*1 + 0.75*3 = 2.5
        let v = evaluate_gformula(&means, &table, &Regime::Static(vec![1, 0])).unwrap();
        assert!((v - 2.5).abs() < 1e-15);
        // regime (0,1): 1/2 * 2 + 1/2 * 5 = 3.5
        let v = evaluate_gformula(&means, &table, &Regime::Static(vec![0, 1])).unwrap();
        assert!((v - 3.5).abs() < 1e-15);
    }

    #[test]
    fn q_of_all_control_regime_is_zero() {
        let (_, table) = fixture();
        let assign = assign_classes(&PatternSpec::per_time(Mode::Full), &table).unwrap();
        let q = q_coefficients(&table, &assign, &Regime::Static(vec![0, 0])).unwrap();
        assert_eq!(q, vec![0.0, 0.0]);
    }

    #[test]
    fn q_of_static_one_zero_regime() {
        let (_, table) = fixture();
        let assign = assign_classes(&PatternSpec::per_time(Mode::Full), &table).unwrap();
        let q = q_coefficients(&table, &assign, &Regime::Static(vec![1, 0])).unwrap();
        assert_eq!(q, vec![1.0, 0.0]);
    }

    #[test]
    fn q_of_dynamic_regime_is_a_transition_proportion() {
        let (_, table) = fixture();
        let assign = assign_classes(&PatternSpec::per_time(Mode::Full), &table).unwrap();
        // z1=1; z2=1 iff x1=0: q2 = pr(x1=0 | z1=1) = 1/4
        let regime = Regime::from_json(
            r#"{"kind":"dynamic","decisions":[{"t":1,"z":1},
                {"t":2,"cases":[{"when":{"x1_1":0},"z":1},{"when":{"x1_1":1},"z":0}]}]}"#,
        )
        .unwrap();
        let q = q_coefficients(&table, &assign, &regime).unwrap();
        assert!((q[0] - 1.0).abs() < 1e-15);
        assert!((q[1] - 0.25).abs() < 1e-15);
        // the total active count under a dynamic regime is non-integer
        let total: f64 = q.iter().sum();
        assert!(total > 1.0 && total < 2.0);
        assert!((total - total.round()).abs() > 1e-9);
    }

    #[test]
    fn q_sums_to_active_count_for_static_regimes() {
        let (_, table) = fixture();
        let assign = assign_classes(&PatternSpec::per_time(Mode::Full), &table).unwrap();
        for (z, expect) in [
            (vec![0u32, 0u32], 0.0),
            (vec![1, 0], 1.0),
            (vec![0, 1], 1.0),
            (vec![1, 1], 2.0),
        ] {
            let q = q_coefficients(&table, &assign, &Regime::Static(z)).unwrap();
            let total: f64 = q.iter().sum();
            assert!((total - expect).abs() < 1e-12);
        }
    }

    fn toy_estimate(phi: Vec<f64>, cov: Vec<Vec<f64>>) -> NetEffectEstimate {
        NetEffectEstimate {
            phi,
            covariance: cov,
            residuals: vec![],
            rss: 0.0,
            dof: 0,
            dropped_zero_rows: 0,
        }
    }

    #[test]
    fn sce_of_identical_regimes_is_zero() {
        let est = toy_estimate(vec![2.0], vec![vec![0.25]]);
        let sce = sce_from_net_effects(&est, &[1.0], &[1.0]).unwrap();
        assert_eq!(sce.value, 0.0);
        assert_eq!(sce.variance, 0.0);
    }

    #[test]
    fn scalar_sce_arithmetic() {
        let est = toy_estimate(vec![2.0], vec![vec![0.25]]);
        let sce = sce_from_net_effects(&est, &[3.5], &[0.5]).unwrap();
        assert_eq!(sce.value, 6.0);
        assert_eq!(sce.variance, 2.25);
    }

    #[test]
    fn sce_dimension_mismatch() {
        let est = toy_estimate(vec![2.0], vec![vec![0.25]]);
        assert!(matches!(
            sce_from_net_effects(&est, &[1.0, 2.0], &[0.0, 0.0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn gformula_sce_is_antisymmetric() {
        let (means, table) = fixture();
        let a = Regime::Static(vec![1, 0]);
        let b = Regime::Static(vec![0, 1]);
        let ab = sce_from_gformula(&means, &table, &a, &b).unwrap();
        let ba = sce_from_gformula(&means, &table, &b, &a).unwrap();
        assert!((ab + ba).abs() < 1e-15);
    }

    #[test]
    fn missing_reachable_mean_is_loud() {
        let (_, table) = fixture();
        let mut partial = StandardMeans::new();
        // provide means only on the z2=1 cells
        for cell in table.cells() {
            if cell.z[1] == 1 {
                partial.insert(cell.clone(), 1.0);
            }
        }
        assert!(matches!(
            evaluate_gformula(&partial, &table, &Regime::Static(vec![1, 0])),
            Err(Error::UnreachableCellMean(_))
        ));
    }

    #[test]
    fn unresolved_dynamic_history_fails_validation() {
        let (_, table) = fixture();
        let regime = Regime::from_json(
            r#"{"kind":"dynamic","decisions":[{"t":1,"z":1},
                {"t":2,"cases":[{"when":{"x1_1":0},"z":1}]}]}"#,
        )
        .unwrap();
        assert!(matches!(
            regime.validate(&table),
            Err(Error::UnresolvedDecision { t: 2, .. })
        ));
    }

    #[test]
    fn regime_horizon_mismatch_is_rejected() {
        let (_, table) = fixture();
        assert!(matches!(
            Regime::Static(vec![1]).validate(&table),
            Err(Error::InvalidRegime(_))
        ));
    }

    #[test]
    fn markov_mode_q_matches_full_mode_q_on_markov_classes() {
        // per-time classes key identically in both modes
        let csv = "\
unit_id,z1,x1_1,z2,y
1,0,0,0,0.0
2,0,0,1,0.0
3,0,1,0,0.0
4,0,1,1,0.0
5,1,0,0,0.0
6,1,0,1,0.0
7,1,1,0,0.0
8,1,1,1,0.0
";
        let p = load_panel(csv.as_bytes()).unwrap();
        let full = assign_classes(&PatternSpec::per_time(Mode::Full), p.table()).unwrap();
        let markov = assign_classes(&PatternSpec::per_time(Mode::Markov), p.table()).unwrap();
        let regime = Regime::Static(vec![1, 1]);
        let qf = q_coefficients(p.table(), &full, &regime).unwrap();
        let qm = q_coefficients(p.table(), &markov, &regime).unwrap();
        assert_eq!(qf, qm);
    }
}
