//! Brute-force verification kernel.
//!
//! Everything here recomputes counterfactual quantities directly from their
//! definitions with naive nested loops over cells and covariate combinations,
//! sharing no evaluation logic with the optimized modules. The point is
//! independence: when the oracle and the main path agree to tight tolerances
//! on synthesized designs, both are trusted; when a check fails it names the
//! worst offending stratum.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gformula::{evaluate_gformula, q_coefficients, sce_from_gformula};
use crate::net_effects::{
    assign_classes, constraint_coefficients, ClassAssignment, CoeffRow, PatternSpec, StratumRef,
};
use crate::point_params::{PointParams, StandardMeans};
use crate::sim::{all_static_regimes, synthesize_standard_means, GammaSpec};
use crate::strata::{CellKey, CellTable, CovValue, Level, ThetaKey};

/// Counterfactual means computed exhaustively from a means table and cell
/// weights.
#[derive(Debug, Clone)]
pub struct CounterfactualTable {
    /// `E{y(z)}` for every static regime with full transition support.
    pub regime_means: BTreeMap<Vec<Level>, f64>,
    /// `E{y(z_t, 0, .., 0) | z_1^{t-1}, x_1^{t-1}}` keyed by the stratum with
    /// treatment; the reference level `z_t = 0` is included.
    pub conditional_means: BTreeMap<ThetaKey, f64>,
}

/// Naive conditional proportion: both strata given as explicit prefix
/// predicates over cells.
fn ratio(
    table: &CellTable,
    num_pred: impl Fn(&CellKey) -> bool,
    den_pred: impl Fn(&CellKey) -> bool,
) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (cell, &w) in table.cells().iter().zip(table.weights()) {
        if den_pred(cell) {
            den += w;
            if num_pred(cell) {
                num += w;
            }
        }
    }
    if den > 0.0 {
        Some(num / den)
    } else {
        None
    }
}

fn prefix_matches(cell: &CellKey, z: &[Level], x: &[CovValue]) -> bool {
    cell.z[..z.len()] == *z && cell.x[..x.len()] == *x
}

/// All covariate combinations for times `from..=to`, lexicographic.
fn covariate_combos(table: &CellTable, from: usize, to: usize) -> Vec<Vec<CovValue>> {
    let mut combos = vec![Vec::new()];
    for t in from..=to {
        let support = table.arity().covariate_support(t);
        let mut next = Vec::with_capacity(combos.len() * support.len());
        for prefix in &combos {
            for value in &support {
                let mut c = prefix.clone();
                c.push(value.clone());
                next.push(c);
            }
        }
        combos = next;
    }
    combos
}

/// Distinct observed full histories `(z_1^{t-1}, x_1^{t-1})`.
fn observed_histories(table: &CellTable, t: usize) -> Vec<(Vec<Level>, Vec<CovValue>)> {
    let mut seen = BTreeMap::new();
    for cell in table.cells() {
        seen.entry((cell.z[..t - 1].to_vec(), cell.x[..t - 1].to_vec()))
            .or_insert(());
    }
    seen.into_keys().collect()
}

/// Exhaustively evaluate the counterfactual mean of a static regime by
/// summing `mu(z, x) * prod_t pr(x_t | z_1^t, x_1^{t-1})` over all covariate
/// combinations.
fn static_regime_mean(means: &StandardMeans, table: &CellTable, z: &[Level]) -> Result<f64> {
    let t_max = table.horizon();
    let mut acc = 0.0;
    for combo in covariate_combos(table, 1, t_max.saturating_sub(1)) {
        let mut prob = 1.0;
        for t in 1..t_max {
            let z_pref = &z[..t];
            let x_pref = &combo[..t - 1];
            let x_t = &combo[t - 1];
            let p = ratio(
                table,
                |c| prefix_matches(c, z_pref, &combo[..t]) && c.x[t - 1] == *x_t,
                |c| prefix_matches(c, z_pref, x_pref),
            )
            .ok_or_else(|| {
                Error::MissingTransitionProportion(format!("t={t}|z={z_pref:?}|x={x_pref:?}"))
            })?;
            prob *= p;
            if prob == 0.0 {
                break;
            }
        }
        if prob > 0.0 {
            let cell = CellKey {
                z: z.to_vec(),
                x: combo,
            };
            acc += prob * means.get(&cell)?;
        }
    }
    Ok(acc)
}

/// `E{y(z_t = level, z_{t+1}^T = 0) | history}`: future covariates are
/// integrated over the conditional law along the control continuation.
fn conditional_blip_mean(
    means: &StandardMeans,
    table: &CellTable,
    t: usize,
    hist_z: &[Level],
    hist_x: &[CovValue],
    level: Level,
) -> Result<f64> {
    let t_max = table.horizon();
    let mut z_full = hist_z.to_vec();
    z_full.push(level);
    z_full.resize(t_max, 0);

    let mut acc = 0.0;
    for future in covariate_combos(table, t, t_max.saturating_sub(1).max(t - 1)) {
        // future holds x_t..x_{T-1}; empty when t = T
        let mut x_full = hist_x.to_vec();
        x_full.extend(future.iter().cloned());
        let mut prob = 1.0;
        for s in t..t_max {
            let x_s = &x_full[s - 1];
            let p = ratio(
                table,
                |c| prefix_matches(c, &z_full[..s], &x_full[..s - 1]) && c.x[s - 1] == *x_s,
                |c| prefix_matches(c, &z_full[..s], &x_full[..s - 1]),
            )
            .ok_or_else(|| {
                Error::MissingConditionalMean(format!(
                    "t={s}|z={:?}|x={:?}",
                    &z_full[..s],
                    &x_full[..s - 1]
                ))
            })?;
            prob *= p;
            if prob == 0.0 {
                break;
            }
        }
        if prob > 0.0 {
            let cell = CellKey {
                z: z_full.clone(),
                x: x_full,
            };
            acc += prob * means.get(&cell)?;
        }
    }
    Ok(acc)
}

/// Build the full counterfactual table: all static regimes plus all
/// conditional single-treatment-then-control means.
pub fn enumerate_counterfactual_means(
    means: &StandardMeans,
    table: &CellTable,
) -> Result<CounterfactualTable> {
    let mut regime_means = BTreeMap::new();
    for regime in all_static_regimes(table.arity()) {
        let crate::gformula::Regime::Static(z) = &regime else {
            unreachable!()
        };
        let value = static_regime_mean(means, table, z)?;
        regime_means.insert(z.clone(), value);
    }

    let mut conditional_means = BTreeMap::new();
    for t in 1..=table.horizon() {
        for (hist_z, hist_x) in observed_histories(table, t) {
            // levels observed within the history stratum
            let mut levels: Vec<Level> = Vec::new();
            for cell in table.cells() {
                if prefix_matches(cell, &hist_z, &hist_x) && !levels.contains(&cell.z[t - 1]) {
                    levels.push(cell.z[t - 1]);
                }
            }
            levels.sort_unstable();
            for level in levels {
                let value = conditional_blip_mean(means, table, t, &hist_z, &hist_x, level)?;
                conditional_means.insert(
                    ThetaKey {
                        t,
                        z: hist_z.clone(),
                        x: hist_x.clone(),
                        z_t: level,
                    },
                    value,
                );
            }
        }
    }
    Ok(CounterfactualTable {
        regime_means,
        conditional_means,
    })
}

/// Net effect of one active treatment straight from its definition.
pub fn brute_force_net_effects(ctable: &CounterfactualTable, stratum: &ThetaKey) -> Result<f64> {
    let active = ctable
        .conditional_means
        .get(stratum)
        .ok_or_else(|| Error::MissingConditionalMean(stratum.to_string()))?;
    let reference = ThetaKey {
        z_t: 0,
        ..stratum.clone()
    };
    let control = ctable
        .conditional_means
        .get(&reference)
        .ok_or_else(|| Error::MissingConditionalMean(reference.to_string()))?;
    Ok(active - control)
}

/// Outcome of one identity check.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub tol: f64,
    pub max_abs_violation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst: Option<String>,
    pub pass: bool,
}

impl IdentityCheck {
    fn new(name: &str, tol: f64) -> Self {
        IdentityCheck {
            name: name.to_string(),
            tol,
            max_abs_violation: 0.0,
            worst: None,
            pass: true,
        }
    }

    fn record(&mut self, violation: f64, context: impl FnOnce() -> String) {
        if violation > self.max_abs_violation {
            self.max_abs_violation = violation;
            self.worst = Some(context());
        }
        if violation > self.tol {
            self.pass = false;
        }
    }
}

/// Check `theta(stratum) = sum_k phi_k c_k(stratum)` for every active
/// stratum, with `phi_k` read off the brute-force net effects of class
/// members (which must agree within tolerance themselves).
pub fn verify_constraint(
    params: &PointParams,
    net: &BTreeMap<ThetaKey, f64>,
    rows: &[CoeffRow],
    assign: &ClassAssignment,
    tol: f64,
) -> IdentityCheck {
    let mut check = IdentityCheck::new("constraint_decomposition", tol);
    let k = assign.class_count();
    // representative net effect per class: first member in canonical order
    let mut phi: Vec<Option<f64>> = vec![None; k];
    for (key, value) in net {
        if key.z_t == 0 {
            continue;
        }
        match assign.classify(&StratumRef::Full(key.clone())) {
            Ok(class) => {
                if let Some(rep) = phi[class - 1] {
                    check.record((value - rep).abs(), || {
                        format!("within-class spread at {key}")
                    });
                } else {
                    phi[class - 1] = Some(*value);
                }
            }
            Err(_) => check.record(f64::INFINITY, || format!("unclassifiable stratum {key}")),
        }
    }
    for row in rows {
        let StratumRef::Full(key) = &row.stratum else {
            check.record(f64::INFINITY, || "non-full coefficient row".to_string());
            continue;
        };
        let theta = match params.theta_at(key) {
            Ok(v) => v,
            Err(_) => {
                check.record(f64::INFINITY, || format!("missing theta at {key}"));
                continue;
            }
        };
        let mut decomposed = 0.0;
        for (c, rep) in row.c.iter().zip(&phi) {
            if *c != 0.0 {
                match rep {
                    Some(p) => decomposed += c * p,
                    None => check.record(f64::INFINITY, || "class without net effect".to_string()),
                }
            }
        }
        check.record((theta - decomposed).abs(), || key.to_string());
    }
    check
}

/// Check that every layered mean `mu(z_1^t, x_1^{t-1})` equals the baseline
/// control continuation plus its own net effect plus the proportion-weighted
/// net effects of later active treatments.
pub fn verify_mean_decomposition(
    means: &StandardMeans,
    net: &BTreeMap<ThetaKey, f64>,
    ctable: &CounterfactualTable,
    table: &CellTable,
    tol: f64,
) -> IdentityCheck {
    let mut check = IdentityCheck::new("mean_decomposition", tol);
    let t_max = table.horizon();
    for t in 1..=t_max {
        for (hist_z, hist_x) in observed_histories(table, t) {
            let levels: Vec<Level> = {
                let mut ls = Vec::new();
                for cell in table.cells() {
                    if prefix_matches(cell, &hist_z, &hist_x) && !ls.contains(&cell.z[t - 1]) {
                        ls.push(cell.z[t - 1]);
                    }
                }
                ls.sort_unstable();
                ls
            };
            for level in levels {
                let mut z_pref = hist_z.clone();
                z_pref.push(level);
                // layered mean over the stratum (z_1^t, x_1^{t-1})
                let mut wsum = 0.0;
                let mut msum = 0.0;
                let mut missing = false;
                for (cell, &w) in table.cells().iter().zip(table.weights()) {
                    if prefix_matches(cell, &z_pref, &hist_x) {
                        match means.get(cell) {
                            Ok(mu) => {
                                wsum += w;
                                msum += w * mu;
                            }
                            Err(_) => missing = true,
                        }
                    }
                }
                if missing || wsum <= 0.0 {
                    check.record(f64::INFINITY, || format!("no mean for t={t} stratum"));
                    continue;
                }
                let lhs = msum / wsum;

                let own_key = ThetaKey {
                    t,
                    z: hist_z.clone(),
                    x: hist_x.clone(),
                    z_t: level,
                };
                let baseline_key = ThetaKey {
                    z_t: 0,
                    ..own_key.clone()
                };
                let (Some(&baseline), own) = (
                    ctable.conditional_means.get(&baseline_key),
                    if level == 0 {
                        Some(0.0)
                    } else {
                        net.get(&own_key).copied()
                    },
                ) else {
                    check.record(f64::INFINITY, || format!("missing baseline at {own_key}"));
                    continue;
                };
                let Some(own) = own else {
                    check.record(f64::INFINITY, || format!("missing net effect at {own_key}"));
                    continue;
                };
                let mut rhs = baseline + own;
                // later active treatments weighted by conditional proportions
                for s in (t + 1)..=t_max {
                    for (key, phi_s) in net.iter().filter(|(k, _)| k.t == s && k.z_t > 0) {
                        let member_z = {
                            let mut z = key.z.clone();
                            z.push(key.z_t);
                            z
                        };
                        if member_z[..t] != z_pref[..] || key.x[..t - 1] != hist_x[..] {
                            continue;
                        }
                        let p = ratio(
                            table,
                            |c| prefix_matches(c, &member_z, &key.x),
                            |c| prefix_matches(c, &z_pref, &hist_x),
                        )
                        .unwrap_or(0.0);
                        rhs += phi_s * p;
                    }
                }
                check.record((lhs - rhs).abs(), || own_key.to_string());
            }
        }
    }
    check
}

/// Check the expansion `E{y(z)} = E{y(0)} + sum over realized active
/// treatments of their net effects` for every static regime.
pub fn verify_sce_expansion(
    net: &BTreeMap<ThetaKey, f64>,
    ctable: &CounterfactualTable,
    table: &CellTable,
    tol: f64,
) -> IdentityCheck {
    let mut check = IdentityCheck::new("sce_expansion", tol);
    let t_max = table.horizon();
    let baseline = match ctable.regime_means.get(&vec![0; t_max]) {
        Some(&v) => v,
        None => {
            check.record(f64::INFINITY, || "missing all-control regime".to_string());
            return check;
        }
    };
    for (z, &value) in &ctable.regime_means {
        let mut rhs = baseline;
        for t in 1..=t_max {
            if z[t - 1] == 0 {
                continue;
            }
            for combo in covariate_combos(table, 1, t - 1) {
                let key = ThetaKey {
                    t,
                    z: z[..t - 1].to_vec(),
                    x: combo.clone(),
                    z_t: z[t - 1],
                };
                let Some(&phi) = net.get(&key) else { continue };
                let mut prob = 1.0;
                for s in 1..t {
                    let p = ratio(
                        table,
                        |c| {
                            prefix_matches(c, &z[..s], &combo[..s - 1])
                                && c.x[s - 1] == combo[s - 1]
                        },
                        |c| prefix_matches(c, &z[..s], &combo[..s - 1]),
                    )
                    .unwrap_or(0.0);
                    prob *= p;
                    if prob == 0.0 {
                        break;
                    }
                }
                rhs += phi * prob;
            }
        }
        check.record((value - rhs).abs(), || format!("regime {z:?}"));
    }
    check
}

/// Report of the whole identity suite.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub checks: Vec<IdentityCheck>,
    pub pass: bool,
    pub max_violation: f64,
}

impl IdentityReport {
    fn from_checks(checks: Vec<IdentityCheck>) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        let max_violation = checks
            .iter()
            .map(|c| c.max_abs_violation)
            .fold(0.0, f64::max);
        IdentityReport {
            checks,
            pass,
            max_violation,
        }
    }
}

pub const IDENTITY_TOL: f64 = 1e-10;
pub const DUAL_ROUTE_TOL: f64 = 1e-12;

/// Run every identity check against a synthesized design: pattern closure,
/// the constraint decomposition, the mean decomposition, the
/// counterfactual-mean expansion, dual-route agreement with the optimized
/// G-formula evaluator, the q-decomposition of sequential causal effects,
/// and the terminal-case coincidences.
pub fn run_identity_suite(
    table: &CellTable,
    pattern: &PatternSpec,
    phi: &[f64],
    gamma: &GammaSpec,
    grand_mean: f64,
) -> Result<IdentityReport> {
    run_identity_suite_perturbed(table, pattern, phi, gamma, grand_mean, 0.0)
}

/// Like [`run_identity_suite`], but adds `theta_perturbation` to the first
/// active stratum's point effect before reconstructing the means. A nonzero
/// value breaks the pattern on purpose, verifying that the checks detect
/// violations rather than passing vacuously.
pub fn run_identity_suite_perturbed(
    table: &CellTable,
    pattern: &PatternSpec,
    phi: &[f64],
    gamma: &GammaSpec,
    grand_mean: f64,
    theta_perturbation: f64,
) -> Result<IdentityReport> {
    let (mut means, mut params) =
        synthesize_standard_means(table, pattern, phi, gamma, grand_mean)?;
    if theta_perturbation != 0.0 {
        let victim = table
            .active_full_strata()
            .into_iter()
            .next()
            .ok_or_else(|| Error::InvalidDesign("design has no active strata".into()))?;
        *params
            .theta
            .get_mut(&victim)
            .expect("synthesized theta covers all active strata") += theta_perturbation;
        means = crate::point_params::reconstruct_all_means(&params, table)?;
    }
    let assign = assign_classes(pattern, table)?;
    let ctable = enumerate_counterfactual_means(&means, table)?;

    // brute-force net effects for every observed active stratum
    let mut net: BTreeMap<ThetaKey, f64> = BTreeMap::new();
    for key in table.active_full_strata() {
        net.insert(key.clone(), brute_force_net_effects(&ctable, &key)?);
    }

    let mut checks = Vec::new();

    // every class member's brute-force net effect equals its phi_k
    let mut closure = IdentityCheck::new("pattern_closure", IDENTITY_TOL);
    for (key, value) in &net {
        let class = assign.classify(&StratumRef::Full(key.clone()))?;
        closure.record((value - phi[class - 1]).abs(), || key.to_string());
    }
    checks.push(closure);

    let rows: Vec<CoeffRow> = table
        .active_full_strata()
        .iter()
        .map(|key| constraint_coefficients(table, &assign, key))
        .collect::<Result<Vec<_>>>()?;
    checks.push(verify_constraint(
        &params,
        &net,
        &rows,
        &assign,
        IDENTITY_TOL,
    ));
    checks.push(verify_mean_decomposition(
        &means,
        &net,
        &ctable,
        table,
        IDENTITY_TOL,
    ));
    checks.push(verify_sce_expansion(&net, &ctable, table, IDENTITY_TOL));

    // dual-route agreement: oracle vs the optimized evaluator
    let mut dual = IdentityCheck::new("dual_gformula_agreement", DUAL_ROUTE_TOL);
    for (z, &oracle_value) in &ctable.regime_means {
        let main = evaluate_gformula(&means, table, &crate::gformula::Regime::Static(z.clone()))?;
        dual.record((main - oracle_value).abs(), || format!("regime {z:?}"));
    }
    checks.push(dual);

    // sce decomposition: G-formula contrast vs phi . (q_a - q_b)
    let mut qdec = IdentityCheck::new("sce_q_decomposition", IDENTITY_TOL);
    let regimes = all_static_regimes(table.arity());
    let qs: Vec<Vec<f64>> = regimes
        .iter()
        .map(|r| q_coefficients(table, &assign, r))
        .collect::<Result<Vec<_>>>()?;
    for (i, a) in regimes.iter().enumerate() {
        for (j, b) in regimes.iter().enumerate() {
            let direct = sce_from_gformula(&means, table, a, b)?;
            let via_phi: f64 = phi
                .iter()
                .zip(qs[i].iter().zip(&qs[j]))
                .map(|(p, (qa, qb))| p * (qa - qb))
                .sum();
            qdec.record((direct - via_phi).abs(), || format!("regimes {i} vs {j}"));
        }
    }
    checks.push(qdec);

    // terminal coincidences: theta defined from the means table equals the
    // brute-force net effect bit for bit, and terminal rows are indicators
    let mut terminal = IdentityCheck::new("terminal_cases", 0.0);
    let t_max = table.horizon();
    for key in table.active_full_strata() {
        if key.t != t_max {
            continue;
        }
        let active_cell = CellKey {
            z: {
                let mut z = key.z.clone();
                z.push(key.z_t);
                z
            },
            x: key.x.clone(),
        };
        let control_cell = CellKey {
            z: {
                let mut z = key.z.clone();
                z.push(0);
                z
            },
            x: key.x.clone(),
        };
        let theta_def = means.get(&active_cell)? - means.get(&control_cell)?;
        let phi_brute = net[&key];
        terminal.record((theta_def - phi_brute).abs(), || key.to_string());
    }
    for row in &rows {
        if row.stratum.time() != t_max {
            continue;
        }
        let class = assign.classify(&row.stratum)?;
        for (idx, &c) in row.c.iter().enumerate() {
            let expect = if idx + 1 == class { 1.0 } else { 0.0 };
            terminal.record((c - expect).abs(), || row.stratum.key_string());
        }
    }
    checks.push(terminal);

    Ok(IdentityReport::from_checks(checks))
}
