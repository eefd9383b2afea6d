//! Net-effect patterns, constraint coefficients, and the GLS estimator.
//!
//! A pattern declares that the net (blip) effects of all active treatments
//! take only `K` distinct values, partitioning active-treatment strata into
//! classes `S_1..S_K`. Each point effect then decomposes as
//! `theta(stratum) = sum_k phi_k c_k(stratum)` where the coefficient
//! `c_k` is the class indicator plus, for every later time, the difference
//! between proportions of class-k active treatments in the active versus the
//! control arm of the stratum. Treating the decomposition as a regression of
//! estimated point effects on the coefficient rows yields the net-effect
//! vector by generalized least squares; with one class and diagonal weights
//! this is exactly the inverse-variance average of per-stratum ratios.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::panel::PanelData;
use crate::point_params::{markov_point_effect, point_effect_treatment, ThetaEstimate};
use crate::strata::{CellTable, CovValue, Level, MarkovKey, StratumKey, ThetaKey};

/// How strata (and the point effects regressed on the constraint) are keyed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full treatment/covariate history `(z_1^{t-1}, x_1^{t-1})`.
    Full,
    /// Latest pair `(z_{t-1}, x_{t-1})` only.
    Markov,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Markov => "markov",
        }
    }
}

/// Reference to an active-treatment stratum in either keying.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum StratumRef {
    Full(ThetaKey),
    Markov(MarkovKey),
}

impl StratumRef {
    pub fn time(&self) -> usize {
        match self {
            StratumRef::Full(k) => k.t,
            StratumRef::Markov(k) => k.t,
        }
    }

    pub fn treatment(&self) -> Level {
        match self {
            StratumRef::Full(k) => k.z_t,
            StratumRef::Markov(k) => k.z_t,
        }
    }

    /// The `(z_{t-1}, x_{t-1})` view of the stratum.
    fn markov_features(&self) -> (usize, Option<(Level, CovValue)>, Level) {
        match self {
            StratumRef::Markov(k) => (k.t, k.last.clone(), k.z_t),
            StratumRef::Full(k) => {
                let last = if k.t == 1 {
                    None
                } else {
                    Some((k.z[k.t - 2], k.x[k.t - 2].clone()))
                };
                (k.t, last, k.z_t)
            }
        }
    }

    fn full_features(&self) -> Option<(&[Level], &[CovValue])> {
        match self {
            StratumRef::Full(k) => Some((&k.z, &k.x)),
            StratumRef::Markov(_) => None,
        }
    }

    pub fn key_string(&self) -> String {
        match self {
            StratumRef::Full(k) => k.to_string(),
            StratumRef::Markov(k) => k.to_string(),
        }
    }
}

impl std::fmt::Display for StratumRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.key_string())
    }
}

/// One ordered pattern rule: the first rule whose conditions all hold decides
/// the class of a stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleMatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    /// Active treatment level `z_t`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<Level>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_z: Option<Level>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_x: Option<CovValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_hist: Option<Vec<Level>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_hist: Option<Vec<CovValue>>,
}

impl RuleMatch {
    fn needs_full_history(&self) -> bool {
        self.z_hist.is_some() || self.x_hist.is_some()
    }

    fn matches(&self, stratum: &StratumRef) -> bool {
        let (t, last, z_t) = stratum.markov_features();
        if self.t.is_some_and(|want| want != t) {
            return false;
        }
        if self.z.is_some_and(|want| want != z_t) {
            return false;
        }
        if let Some(want) = self.last_z {
            match &last {
                Some((lz, _)) if *lz == want => {}
                _ => return false,
            }
        }
        if let Some(want) = &self.last_x {
            match &last {
                Some((_, lx)) if lx == want => {}
                _ => return false,
            }
        }
        if self.needs_full_history() {
            let Some((z_hist, x_hist)) = stratum.full_features() else {
                return false;
            };
            if self.z_hist.as_deref().is_some_and(|want| want != z_hist) {
                return false;
            }
            if self.x_hist.as_deref().is_some_and(|want| want != x_hist) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    #[serde(rename = "match")]
    pub matcher: RuleMatch,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shortcut {
    /// Every active treatment shares one net effect (`K = 1`).
    SingleClassAllActive,
    /// One class per treatment time (`K = T`).
    PerTimeClass,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatternKind {
    SingleClassAllActive,
    PerTimeClass,
    Custom { k: usize, rules: Vec<Rule> },
}

/// Declared partition of active-treatment strata into net-effect classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSpec {
    pub mode: Mode,
    pub kind: PatternKind,
}

/// Serialized form: either a shortcut or explicit first-match-wins rules.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternSpecFile {
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    shortcut: Option<Shortcut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rules: Option<Vec<Rule>>,
}

impl Serialize for PatternSpec {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        self.file_repr().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PatternSpec {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let file = PatternSpecFile::deserialize(deserializer)?;
        PatternSpec::from_file(file).map_err(serde::de::Error::custom)
    }
}

impl PatternSpec {
    pub fn single_class(mode: Mode) -> Self {
        PatternSpec {
            mode,
            kind: PatternKind::SingleClassAllActive,
        }
    }

    pub fn per_time(mode: Mode) -> Self {
        PatternSpec {
            mode,
            kind: PatternKind::PerTimeClass,
        }
    }

    pub fn custom(mode: Mode, k: usize, rules: Vec<Rule>) -> Result<Self> {
        let spec = PatternSpec {
            mode,
            kind: PatternKind::Custom { k, rules },
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if let PatternKind::Custom { k, rules } = &self.kind {
            if *k == 0 {
                return Err(Error::InvalidPattern("K must be at least 1".into()));
            }
            if rules.is_empty() {
                return Err(Error::InvalidPattern("rule list is empty".into()));
            }
            for rule in rules {
                if rule.class == 0 || rule.class > *k {
                    return Err(Error::InvalidPattern(format!(
                        "rule class {} outside 1..={k}",
                        rule.class
                    )));
                }
                if self.mode == Mode::Markov && rule.matcher.needs_full_history() {
                    return Err(Error::InvalidPattern(
                        "markov pattern rules cannot condition on full histories".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: PatternSpecFile = serde_json::from_str(json)?;
        PatternSpec::from_file(file)
    }

    fn from_file(file: PatternSpecFile) -> Result<Self> {
        let kind = match (file.shortcut, file.rules) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidPattern(
                    "declare either a shortcut or rules, not both".into(),
                ))
            }
            (Some(Shortcut::SingleClassAllActive), None) => {
                if file.k.is_some_and(|k| k != 1) {
                    return Err(Error::InvalidPattern(
                        "single_class_all_active implies K=1".into(),
                    ));
                }
                PatternKind::SingleClassAllActive
            }
            (Some(Shortcut::PerTimeClass), None) => PatternKind::PerTimeClass,
            (None, Some(rules)) => {
                let k = file.k.ok_or_else(|| {
                    Error::InvalidPattern("explicit rules require the K field".into())
                })?;
                PatternKind::Custom { k, rules }
            }
            (None, None) => {
                return Err(Error::InvalidPattern(
                    "pattern declares neither shortcut nor rules".into(),
                ))
            }
        };
        let spec = PatternSpec {
            mode: file.mode,
            kind,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn file_repr(&self) -> PatternSpecFile {
        match &self.kind {
            PatternKind::SingleClassAllActive => PatternSpecFile {
                k: Some(1),
                mode: self.mode,
                shortcut: Some(Shortcut::SingleClassAllActive),
                rules: None,
            },
            PatternKind::PerTimeClass => PatternSpecFile {
                k: None,
                mode: self.mode,
                shortcut: Some(Shortcut::PerTimeClass),
                rules: None,
            },
            PatternKind::Custom { k, rules } => PatternSpecFile {
                k: Some(*k),
                mode: self.mode,
                shortcut: None,
                rules: Some(rules.clone()),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.file_repr()).expect("pattern serialization cannot fail")
    }

    /// Number of classes; `PerTimeClass` needs the horizon.
    pub fn class_count(&self, horizon: usize) -> usize {
        match &self.kind {
            PatternKind::SingleClassAllActive => 1,
            PatternKind::PerTimeClass => horizon,
            PatternKind::Custom { k, .. } => *k,
        }
    }

    /// Class of an arbitrary active-treatment stratum (not necessarily one
    /// observed in any particular design).
    pub fn classify(&self, stratum: &StratumRef) -> Result<usize> {
        if stratum.treatment() == 0 {
            return Err(Error::UncoveredStratum(format!(
                "{stratum} is a control stratum, not an active one"
            )));
        }
        if self.mode == Mode::Full {
            if let StratumRef::Markov(_) = stratum {
                return Err(Error::PatternModeMismatch {
                    expected: Mode::Full.name(),
                    found: Mode::Markov.name(),
                });
            }
        }
        match &self.kind {
            PatternKind::SingleClassAllActive => Ok(1),
            PatternKind::PerTimeClass => Ok(stratum.time()),
            PatternKind::Custom { rules, .. } => rules
                .iter()
                .find(|r| r.matcher.matches(stratum))
                .map(|r| r.class)
                .ok_or_else(|| Error::UncoveredStratum(stratum.key_string())),
        }
    }
}

/// Validated assignment of every observed active-treatment stratum to its
/// class, with per-class member lists.
#[derive(Debug, Clone)]
pub struct ClassAssignment {
    spec: PatternSpec,
    k: usize,
    map: BTreeMap<StratumRef, usize>,
    members: Vec<Vec<StratumRef>>,
}

impl ClassAssignment {
    pub fn mode(&self) -> Mode {
        self.spec.mode
    }

    pub fn class_count(&self) -> usize {
        self.k
    }

    pub fn assigned(&self) -> &BTreeMap<StratumRef, usize> {
        &self.map
    }

    pub fn members(&self, class: usize) -> &[StratumRef] {
        &self.members[class - 1]
    }

    /// Class index of a stratum; falls back to the pattern rules for strata
    /// not observed in the assignment's design (regimes can reach them).
    pub fn classify(&self, stratum: &StratumRef) -> Result<usize> {
        if let Some(&k) = self.map.get(stratum) {
            return Ok(k);
        }
        self.spec.classify(stratum)
    }
}

/// Partition the observed active-treatment strata of a design.
pub fn assign_classes(spec: &PatternSpec, table: &CellTable) -> Result<ClassAssignment> {
    spec.validate()?;
    let k = spec.class_count(table.horizon());
    if let PatternKind::Custom { k: declared, .. } = &spec.kind {
        if *declared != k {
            return Err(Error::InvalidPattern("inconsistent class count".into()));
        }
    }
    let strata: Vec<StratumRef> = match spec.mode {
        Mode::Full => table
            .active_full_strata()
            .into_iter()
            .map(StratumRef::Full)
            .collect(),
        Mode::Markov => table
            .active_markov_strata()
            .into_iter()
            .map(StratumRef::Markov)
            .collect(),
    };
    let mut map = BTreeMap::new();
    let mut members = vec![Vec::new(); k];
    for stratum in strata {
        let class = spec.classify(&stratum)?;
        if class == 0 || class > k {
            return Err(Error::InvalidPattern(format!(
                "rule assigned class {class} outside 1..={k}"
            )));
        }
        members[class - 1].push(stratum.clone());
        map.insert(stratum, class);
    }
    for (idx, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::EmptyClass(idx + 1));
        }
    }
    Ok(ClassAssignment {
        spec: spec.clone(),
        k,
        map,
        members,
    })
}

/// Coefficient row of the net-effect decomposition for one active stratum.
#[derive(Debug, Clone, Serialize)]
pub struct CoeffRow {
    #[serde(serialize_with = "serialize_stratum_ref")]
    pub stratum: StratumRef,
    pub c: Vec<f64>,
    /// Unit counts of the two arms (meaningful when the table weights are
    /// counts; zero for probability-weighted tables).
    pub n_active: u64,
    pub n_control: u64,
}

fn serialize_stratum_ref<S: serde::Serializer>(
    s: &StratumRef,
    ser: S,
) -> std::result::Result<S::Ok, S::Error> {
    ser.serialize_str(&s.key_string())
}

fn coefficient_row(
    table: &CellTable,
    assign: &ClassAssignment,
    stratum: &StratumRef,
    active_arm: StratumKey,
    control_arm: StratumKey,
    members_at: impl Fn(usize) -> Vec<StratumRef>,
    member_stratum: impl Fn(&StratumRef) -> StratumKey,
) -> Result<CoeffRow> {
    let t = stratum.time();
    let t_max = table.horizon();
    let w_active = table.weight_of(&active_arm);
    if w_active <= 0.0 {
        return Err(Error::EmptyActiveStratum(active_arm.to_string()));
    }
    let w_control = table.weight_of(&control_arm);
    if w_control <= 0.0 {
        return Err(Error::EmptyControlStratum(control_arm.to_string()));
    }
    let own_class = assign.classify(stratum)?;
    let mut c = vec![0.0; assign.class_count()];
    c[own_class - 1] = 1.0;
    for s in (t + 1)..=t_max {
        for member in members_at(s) {
            let class = assign.classify(&member)?;
            let member_key = member_stratum(&member);
            let pr_active = table.joint_weight(&member_key, &active_arm) / w_active;
            let pr_control = table.joint_weight(&member_key, &control_arm) / w_control;
            c[class - 1] += pr_active - pr_control;
        }
    }
    Ok(CoeffRow {
        stratum: stratum.clone(),
        c,
        n_active: w_active.round() as u64,
        n_control: w_control.round() as u64,
    })
}

/// Coefficient row for a full-history stratum. At `t = T` the row is exactly
/// the class indicator.
pub fn constraint_coefficients(
    table: &CellTable,
    assign: &ClassAssignment,
    stratum: &ThetaKey,
) -> Result<CoeffRow> {
    coefficient_row(
        table,
        assign,
        &StratumRef::Full(stratum.clone()),
        stratum.stratum(),
        stratum.with_treatment(0),
        |s| {
            table
                .active_full_strata()
                .into_iter()
                .filter(|m| m.t == s)
                .map(StratumRef::Full)
                .collect()
        },
        |m| match m {
            StratumRef::Full(k) => k.stratum(),
            StratumRef::Markov(k) => k.stratum(),
        },
    )
}

/// Coefficient row for a Markov stratum; requires a Markov-keyed assignment.
pub fn markov_constraint_coefficients(
    table: &CellTable,
    assign: &ClassAssignment,
    stratum: &MarkovKey,
) -> Result<CoeffRow> {
    if assign.mode() != Mode::Markov {
        return Err(Error::PatternModeMismatch {
            expected: Mode::Markov.name(),
            found: assign.mode().name(),
        });
    }
    coefficient_row(
        table,
        assign,
        &StratumRef::Markov(stratum.clone()),
        stratum.stratum(),
        stratum.with_treatment(0),
        |s| {
            table
                .active_markov_strata()
                .into_iter()
                .filter(|m| m.t == s)
                .map(StratumRef::Markov)
                .collect()
        },
        |m| match m {
            StratumRef::Full(k) => k.stratum(),
            StratumRef::Markov(k) => k.stratum(),
        },
    )
}

/// Rows sharing one conditioning stratum (hence one control arm). The
/// covariance of two estimates in a block is `sigma2 / n_control`; blocks at
/// different times or histories are independent.
#[derive(Debug, Clone)]
pub struct ThetaBlock {
    pub rows: Vec<(ThetaEstimate, CoeffRow)>,
    pub shared_control_variance: f64,
}

/// Per-stratum residual of the fitted decomposition.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualRow {
    pub stratum: String,
    pub observed: f64,
    pub fitted: f64,
    pub variance: f64,
}

/// GLS estimate of the net-effect vector.
#[derive(Debug, Clone, Serialize)]
pub struct NetEffectEstimate {
    pub phi: Vec<f64>,
    /// K x K covariance of `phi`.
    pub covariance: Vec<Vec<f64>>,
    pub residuals: Vec<ResidualRow>,
    /// Weighted residual sum of squares of the decomposition fit.
    pub rss: f64,
    /// Usable rows minus K.
    pub dof: usize,
    /// Rows dropped because their coefficient vector was identically zero.
    pub dropped_zero_rows: usize,
}

impl NetEffectEstimate {
    pub fn k(&self) -> usize {
        self.phi.len()
    }

    pub fn variance(&self, class: usize) -> f64 {
        self.covariance[class - 1][class - 1]
    }
}

const RANK_TOLERANCE: f64 = 1e-9;

/// Solve the decomposition by generalized least squares:
/// `phi = (C' W C)^-1 C' W theta` with `W` the blockwise inverse of the
/// point-effect covariance; `cov(phi) = (C' W C)^-1`.
pub fn estimate_net_effects(blocks: &[ThetaBlock], k: usize) -> Result<NetEffectEstimate> {
    let mut kept: Vec<(&ThetaBlock, Vec<usize>)> = Vec::new();
    let mut dropped = 0usize;
    let mut n_rows = 0usize;
    for block in blocks {
        let keep: Vec<usize> = block
            .rows
            .iter()
            .enumerate()
            .filter(|(_, (_, row))| row.c.iter().any(|&v| v != 0.0))
            .map(|(i, _)| i)
            .collect();
        dropped += block.rows.len() - keep.len();
        n_rows += keep.len();
        if !keep.is_empty() {
            kept.push((block, keep));
        }
    }
    if n_rows < k {
        return Err(Error::TooFewRows { rows: n_rows, k });
    }

    let mut normal = Matrix::zeros(k, k);
    let mut rhs = vec![0.0; k];
    let mut weights: Vec<(usize, Matrix)> = Vec::new(); // kept-block index -> W
    for (block, keep) in &kept {
        let m = keep.len();
        let mut cov = Matrix::zeros(m, m);
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                cov[(a, b)] = if i == j {
                    block.rows[i].0.variance
                } else {
                    block.shared_control_variance
                };
            }
        }
        let w = cov
            .invert(RANK_TOLERANCE)
            .map_err(|_| Error::SingularWeightMatrix(block.rows[keep[0]].1.stratum.key_string()))?;
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                let wab = w[(a, b)];
                let (ci, cj) = (&block.rows[i].1.c, &block.rows[j].1.c);
                for p in 0..k {
                    rhs[p] += ci[p] * wab * block.rows[j].0.value;
                    for q in 0..k {
                        normal[(p, q)] += ci[p] * wab * cj[q];
                    }
                }
            }
        }
        weights.push((weights.len(), w));
    }

    let mut covariance = normal
        .invert(RANK_TOLERANCE)
        .map_err(|rank| Error::RankDeficientDesign { rank, k })?;
    covariance.symmetrize();
    let phi = covariance.mul_vec(&rhs);

    // residual report and weighted RSS
    let mut residuals = Vec::new();
    let mut rss = 0.0;
    for ((block, keep), (_, w)) in kept.iter().zip(&weights) {
        let r: Vec<f64> = keep
            .iter()
            .map(|&i| {
                let (est, row) = &block.rows[i];
                let fitted: f64 = row.c.iter().zip(&phi).map(|(c, p)| c * p).sum();
                residuals.push(ResidualRow {
                    stratum: row.stratum.key_string(),
                    observed: est.value,
                    fitted,
                    variance: est.variance,
                });
                est.value - fitted
            })
            .collect();
        rss += w.quad_form(&r);
    }

    Ok(NetEffectEstimate {
        phi,
        covariance: covariance.to_rows(),
        residuals,
        rss,
        dof: n_rows - k,
        dropped_zero_rows: dropped,
    })
}

/// Goodness-of-fit summary of the pattern assumption.
#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostic {
    pub rss: f64,
    pub dof: usize,
    /// Upper-tail probability of a chi-square with `dof` degrees of freedom
    /// exceeding `rss`.
    pub p_value: f64,
}

/// Refer the weighted RSS to its chi-square distribution. Errors with
/// `ZeroDof` for saturated patterns, where the assumption is not testable.
pub fn fitted_residual_test(estimate: &NetEffectEstimate) -> Result<FitDiagnostic> {
    if estimate.dof == 0 {
        return Err(Error::ZeroDof);
    }
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let dist = ChiSquared::new(estimate.dof as f64)
        .map_err(|e| Error::InvalidConfig(format!("chi-square setup: {e}")))?;
    Ok(FitDiagnostic {
        rss: estimate.rss,
        dof: estimate.dof,
        p_value: 1.0 - dist.cdf(estimate.rss),
    })
}

/// How the common outcome variance is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma2Spec {
    Declared(f64),
    /// Pooled within-cell residual variance of the saturated outcome model.
    PooledWithinCell,
}

/// A positivity exclusion: a conditioning stratum skipped because one arm is
/// unobserved.
#[derive(Debug, Clone, Serialize)]
pub struct Exclusion {
    pub stratum: String,
    pub reason: String,
}

/// Complete net-effect fit of a panel under a pattern.
#[derive(Debug)]
pub struct NetEffectFit {
    pub estimate: NetEffectEstimate,
    pub blocks: Vec<ThetaBlock>,
    pub excluded: Vec<Exclusion>,
    pub sigma2: f64,
    pub mode: Mode,
    pub assignment: ClassAssignment,
}

/// Estimate point effects per stratum, attach coefficient rows, and run the
/// GLS regression. Strata without a control (or any active) arm are skipped
/// and reported, not imputed.
pub fn fit_net_effects(
    panel: &PanelData,
    pattern: &PatternSpec,
    mode: Mode,
    sigma2: Sigma2Spec,
) -> Result<NetEffectFit> {
    if mode == Mode::Markov && pattern.mode != Mode::Markov {
        return Err(Error::PatternModeMismatch {
            expected: Mode::Markov.name(),
            found: pattern.mode.name(),
        });
    }
    let sigma2 = match sigma2 {
        Sigma2Spec::Declared(v) => {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "declared outcome variance must be positive, got {v}"
                )));
            }
            v
        }
        Sigma2Spec::PooledWithinCell => panel.pooled_within_cell_variance()?,
    };
    let table = panel.table();
    let assign = assign_classes(pattern, table)?;
    let mut blocks = Vec::new();
    let mut excluded = Vec::new();

    match mode {
        Mode::Full => {
            for t in 1..=table.horizon() {
                for (z, x) in table.full_histories(t) {
                    let hist = StratumKey::FullHistory {
                        t,
                        z: z.clone(),
                        x: x.clone(),
                    };
                    let levels = table.observed_treatments(t, &hist);
                    let actives: Vec<Level> = levels.iter().copied().filter(|&v| v > 0).collect();
                    if actives.is_empty() {
                        continue;
                    }
                    if !levels.contains(&0) {
                        excluded.push(Exclusion {
                            stratum: hist.to_string(),
                            reason: "no control units (positivity failure)".into(),
                        });
                        continue;
                    }
                    let mut rows = Vec::new();
                    let mut n_control = 0u64;
                    for z_t in actives {
                        let key = ThetaKey {
                            t,
                            z: z.clone(),
                            x: x.clone(),
                            z_t,
                        };
                        let est = point_effect_treatment(panel, &key, sigma2)?;
                        n_control = est.n_control;
                        let row = constraint_coefficients(table, &assign, &key)?;
                        rows.push((est, row));
                    }
                    blocks.push(ThetaBlock {
                        rows,
                        shared_control_variance: sigma2 / n_control as f64,
                    });
                }
            }
        }
        Mode::Markov => {
            for t in 1..=table.horizon() {
                for last in table.markov_pairs(t) {
                    let hist = StratumKey::Markov {
                        t,
                        last: last.clone(),
                    };
                    let levels = table.observed_treatments(t, &hist);
                    let actives: Vec<Level> = levels.iter().copied().filter(|&v| v > 0).collect();
                    if actives.is_empty() {
                        continue;
                    }
                    if !levels.contains(&0) {
                        excluded.push(Exclusion {
                            stratum: hist.to_string(),
                            reason: "no control units (positivity failure)".into(),
                        });
                        continue;
                    }
                    let mut rows = Vec::new();
                    let mut n_control = 0u64;
                    for z_t in actives {
                        let key = MarkovKey {
                            t,
                            last: last.clone(),
                            z_t,
                        };
                        let est = markov_point_effect(panel, &key, sigma2)?;
                        n_control = est.n_control;
                        let row = markov_constraint_coefficients(table, &assign, &key)?;
                        rows.push((est, row));
                    }
                    blocks.push(ThetaBlock {
                        rows,
                        shared_control_variance: sigma2 / n_control as f64,
                    });
                }
            }
        }
    }

    let estimate = estimate_net_effects(&blocks, assign.class_count())?;
    Ok(NetEffectFit {
        estimate,
        blocks,
        excluded,
        sigma2,
        mode,
        assignment: assign,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::load_panel;
    use crate::strata::{ArityTable, CellKey};

    fn simple_estimate(value: f64, variance: f64, c: Vec<f64>) -> (ThetaEstimate, CoeffRow) {
        let key = ThetaKey {
            t: 1,
            z: vec![],
            x: vec![],
            z_t: 1,
        };
        (
            ThetaEstimate {
                value,
                variance,
                stratum: key.stratum(),
                n_active: 1,
                n_control: 1,
            },
            CoeffRow {
                stratum: StratumRef::Full(key),
                c,
                n_active: 1,
                n_control: 1,
            },
        )
    }

    fn diagonal_blocks(rows: Vec<(ThetaEstimate, CoeffRow)>) -> Vec<ThetaBlock> {
        rows.into_iter()
            .map(|r| ThetaBlock {
                rows: vec![r],
                shared_control_variance: 0.0,
            })
            .collect()
    }

    #[test]
    fn spec_pattern_json_parses() {
        let spec = PatternSpec::from_json(
            r#"{"K":2,"mode":"markov","rules":[{"match":{"t":1,"z":1},"class":1},{"match":{"t":2,"z":1},"class":2}]}"#,
        )
        .unwrap();
        assert_eq!(spec.mode, Mode::Markov);
        match &spec.kind {
            PatternKind::Custom { k, rules } => {
                assert_eq!(*k, 2);
                assert_eq!(rules.len(), 2);
            }
            other => panic!("unexpected kind {other:?}"),
        }
    }

    #[test]
    fn unknown_pattern_keys_are_rejected() {
        assert!(PatternSpec::from_json(r#"{"K":1,"mode":"full","bogus":3}"#).is_err());
        assert!(PatternSpec::from_json(
            r#"{"K":1,"mode":"full","rules":[{"match":{"wat":1},"class":1}]}"#
        )
        .is_err());
    }

    fn micro_panel() -> PanelData {
        let csv = "\
unit_id,z1,x1_1,z2,y
1,0,0,0,1.0
2,0,0,1,3.0
3,0,1,0,2.0
4,0,1,1,2.0
5,1,0,0,0.0
6,1,0,1,4.0
7,1,1,0,2.0
8,1,1,1,2.0
";
        load_panel(csv.as_bytes()).unwrap()
    }

    #[test]
    fn single_class_covers_all_active_strata() {
        let p = micro_panel();
        let assign = assign_classes(&PatternSpec::single_class(Mode::Markov), p.table()).unwrap();
        assert_eq!(assign.class_count(), 1);
        // t=1: (z1=1); t=2: 4 markov pairs with z2=1
        assert_eq!(assign.members(1).len(), 5);
    }

    #[test]
    fn per_time_pattern_replicates_two_classes() {
        let p = micro_panel();
        let assign = assign_classes(&PatternSpec::per_time(Mode::Full), p.table()).unwrap();
        assert_eq!(assign.class_count(), 2);
        assert!(assign.members(1).iter().all(|s| s.time() == 1));
        assert!(assign.members(2).iter().all(|s| s.time() == 2));
    }

    #[test]
    fn missing_rule_coverage_is_reported() {
        let p = micro_panel();
        let spec = PatternSpec::custom(
            Mode::Full,
            1,
            vec![Rule {
                matcher: RuleMatch {
                    t: Some(1),
                    z: None,
                    last_z: None,
                    last_x: None,
                    z_hist: None,
                    x_hist: None,
                },
                class: 1,
            }],
        )
        .unwrap();
        assert!(matches!(
            assign_classes(&spec, p.table()),
            Err(Error::UncoveredStratum(_))
        ));
    }

    #[test]
    fn empty_class_is_reported() {
        let p = micro_panel();
        let spec = PatternSpec::custom(
            Mode::Full,
            2,
            vec![Rule {
                matcher: RuleMatch {
                    t: None,
                    z: None,
                    last_z: None,
                    last_x: None,
                    z_hist: None,
                    x_hist: None,
                },
                class: 1,
            }],
        )
        .unwrap();
        assert!(matches!(
            assign_classes(&spec, p.table()),
            Err(Error::EmptyClass(2))
        ));
    }

    #[test]
    fn terminal_rows_are_exact_basis_vectors() {
        let p = micro_panel();
        let assign = assign_classes(&PatternSpec::per_time(Mode::Full), p.table()).unwrap();
        for key in p.table().active_full_strata() {
            if key.t == 2 {
                let row = constraint_coefficients(p.table(), &assign, &key).unwrap();
                assert_eq!(row.c, vec![0.0, 1.0]);
            }
        }
        let massign = assign_classes(&PatternSpec::per_time(Mode::Markov), p.table()).unwrap();
        for key in p.table().active_markov_strata() {
            if key.t == 2 {
                let row = markov_constraint_coefficients(p.table(), &massign, &key).unwrap();
                assert_eq!(row.c, vec![0.0, 1.0]);
            }
        }
    }

    #[test]
    fn cancelling_proportions_give_unit_coefficient() {
        // in the micro panel pr(z2=1 | z1=1) = pr(z2=1 | z1=0) = 1/2,
        // so the single-class coefficient at t=1 is exactly 1.
        let p = micro_panel();
        let assign = assign_classes(&PatternSpec::single_class(Mode::Markov), p.table()).unwrap();
        let key = MarkovKey {
            t: 1,
            last: None,
            z_t: 1,
        };
        let row = markov_constraint_coefficients(p.table(), &assign, &key).unwrap();
        assert_eq!(row.c, vec![1.0]);
        assert_eq!((row.n_active, row.n_control), (4, 4));
    }

    #[test]
    fn uptake_shift_gives_coefficient_1_2() {
        // T=2 panel where pr(z2=1 | z1=1) - pr(z2=1 | z1=0) = 0.2
        let csv = "\
unit_id,z1,x1_1,z2,y
1,0,0,0,0.0
2,0,0,0,0.0
3,0,0,0,0.0
4,0,0,1,0.0
5,0,0,1,0.0
6,1,0,0,0.0
7,1,0,0,0.0
8,1,0,1,0.0
9,1,0,1,0.0
10,1,0,1,0.0
";
        let p = load_panel(csv.as_bytes()).unwrap();
        let assign = assign_classes(&PatternSpec::single_class(Mode::Markov), p.table()).unwrap();
        let key = MarkovKey {
            t: 1,
            last: None,
            z_t: 1,
        };
        let row = markov_constraint_coefficients(p.table(), &assign, &key).unwrap();
        assert!((row.c[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn markov_rows_need_markov_assignment() {
        let p = micro_panel();
        let assign = assign_classes(&PatternSpec::single_class(Mode::Full), p.table()).unwrap();
        let key = MarkovKey {
            t: 2,
            last: Some((0, vec![0])),
            z_t: 1,
        };
        assert!(matches!(
            markov_constraint_coefficients(p.table(), &assign, &key),
            Err(Error::PatternModeMismatch { .. })
        ));
    }

    #[test]
    fn gls_equal_rows_average() {
        let rows = vec![
            simple_estimate(2.0, 1.0, vec![1.0]),
            simple_estimate(2.0, 1.0, vec![1.0]),
        ];
        let est = estimate_net_effects(&diagonal_blocks(rows), 1).unwrap();
        assert_eq!(est.phi, vec![2.0]);
        assert_eq!(est.covariance[0][0], 0.5);
        assert_eq!(est.dof, 1);
        assert!(est.rss.abs() < 1e-15);
    }

    #[test]
    fn gls_hand_computation_consistent_rows() {
        // theta = phi * c with phi = 2: rows (2.4, c=1.2) and (2.0, c=1.0)
        let rows = vec![
            simple_estimate(2.4, 1.0, vec![1.2]),
            simple_estimate(2.0, 1.0, vec![1.0]),
        ];
        let est = estimate_net_effects(&diagonal_blocks(rows), 1).unwrap();
        // (2.4*1.2 + 2.0*1.0) / (1.44 + 1.0) = 4.88 / 2.44 = 2 exactly
        assert!((est.phi[0] - 2.0).abs() < 1e-15);
        assert!(est.rss < 1e-15);
    }

    /// The inverse-variance average of per-stratum ratios, the K=1 special
    /// case written out directly.
    fn inverse_variance_average(rows: &[(f64, f64, f64)]) -> (f64, f64) {
        let mut num = 0.0;
        let mut den = 0.0;
        for &(theta, c, var) in rows {
            let phi_s = theta / c;
            let var_s = var / (c * c);
            num += phi_s / var_s;
            den += 1.0 / var_s;
        }
        (num / den, 1.0 / den)
    }

    #[test]
    fn gls_reduces_to_inverse_variance_average() {
        let raw = [
            (2.4, 1.2, 0.5),
            (1.9, 0.9, 1.25),
            (2.2, 1.05, 2.0),
            (-0.3, 0.4, 0.8),
        ];
        let rows: Vec<_> = raw
            .iter()
            .map(|&(th, c, v)| simple_estimate(th, v, vec![c]))
            .collect();
        let est = estimate_net_effects(&diagonal_blocks(rows), 1).unwrap();
        let (phi, var) = inverse_variance_average(&raw);
        assert!((est.phi[0] - phi).abs() < 1e-12);
        assert!((est.covariance[0][0] - var).abs() < 1e-12);
    }

    #[test]
    fn scale_equivariance() {
        let raw = [(2.4, 1.2, 0.5), (1.9, 0.9, 1.25), (2.2, 1.05, 2.0)];
        let rows: Vec<_> = raw
            .iter()
            .map(|&(th, c, v)| simple_estimate(th, v, vec![c]))
            .collect();
        let scaled: Vec<_> = raw
            .iter()
            .map(|&(th, c, v)| simple_estimate(3.0 * th, v, vec![c]))
            .collect();
        let a = estimate_net_effects(&diagonal_blocks(rows), 1).unwrap();
        let b = estimate_net_effects(&diagonal_blocks(scaled), 1).unwrap();
        assert!((b.phi[0] - 3.0 * a.phi[0]).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_detected() {
        // two classes but all rows load only class 1
        let rows = vec![
            simple_estimate(2.0, 1.0, vec![1.0, 0.0]),
            simple_estimate(2.0, 1.0, vec![2.0, 0.0]),
        ];
        assert!(matches!(
            estimate_net_effects(&diagonal_blocks(rows), 2),
            Err(Error::RankDeficientDesign { .. })
        ));
    }

    #[test]
    fn too_few_rows_detected() {
        let rows = vec![simple_estimate(2.0, 1.0, vec![1.0, 0.5])];
        assert!(matches!(
            estimate_net_effects(&diagonal_blocks(rows), 2),
            Err(Error::TooFewRows { rows: 1, k: 2 })
        ));
    }

    #[test]
    fn zero_rows_are_dropped() {
        let rows = vec![
            simple_estimate(2.0, 1.0, vec![1.0]),
            simple_estimate(99.0, 1.0, vec![0.0]),
        ];
        let est = estimate_net_effects(&diagonal_blocks(rows), 1).unwrap();
        assert_eq!(est.dropped_zero_rows, 1);
        assert_eq!(est.phi, vec![2.0]);
    }

    #[test]
    fn residual_test_zero_dof() {
        let rows = vec![simple_estimate(2.0, 1.0, vec![1.0])];
        let est = estimate_net_effects(&diagonal_blocks(rows), 1).unwrap();
        assert!(matches!(fitted_residual_test(&est), Err(Error::ZeroDof)));
    }

    #[test]
    fn residual_test_reports_chi_square_reference() {
        let rows = vec![
            simple_estimate(2.0, 1.0, vec![1.0]),
            simple_estimate(2.0, 1.0, vec![1.0]),
            simple_estimate(4.0, 1.0, vec![1.0]),
        ];
        let est = estimate_net_effects(&diagonal_blocks(rows), 1).unwrap();
        let diag = fitted_residual_test(&est).unwrap();
        assert_eq!(diag.dof, 2);
        assert!(diag.rss > 0.0);
        assert!(diag.p_value > 0.0 && diag.p_value < 1.0);
    }

    #[test]
    fn shared_control_block_matches_direct_gls() {
        // Three-level treatment at T=1: strata z=1, z=2 share the control
        // arm. Build the 2x2 covariance by hand and compare with a direct
        // dense GLS solve.
        let arity = ArityTable {
            z_levels: vec![3],
            x_levels: vec![],
        };
        let mut entries = std::collections::BTreeMap::new();
        entries.insert(
            CellKey {
                z: vec![0],
                x: vec![],
            },
            4.0,
        );
        entries.insert(
            CellKey {
                z: vec![1],
                x: vec![],
            },
            2.0,
        );
        entries.insert(
            CellKey {
                z: vec![2],
                x: vec![],
            },
            2.0,
        );
        let _table = CellTable::new(arity, entries).unwrap();

        let k1 = ThetaKey {
            t: 1,
            z: vec![],
            x: vec![],
            z_t: 1,
        };
        let k2 = ThetaKey {
            t: 1,
            z: vec![],
            x: vec![],
            z_t: 2,
        };
        let sigma2 = 1.0;
        let block = ThetaBlock {
            rows: vec![
                (
                    ThetaEstimate {
                        value: 1.0,
                        variance: sigma2 / 2.0 + sigma2 / 4.0,
                        stratum: k1.stratum(),
                        n_active: 2,
                        n_control: 4,
                    },
                    CoeffRow {
                        stratum: StratumRef::Full(k1),
                        c: vec![1.0],
                        n_active: 2,
                        n_control: 4,
                    },
                ),
                (
                    ThetaEstimate {
                        value: 3.0,
                        variance: sigma2 / 2.0 + sigma2 / 4.0,
                        stratum: k2.stratum(),
                        n_active: 2,
                        n_control: 4,
                    },
                    CoeffRow {
                        stratum: StratumRef::Full(k2),
                        c: vec![2.0],
                        n_active: 2,
                        n_control: 4,
                    },
                ),
            ],
            shared_control_variance: sigma2 / 4.0,
        };
        let est = estimate_net_effects(&[block], 1).unwrap();

        // direct dense computation: cov = [[.75,.25],[.25,.75]]
        let cov = Matrix::from_rows(&[vec![0.75, 0.25], vec![0.25, 0.75]]);
        let w = cov.invert(1e-12).unwrap();
        let c = [1.0, 2.0];
        let th = [1.0, 3.0];
        let mut ctwc = 0.0;
        let mut ctwt = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                ctwc += c[i] * w[(i, j)] * c[j];
                ctwt += c[i] * w[(i, j)] * th[j];
            }
        }
        assert!((est.phi[0] - ctwt / ctwc).abs() < 1e-14);
        assert!((est.covariance[0][0] - 1.0 / ctwc).abs() < 1e-14);
    }

    #[test]
    fn markov_estimation_requires_markov_pattern() {
        let p = micro_panel();
        let res = fit_net_effects(
            &p,
            &PatternSpec::single_class(Mode::Full),
            Mode::Markov,
            Sigma2Spec::Declared(1.0),
        );
        assert!(matches!(res, Err(Error::PatternModeMismatch { .. })));
    }

    #[test]
    fn fit_on_micro_panel_runs_end_to_end() {
        let p = micro_panel();
        let fit = fit_net_effects(
            &p,
            &PatternSpec::single_class(Mode::Markov),
            Mode::Markov,
            Sigma2Spec::Declared(1.0),
        )
        .unwrap();
        assert_eq!(fit.estimate.k(), 1);
        assert_eq!(fit.estimate.dof, 4); // 5 rows - 1 class
        assert!(fit.excluded.is_empty());
    }
}
