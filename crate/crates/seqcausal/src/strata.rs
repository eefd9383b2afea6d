//! Stratum keys and cell tables.
//!
//! A *cell* is a complete assignment `(z_1..z_T, x_1..x_{T-1})` of treatments
//! and covariate vectors. A *stratum* is the set of units whose history
//! matches a prefix (or, under Markov conditioning, the latest pair) of that
//! assignment. Every proportion used anywhere in the crate reduces to a ratio
//! of cell-weight sums, so the [`CellTable`] — cells in canonical order with
//! nonnegative weights — is the single proportion source shared by observed
//! panels (integer counts) and synthetic designs (exact probabilities).
//!
//! Canonical key strings use the grammar
//! `t=<t>|z=<v,..>|x=<c,..;c,..>[|zt=<v>][|xt=<c,..>]` where treatment
//! histories are comma-joined, covariate times are semicolon-joined and
//! covariate components comma-joined; full cells drop the `t=` segment.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Discrete level of a treatment or of one covariate component.
pub type Level = u32;

/// Value of the covariate vector at one time (atomic for stratification).
pub type CovValue = Vec<Level>;

/// Number of levels per treatment time and per covariate component.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ArityTable {
    /// `z_levels[t-1]` = number of levels of `z_t` (levels `0..n`).
    pub z_levels: Vec<Level>,
    /// `x_levels[t-1][j]` = number of levels of component `j` of `x_t`.
    pub x_levels: Vec<Vec<Level>>,
}

impl ArityTable {
    pub fn horizon(&self) -> usize {
        self.z_levels.len()
    }

    /// All values of the covariate vector at time `t` (1-based), in
    /// lexicographic component order.
    pub fn covariate_support(&self, t: usize) -> Vec<CovValue> {
        let dims = &self.x_levels[t - 1];
        let mut values = vec![Vec::new()];
        for &levels in dims {
            let mut next = Vec::with_capacity(values.len() * levels as usize);
            for prefix in &values {
                for v in 0..levels {
                    let mut w = prefix.clone();
                    w.push(v);
                    next.push(w);
                }
            }
            values = next;
        }
        values
    }

    /// All treatment levels at time `t` (1-based).
    pub fn treatment_support(&self, t: usize) -> Vec<Level> {
        (0..self.z_levels[t - 1]).collect()
    }

    fn validate_cell(&self, cell: &CellKey) -> bool {
        cell.z.len() == self.horizon()
            && cell.x.len() + 1 == self.horizon().max(1)
            && cell.z.iter().zip(&self.z_levels).all(|(v, n)| v < n)
            && cell
                .x
                .iter()
                .zip(&self.x_levels)
                .all(|(xs, dims)| xs.len() == dims.len() && xs.iter().zip(dims).all(|(v, n)| v < n))
    }
}

/// Complete treatment/covariate assignment for one unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellKey {
    pub z: Vec<Level>,
    pub x: Vec<CovValue>,
}

impl CellKey {
    /// Interleave in temporal order `z_1, x_1, z_2, x_2, .., z_T` so that the
    /// derived ordering is time-major.
    fn temporal(&self) -> Vec<&[Level]> {
        let mut seq: Vec<&[Level]> = Vec::with_capacity(2 * self.z.len());
        for t in 0..self.z.len() {
            seq.push(std::slice::from_ref(&self.z[t]));
            if t < self.x.len() {
                seq.push(&self.x[t]);
            }
        }
        seq
    }
}

impl Ord for CellKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.temporal().cmp(&other.temporal())
    }
}

impl PartialOrd for CellKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn join_levels(vals: &[Level]) -> String {
    vals.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn join_cov_history(hist: &[CovValue]) -> String {
    hist.iter()
        .map(|xs| join_levels(xs))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_levels(s: &str) -> Result<Vec<Level>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.parse::<Level>()
                .map_err(|_| Error::MalformedKey(s.into()))
        })
        .collect()
}

fn parse_cov_history(s: &str) -> Result<Vec<CovValue>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(parse_levels).collect()
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "z={}|x={}",
            join_levels(&self.z),
            join_cov_history(&self.x)
        )
    }
}

impl CellKey {
    pub fn parse(s: &str) -> Result<Self> {
        let mut z = None;
        let mut x = None;
        for seg in s.split('|') {
            if let Some(rest) = seg.strip_prefix("z=") {
                z = Some(parse_levels(rest)?);
            } else if let Some(rest) = seg.strip_prefix("x=") {
                x = Some(parse_cov_history(rest)?);
            } else {
                return Err(Error::MalformedKey(s.into()));
            }
        }
        match (z, x) {
            (Some(z), Some(x)) => Ok(CellKey { z, x }),
            _ => Err(Error::MalformedKey(s.into())),
        }
    }
}

/// Identifies the point effect of treatment `z_t > 0` on the stratum with
/// full history `(z_1^{t-1}, x_1^{t-1})`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ThetaKey {
    pub t: usize,
    pub z: Vec<Level>,
    pub x: Vec<CovValue>,
    pub z_t: Level,
}

impl fmt::Display for ThetaKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={}|z={}|x={}|zt={}",
            self.t,
            join_levels(&self.z),
            join_cov_history(&self.x),
            self.z_t
        )
    }
}

impl ThetaKey {
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = None;
        let mut z = None;
        let mut x = None;
        let mut z_t = None;
        for seg in s.split('|') {
            if let Some(rest) = seg.strip_prefix("t=") {
                t = rest.parse::<usize>().ok();
            } else if let Some(rest) = seg.strip_prefix("zt=") {
                z_t = rest.parse::<Level>().ok();
            } else if let Some(rest) = seg.strip_prefix("z=") {
                z = Some(parse_levels(rest)?);
            } else if let Some(rest) = seg.strip_prefix("x=") {
                x = Some(parse_cov_history(rest)?);
            } else {
                return Err(Error::MalformedKey(s.into()));
            }
        }
        match (t, z, x, z_t) {
            (Some(t), Some(z), Some(x), Some(z_t)) => Ok(ThetaKey { t, z, x, z_t }),
            _ => Err(Error::MalformedKey(s.into())),
        }
    }

    pub fn history(&self) -> StratumKey {
        StratumKey::FullHistory {
            t: self.t,
            z: self.z.clone(),
            x: self.x.clone(),
        }
    }

    pub fn with_treatment(&self, z_t: Level) -> StratumKey {
        StratumKey::FullHistoryTreated {
            t: self.t,
            z: self.z.clone(),
            x: self.x.clone(),
            z_t,
        }
    }

    pub fn stratum(&self) -> StratumKey {
        self.with_treatment(self.z_t)
    }
}

/// Identifies the point effect of covariate `x_t != 0` on the stratum
/// `(z_1^t, x_1^{t-1})`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GammaKey {
    pub t: usize,
    pub z: Vec<Level>,
    pub x: Vec<CovValue>,
    pub x_t: CovValue,
}

impl fmt::Display for GammaKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={}|z={}|x={}|xt={}",
            self.t,
            join_levels(&self.z),
            join_cov_history(&self.x),
            join_levels(&self.x_t)
        )
    }
}

impl GammaKey {
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = None;
        let mut z = None;
        let mut x = None;
        let mut x_t = None;
        for seg in s.split('|') {
            if let Some(rest) = seg.strip_prefix("t=") {
                t = rest.parse::<usize>().ok();
            } else if let Some(rest) = seg.strip_prefix("xt=") {
                x_t = Some(parse_levels(rest)?);
            } else if let Some(rest) = seg.strip_prefix("z=") {
                z = Some(parse_levels(rest)?);
            } else if let Some(rest) = seg.strip_prefix("x=") {
                x = Some(parse_cov_history(rest)?);
            } else {
                return Err(Error::MalformedKey(s.into()));
            }
        }
        match (t, z, x, x_t) {
            (Some(t), Some(z), Some(x), Some(x_t)) => Ok(GammaKey { t, z, x, x_t }),
            _ => Err(Error::MalformedKey(s.into())),
        }
    }

    /// Conditioning stratum `(z_1^t, x_1^{t-1})`.
    pub fn prefix(&self) -> StratumKey {
        StratumKey::FullHistoryTreated {
            t: self.t,
            z: self.z[..self.t - 1].to_vec(),
            x: self.x.clone(),
            z_t: self.z[self.t - 1],
        }
    }

    /// Stratum `(z_1^t, x_1^{t-1}, x_t = v)`, i.e. the full history at `t+1`.
    pub fn with_covariate(&self, x_t: &CovValue) -> StratumKey {
        let mut x = self.x.clone();
        x.push(x_t.clone());
        StratumKey::FullHistory {
            t: self.t + 1,
            z: self.z.clone(),
            x,
        }
    }
}

/// Identifies the collapsed point effect of `z_t > 0` on a stratum defined by
/// the latest pair `(z_{t-1}, x_{t-1})` only. At `t = 1` the pair is empty.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MarkovKey {
    pub t: usize,
    pub last: Option<(Level, CovValue)>,
    pub z_t: Level,
}

impl fmt::Display for MarkovKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.last {
            Some((z, x)) => write!(
                f,
                "t={}|last_z={}|last_x={}|zt={}",
                self.t,
                z,
                join_levels(x),
                self.z_t
            ),
            None => write!(f, "t={}|last_z=|last_x=|zt={}", self.t, self.z_t),
        }
    }
}

impl MarkovKey {
    pub fn history(&self) -> StratumKey {
        StratumKey::Markov {
            t: self.t,
            last: self.last.clone(),
        }
    }

    pub fn with_treatment(&self, z_t: Level) -> StratumKey {
        StratumKey::MarkovTreated {
            t: self.t,
            last: self.last.clone(),
            z_t,
        }
    }

    pub fn stratum(&self) -> StratumKey {
        self.with_treatment(self.z_t)
    }
}

/// A stratum: the set of cells (hence units) matching a history condition.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StratumKey {
    /// Units with `(z_1^{t-1}, x_1^{t-1})` equal to the given history.
    /// At `t = 1` the history is empty and every unit matches.
    FullHistory {
        t: usize,
        z: Vec<Level>,
        x: Vec<CovValue>,
    },
    /// `FullHistory` further restricted to `z_t`.
    FullHistoryTreated {
        t: usize,
        z: Vec<Level>,
        x: Vec<CovValue>,
        z_t: Level,
    },
    /// Units with the given `(z_{t-1}, x_{t-1})`; empty pair at `t = 1`.
    Markov {
        t: usize,
        last: Option<(Level, CovValue)>,
    },
    /// `Markov` further restricted to `z_t`.
    MarkovTreated {
        t: usize,
        last: Option<(Level, CovValue)>,
        z_t: Level,
    },
    /// A single cell `(z_1^T, x_1^{T-1})`.
    FullCell(CellKey),
}

impl StratumKey {
    /// Whether a cell belongs to the stratum.
    pub fn matches(&self, cell: &CellKey) -> bool {
        match self {
            StratumKey::FullHistory { t, z, x } => {
                cell.z[..t - 1] == z[..] && cell.x[..t - 1] == x[..]
            }
            StratumKey::FullHistoryTreated { t, z, x, z_t } => {
                cell.z[..t - 1] == z[..] && cell.x[..t - 1] == x[..] && cell.z[t - 1] == *z_t
            }
            StratumKey::Markov { t, last } => match last {
                None => true,
                Some((z, x)) => cell.z[t - 2] == *z && cell.x[t - 2] == *x,
            },
            StratumKey::MarkovTreated { t, last, z_t } => {
                let last_ok = match last {
                    None => true,
                    Some((z, x)) => cell.z[t - 2] == *z && cell.x[t - 2] == *x,
                };
                last_ok && cell.z[t - 1] == *z_t
            }
            StratumKey::FullCell(key) => cell == key,
        }
    }

    /// Time index the key refers to (`T` for full cells of horizon `T`).
    pub fn time(&self) -> usize {
        match self {
            StratumKey::FullHistory { t, .. }
            | StratumKey::FullHistoryTreated { t, .. }
            | StratumKey::Markov { t, .. }
            | StratumKey::MarkovTreated { t, .. } => *t,
            StratumKey::FullCell(cell) => cell.z.len(),
        }
    }
}

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StratumKey::FullHistory { t, z, x } => {
                write!(f, "t={}|z={}|x={}", t, join_levels(z), join_cov_history(x))
            }
            StratumKey::FullHistoryTreated { t, z, x, z_t } => write!(
                f,
                "t={}|z={}|x={}|zt={}",
                t,
                join_levels(z),
                join_cov_history(x),
                z_t
            ),
            StratumKey::Markov { t, last } => match last {
                Some((z, x)) => write!(f, "t={}|last_z={}|last_x={}", t, z, join_levels(x)),
                None => write!(f, "t={}|last_z=|last_x=", t),
            },
            StratumKey::MarkovTreated { t, last, z_t } => match last {
                Some((z, x)) => write!(
                    f,
                    "t={}|last_z={}|last_x={}|zt={}",
                    t,
                    z,
                    join_levels(x),
                    z_t
                ),
                None => write!(f, "t={}|last_z=|last_x=|zt={}", t, z_t),
            },
            StratumKey::FullCell(cell) => write!(f, "{cell}"),
        }
    }
}

/// Cells of a design in canonical (time-major lexicographic) order, each with
/// a nonnegative weight: integer counts for observed panels, exact joint
/// probabilities for synthetic designs. Zero-weight cells are not stored.
#[derive(Debug, Clone)]
pub struct CellTable {
    arity: ArityTable,
    cells: Vec<CellKey>,
    weights: Vec<f64>,
}

impl CellTable {
    pub fn new(arity: ArityTable, entries: BTreeMap<CellKey, f64>) -> Result<Self> {
        let mut cells = Vec::with_capacity(entries.len());
        let mut weights = Vec::with_capacity(entries.len());
        for (cell, w) in entries {
            if !arity.validate_cell(&cell) {
                return Err(Error::InvalidDesign(format!(
                    "cell {cell} is inconsistent with the declared arity"
                )));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidDesign(format!(
                    "cell {cell} has invalid weight {w}"
                )));
            }
            if w > 0.0 {
                cells.push(cell);
                weights.push(w);
            }
        }
        if cells.is_empty() {
            return Err(Error::EmptyPanel);
        }
        Ok(CellTable {
            arity,
            cells,
            weights,
        })
    }

    pub fn arity(&self) -> &ArityTable {
        &self.arity
    }

    pub fn horizon(&self) -> usize {
        self.arity.horizon()
    }

    pub fn cells(&self) -> &[CellKey] {
        &self.cells
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Total weight of cells in the stratum.
    pub fn weight_of(&self, key: &StratumKey) -> f64 {
        self.cells
            .iter()
            .zip(&self.weights)
            .filter(|(c, _)| key.matches(c))
            .map(|(_, w)| w)
            .sum()
    }

    /// Total weight of cells in the intersection of two strata.
    pub fn joint_weight(&self, a: &StratumKey, b: &StratumKey) -> f64 {
        self.cells
            .iter()
            .zip(&self.weights)
            .filter(|(c, _)| a.matches(c) && b.matches(c))
            .map(|(_, w)| w)
            .sum()
    }

    /// Conditional proportion `pr(event | given)` = weight(event ∩ given) /
    /// weight(given). When `event` refines `given` this is the plain stratum
    /// ratio.
    pub fn proportion(&self, event: &StratumKey, given: &StratumKey) -> Result<f64> {
        let denom = self.weight_of(given);
        if denom <= 0.0 {
            return Err(Error::EmptyConditioningStratum(given.to_string()));
        }
        Ok(self.joint_weight(event, given) / denom)
    }

    /// Marginal proportion of a stratum.
    pub fn marginal(&self, key: &StratumKey) -> f64 {
        self.weight_of(key) / self.total_weight()
    }

    /// Distinct full histories `(z_1^{t-1}, x_1^{t-1})` with positive weight,
    /// in canonical order.
    pub fn full_histories(&self, t: usize) -> Vec<(Vec<Level>, Vec<CovValue>)> {
        let mut seen = BTreeMap::new();
        for cell in &self.cells {
            let hist = (cell.z[..t - 1].to_vec(), cell.x[..t - 1].to_vec());
            seen.entry(hist).or_insert(());
        }
        seen.into_keys().collect()
    }

    /// Distinct `(z_{t-1}, x_{t-1})` pairs with positive weight; `[None]` at
    /// `t = 1`.
    pub fn markov_pairs(&self, t: usize) -> Vec<Option<(Level, CovValue)>> {
        if t == 1 {
            return vec![None];
        }
        let mut seen = BTreeMap::new();
        for cell in &self.cells {
            seen.entry((cell.z[t - 2], cell.x[t - 2].clone()))
                .or_insert(());
        }
        seen.into_keys().map(Some).collect()
    }

    /// Treatment levels of `z_t` with positive weight inside a stratum,
    /// ascending.
    pub fn observed_treatments(&self, t: usize, within: &StratumKey) -> Vec<Level> {
        let mut seen = BTreeMap::new();
        for cell in self.cells.iter().filter(|c| within.matches(c)) {
            seen.entry(cell.z[t - 1]).or_insert(());
        }
        seen.into_keys().collect()
    }

    /// Covariate values of `x_t` with positive weight inside a stratum, in
    /// lexicographic order.
    pub fn observed_covariates(&self, t: usize, within: &StratumKey) -> Vec<CovValue> {
        let mut seen = BTreeMap::new();
        for cell in self.cells.iter().filter(|c| within.matches(c)) {
            seen.entry(cell.x[t - 1].clone()).or_insert(());
        }
        seen.into_keys().collect()
    }

    /// All active-treatment strata `(t, z_1^{t-1}, x_1^{t-1}, z_t > 0)` with
    /// positive weight, canonical order.
    pub fn active_full_strata(&self) -> Vec<ThetaKey> {
        let mut out = Vec::new();
        for t in 1..=self.horizon() {
            for (z, x) in self.full_histories(t) {
                let hist = StratumKey::FullHistory {
                    t,
                    z: z.clone(),
                    x: x.clone(),
                };
                for z_t in self.observed_treatments(t, &hist) {
                    if z_t > 0 {
                        out.push(ThetaKey {
                            t,
                            z: z.clone(),
                            x: x.clone(),
                            z_t,
                        });
                    }
                }
            }
        }
        out
    }

    /// All active-treatment Markov strata with positive weight, canonical
    /// order.
    pub fn active_markov_strata(&self) -> Vec<MarkovKey> {
        let mut out = Vec::new();
        for t in 1..=self.horizon() {
            for last in self.markov_pairs(t) {
                let hist = StratumKey::Markov {
                    t,
                    last: last.clone(),
                };
                for z_t in self.observed_treatments(t, &hist) {
                    if z_t > 0 {
                        out.push(MarkovKey {
                            t,
                            last: last.clone(),
                            z_t,
                        });
                    }
                }
            }
        }
        out
    }
}
