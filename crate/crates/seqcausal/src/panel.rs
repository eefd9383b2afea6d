//! Observed panel data: ingestion, validation, and exact stratum queries.
//!
//! The expected CSV layout is UTF-8 with a header row naming the columns
//! `unit_id`, `z1..zT`, `x{t}_{j}` for `t = 1..T-1` and `j = 1..d_t`, and
//! `y`. Column order is free, names are fixed by that pattern, and no cell
//! may be missing. Treatments and covariates are nonnegative integers;
//! the outcome is a finite real.
//!
//! All stratum counts are exact integers; proportions divide two exact
//! counts, so `proportion(a, b) * count(b) == count(a ∩ b)` up to the single
//! final rounding.

use std::collections::BTreeMap;
use std::io::BufRead;

use crate::error::{Error, Result};
use crate::strata::{ArityTable, CellKey, CellTable, CovValue, Level, StratumKey};

/// Immutable rectangular panel of `n_units x (z_1..z_T, x_1..x_{T-1}, y)`.
///
/// Units are grouped by their full treatment/covariate cell; every stratum
/// query reduces to sums of per-cell counts and outcome totals.
#[derive(Debug, Clone)]
pub struct PanelData {
    arity: ArityTable,
    cells: Vec<CellKey>,
    counts: Vec<u64>,
    y_sums: Vec<f64>,
    y_sq_sums: Vec<f64>,
    n_units: u64,
    table: CellTable,
}

impl PanelData {
    /// Build a panel from per-unit cell assignments and outcomes.
    pub fn from_units(arity: ArityTable, units: Vec<(CellKey, f64)>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::EmptyPanel);
        }
        for (i, (_, y)) in units.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::NonFiniteOutcome {
                    row: i + 1,
                    value: y.to_string(),
                });
            }
        }
        let mut index: BTreeMap<CellKey, usize> = BTreeMap::new();
        for (cell, _) in &units {
            let next = index.len();
            index.entry(cell.clone()).or_insert(next);
        }
        // reassign ids in canonical cell order
        let cells: Vec<CellKey> = index.keys().cloned().collect();
        for (i, cell) in cells.iter().enumerate() {
            *index.get_mut(cell).unwrap() = i;
        }
        let n_units = units.len() as u64;
        let mut counts = vec![0u64; cells.len()];
        let mut y_sums = vec![0.0; cells.len()];
        let mut y_sq_sums = vec![0.0; cells.len()];
        for (cell, y) in units {
            let id = index[&cell];
            counts[id] += 1;
            y_sums[id] += y;
            y_sq_sums[id] += y * y;
        }
        let entries: BTreeMap<CellKey, f64> = cells
            .iter()
            .cloned()
            .zip(counts.iter().map(|&c| c as f64))
            .collect();
        let table = CellTable::new(arity.clone(), entries)?;
        Ok(PanelData {
            arity,
            cells,
            counts,
            y_sums,
            y_sq_sums,
            n_units,
            table,
        })
    }

    /// Build a panel from per-cell outcome vectors (cells already grouped).
    pub fn from_cell_outcomes(arity: ArityTable, groups: Vec<(CellKey, Vec<f64>)>) -> Result<Self> {
        let mut sorted: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
        for (cell, ys) in groups {
            if ys.is_empty() {
                continue;
            }
            sorted.entry(cell).or_default().extend(ys);
        }
        if sorted.is_empty() {
            return Err(Error::EmptyPanel);
        }
        let mut cells = Vec::with_capacity(sorted.len());
        let mut counts = Vec::with_capacity(sorted.len());
        let mut y_sums = Vec::with_capacity(sorted.len());
        let mut y_sq_sums = Vec::with_capacity(sorted.len());
        let mut n_units = 0u64;
        for (cell, ys) in sorted {
            for (i, y) in ys.iter().enumerate() {
                if !y.is_finite() {
                    return Err(Error::NonFiniteOutcome {
                        row: i + 1,
                        value: y.to_string(),
                    });
                }
            }
            n_units += ys.len() as u64;
            counts.push(ys.len() as u64);
            y_sums.push(ys.iter().sum());
            y_sq_sums.push(ys.iter().map(|y| y * y).sum());
            cells.push(cell);
        }
        let entries: BTreeMap<CellKey, f64> = cells
            .iter()
            .cloned()
            .zip(counts.iter().map(|&c| c as f64))
            .collect();
        let table = CellTable::new(arity.clone(), entries)?;
        Ok(PanelData {
            arity,
            cells,
            counts,
            y_sums,
            y_sq_sums,
            n_units,
            table,
        })
    }

    pub fn n_units(&self) -> u64 {
        self.n_units
    }

    pub fn horizon(&self) -> usize {
        self.arity.horizon()
    }

    pub fn arity(&self) -> &ArityTable {
        &self.arity
    }

    /// Cell-weight view of the panel (weights are the integer counts).
    pub fn table(&self) -> &CellTable {
        &self.table
    }

    pub fn occupied_cells(&self) -> &[CellKey] {
        &self.cells
    }

    /// Exact number of units whose history matches the key.
    pub fn stratum_count(&self, key: &StratumKey) -> u64 {
        self.cells
            .iter()
            .zip(&self.counts)
            .filter(|(c, _)| key.matches(c))
            .map(|(_, n)| n)
            .sum()
    }

    fn joint_count(&self, a: &StratumKey, b: &StratumKey) -> u64 {
        self.cells
            .iter()
            .zip(&self.counts)
            .filter(|(c, _)| a.matches(c) && b.matches(c))
            .map(|(_, n)| n)
            .sum()
    }

    /// Conditional proportion of `event` within `given`, from exact counts.
    pub fn proportion(&self, event: &StratumKey, given: &StratumKey) -> Result<f64> {
        let denom = self.stratum_count(given);
        if denom == 0 {
            return Err(Error::EmptyConditioningStratum(given.to_string()));
        }
        Ok(self.joint_count(event, given) as f64 / denom as f64)
    }

    /// Mean outcome over the stratum together with the member count.
    pub fn stratum_mean_outcome(&self, key: &StratumKey) -> Result<(f64, u64)> {
        let mut n = 0u64;
        let mut sum = 0.0;
        for ((c, cnt), ys) in self.cells.iter().zip(&self.counts).zip(&self.y_sums) {
            if key.matches(c) {
                n += cnt;
                sum += ys;
            }
        }
        if n == 0 {
            return Err(Error::EmptyStratum(key.to_string()));
        }
        Ok((sum / n as f64, n))
    }

    /// Mean of `y` over the whole panel.
    pub fn mean_outcome(&self) -> f64 {
        let total: f64 = self.y_sums.iter().sum();
        total / self.n_units() as f64
    }

    /// Pooled within-cell residual variance from the saturated outcome model:
    /// `sum_cells sum_i (y_i - mean_cell)^2 / (N - #cells)`.
    pub fn pooled_within_cell_variance(&self) -> Result<f64> {
        let n = self.n_units();
        let c = self.cells.len() as u64;
        if n <= c {
            return Err(Error::InvalidDesign(format!(
                "{n} units across {c} occupied cells leave no degrees of freedom \
                 to estimate the outcome variance"
            )));
        }
        let mut rss = 0.0;
        for ((&cnt, &s), &sq) in self.counts.iter().zip(&self.y_sums).zip(&self.y_sq_sums) {
            rss += sq - s * s / cnt as f64;
        }
        Ok(rss / (n - c) as f64)
    }

    /// Per-cell mean outcomes in canonical order.
    pub fn cell_means(&self) -> Vec<(CellKey, f64, u64)> {
        self.cells
            .iter()
            .zip(&self.counts)
            .zip(&self.y_sums)
            .map(|((c, &n), &s)| (c.clone(), s / n as f64, n))
            .collect()
    }
}

// --- CSV ingestion ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    UnitId,
    Treatment(usize),
    Covariate(usize, usize),
    Outcome,
}

fn parse_header_name(name: &str) -> Option<Column> {
    let name = name.trim();
    if name == "unit_id" {
        return Some(Column::UnitId);
    }
    if name == "y" {
        return Some(Column::Outcome);
    }
    if let Some(rest) = name.strip_prefix('z') {
        if let Ok(t) = rest.parse::<usize>() {
            if t >= 1 {
                return Some(Column::Treatment(t));
            }
        }
        return None;
    }
    if let Some(rest) = name.strip_prefix('x') {
        let (t, j) = rest.split_once('_')?;
        if let (Ok(t), Ok(j)) = (t.parse::<usize>(), j.parse::<usize>()) {
            if t >= 1 && j >= 1 {
                return Some(Column::Covariate(t, j));
            }
        }
        return None;
    }
    None
}

/// Parsed and validated header layout.
#[derive(Debug)]
struct Layout {
    columns: Vec<Column>,
    horizon: usize,
    cov_dims: Vec<usize>,
}

fn parse_header(line: &str) -> Result<Layout> {
    let mut columns = Vec::new();
    let mut have_id = false;
    let mut have_y = false;
    let mut z_times = Vec::new();
    let mut x_cols: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for raw in line.split(',') {
        let col = parse_header_name(raw)
            .ok_or_else(|| Error::UnexpectedColumn(raw.trim().to_string()))?;
        match col {
            Column::UnitId => have_id = true,
            Column::Outcome => have_y = true,
            Column::Treatment(t) => z_times.push(t),
            Column::Covariate(t, j) => x_cols.entry(t).or_default().push(j),
        }
        columns.push(col);
    }
    if !have_id {
        return Err(Error::MissingColumn("unit_id".into()));
    }
    if !have_y {
        return Err(Error::MissingColumn("y".into()));
    }
    if z_times.is_empty() {
        return Err(Error::MissingColumn("z1".into()));
    }
    z_times.sort_unstable();
    let horizon = *z_times.last().unwrap();
    for t in 1..=horizon {
        if !z_times.contains(&t) {
            return Err(Error::MissingColumn(format!("z{t}")));
        }
    }
    if z_times.len() != horizon {
        // duplicate treatment column
        return Err(Error::UnexpectedColumn(format!(
            "duplicate treatment column z{}",
            z_times
                .windows(2)
                .find(|w| w[0] == w[1])
                .map(|w| w[0])
                .unwrap_or(horizon)
        )));
    }
    let mut cov_dims = vec![0usize; horizon.saturating_sub(1)];
    for (t, mut js) in x_cols {
        if t > horizon.saturating_sub(1) {
            return Err(Error::UnexpectedColumn(format!(
                "x{t}_* (covariates exist only between treatments, so t <= {})",
                horizon - 1
            )));
        }
        js.sort_unstable();
        let d = *js.last().unwrap();
        for j in 1..=d {
            if !js.contains(&j) {
                return Err(Error::MissingColumn(format!("x{t}_{j}")));
            }
        }
        if js.len() != d {
            return Err(Error::UnexpectedColumn(format!("duplicate column x{t}_*")));
        }
        cov_dims[t - 1] = d;
    }
    for (idx, d) in cov_dims.iter().enumerate() {
        if *d == 0 {
            return Err(Error::MissingColumn(format!("x{}_1", idx + 1)));
        }
    }
    Ok(Layout {
        columns,
        horizon,
        cov_dims,
    })
}

/// Read a panel from CSV. The arity of each variable is inferred as the
/// maximum observed level unless `declared_arity` widens it; declared arities
/// narrower than the data are an error.
pub fn load_panel_with(
    read: impl BufRead,
    declared_arity: Option<ArityTable>,
) -> Result<PanelData> {
    let mut lines = read.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(Error::EmptyPanel),
    };
    let layout = parse_header(&header)?;
    let t_max = layout.horizon;

    let mut units: Vec<(CellKey, f64)> = Vec::new();
    let mut z_max = vec![0 as Level; t_max];
    let mut x_max: Vec<Vec<Level>> = layout.cov_dims.iter().map(|&d| vec![0; d]).collect();

    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row_id = lineno + 2; // 1-based, after the header
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != layout.columns.len() {
            return Err(Error::RaggedRow {
                row: row_id,
                expected: layout.columns.len(),
                found: cells.len(),
            });
        }
        let mut z = vec![0 as Level; t_max];
        let mut x: Vec<CovValue> = layout.cov_dims.iter().map(|&d| vec![0; d]).collect();
        let mut y = 0.0f64;
        for (col, raw) in layout.columns.iter().zip(&cells) {
            let raw = raw.trim();
            match col {
                Column::UnitId => {}
                Column::Outcome => {
                    y = raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or(
                        Error::NonFiniteOutcome {
                            row: row_id,
                            value: raw.to_string(),
                        },
                    )?;
                }
                Column::Treatment(t) => {
                    let v: Level = raw.parse().map_err(|_| Error::NonIntegerTreatment {
                        row: row_id,
                        column: format!("z{t}"),
                        value: raw.to_string(),
                    })?;
                    z[t - 1] = v;
                    z_max[t - 1] = z_max[t - 1].max(v);
                }
                Column::Covariate(t, j) => {
                    let v: Level = raw.parse().map_err(|_| Error::NonIntegerTreatment {
                        row: row_id,
                        column: format!("x{t}_{j}"),
                        value: raw.to_string(),
                    })?;
                    x[t - 1][j - 1] = v;
                    x_max[t - 1][j - 1] = x_max[t - 1][j - 1].max(v);
                }
            }
        }
        units.push((CellKey { z, x }, y));
    }
    if units.is_empty() {
        return Err(Error::EmptyPanel);
    }

    let inferred = ArityTable {
        z_levels: z_max.iter().map(|&m| m + 1).collect(),
        x_levels: x_max
            .iter()
            .map(|comps| comps.iter().map(|&m| m + 1).collect())
            .collect(),
    };
    let arity = match declared_arity {
        None => inferred,
        Some(declared) => {
            validate_declared(&declared, &inferred, &units)?;
            declared
        }
    };
    PanelData::from_units(arity, units)
}

fn validate_declared(
    declared: &ArityTable,
    inferred: &ArityTable,
    units: &[(CellKey, f64)],
) -> Result<()> {
    let shape_ok = declared.z_levels.len() == inferred.z_levels.len()
        && declared.x_levels.len() == inferred.x_levels.len()
        && declared
            .x_levels
            .iter()
            .zip(&inferred.x_levels)
            .all(|(a, b)| a.len() == b.len());
    if !shape_ok {
        return Err(Error::InvalidDesign(
            "declared arity table does not match the CSV layout".into(),
        ));
    }
    for (t, (&dec, &inf)) in declared.z_levels.iter().zip(&inferred.z_levels).enumerate() {
        if dec < inf {
            let (row, value) = units
                .iter()
                .enumerate()
                .find(|(_, (c, _))| c.z[t] >= dec)
                .map(|(i, (c, _))| (i + 2, c.z[t]))
                .unwrap();
            return Err(Error::OutOfRangeValue {
                row,
                column: format!("z{}", t + 1),
                value,
                arity: dec,
            });
        }
    }
    for (t, (dec, inf)) in declared.x_levels.iter().zip(&inferred.x_levels).enumerate() {
        for (j, (&d, &i)) in dec.iter().zip(inf).enumerate() {
            if d < i {
                let (row, value) = units
                    .iter()
                    .enumerate()
                    .find(|(_, (c, _))| c.x[t][j] >= d)
                    .map(|(idx, (c, _))| (idx + 2, c.x[t][j]))
                    .unwrap();
                return Err(Error::OutOfRangeValue {
                    row,
                    column: format!("x{}_{}", t + 1, j + 1),
                    value,
                    arity: d,
                });
            }
        }
    }
    Ok(())
}

/// Read a panel from CSV with inferred arities.
pub fn load_panel(read: impl BufRead) -> Result<PanelData> {
    load_panel_with(read, None)
}
