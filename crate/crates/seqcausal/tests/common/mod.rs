#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;

use seqcausal::point_params::PointParams;
use seqcausal::sim::{
    AssignRow, AssignTable, Conditioning, DesignSpec, FrequencyMode, SimConfig, TransitionRow,
    TransitionTable,
};
use seqcausal::strata::{ArityTable, CellKey, CellTable, CovValue, GammaKey, Level};

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn read_config(name: &str) -> String {
    let path = configs_dir().join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("reading {path:?}: {e}"))
}

pub fn reference_design() -> DesignSpec {
    serde_json::from_str(&read_config("reference_design.json")).unwrap()
}

#[derive(serde::Deserialize)]
struct ScenarioFile {
    scenarios: Vec<SimConfig>,
}

pub fn reference_scenarios() -> Vec<SimConfig> {
    let file: ScenarioFile = serde_json::from_str(&read_config("sim_reference.json")).unwrap();
    file.scenarios
}

/// Binary generic design with quarter-grid probabilities varying by history,
/// full positivity, and integer frequencies at `n = 4^(2t-1) * scale`.
pub fn generic_design(t_horizon: usize, n_scale: u64) -> DesignSpec {
    let quarter = |i: usize| [0.25, 0.5, 0.75][i % 3];
    let mut z_assign = Vec::new();
    let mut x_transition = Vec::new();
    let mut salt = 0usize;
    for t in 1..=t_horizon {
        let mut rows = Vec::new();
        for z_hist in binary_vectors(t - 1) {
            for x_hist in binary_vectors(t - 1) {
                let p1 = quarter(salt);
                salt += 1;
                rows.push(AssignRow {
                    z_hist: Some(z_hist.clone()),
                    x_hist: Some(x_hist.iter().map(|&v| vec![v]).collect()),
                    last_z: None,
                    last_x: None,
                    p: vec![1.0 - p1, p1],
                });
            }
        }
        z_assign.push(AssignTable {
            conditioning: Conditioning::Full,
            rows,
        });
        if t < t_horizon {
            let mut rows = Vec::new();
            for z_hist in binary_vectors(t) {
                for x_hist in binary_vectors(t - 1) {
                    let p1 = quarter(salt);
                    salt += 1;
                    rows.push(TransitionRow {
                        z_hist: z_hist.clone(),
                        x_hist: x_hist.iter().map(|&v| vec![v]).collect(),
                        p: vec![1.0 - p1, p1],
                    });
                }
            }
            x_transition.push(TransitionTable { rows });
        }
    }
    DesignSpec {
        t_horizon,
        n_units: 4u64.pow(2 * t_horizon as u32 - 1) * n_scale,
        frequency_mode: FrequencyMode::ExactInteger,
        z_levels: vec![2; t_horizon],
        x_levels: vec![vec![2]; t_horizon - 1],
        z_assign,
        x_transition,
    }
}

pub fn binary_vectors(len: usize) -> Vec<Vec<Level>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        let mut next = Vec::with_capacity(out.len() * 2);
        for v in &out {
            for bit in 0..2 {
                let mut w = v.clone();
                w.push(bit);
                next.push(w);
            }
        }
        out = next;
    }
    out
}

/// Full binary cell table of horizon `t` with the given positive weights
/// (one per cell in canonical order).
pub fn full_binary_table(t: usize, weights: &[f64]) -> CellTable {
    let arity = ArityTable {
        z_levels: vec![2; t],
        x_levels: vec![vec![2]; t - 1],
    };
    let mut entries = BTreeMap::new();
    let mut idx = 0;
    for z in binary_vectors(t) {
        for x in binary_vectors(t - 1) {
            entries.insert(
                CellKey {
                    z: z.clone(),
                    x: x.iter().map(|&v| vec![v]).collect(),
                },
                weights[idx % weights.len()],
            );
            idx += 1;
        }
    }
    CellTable::new(arity, entries).unwrap()
}

pub fn n_cells(t: usize) -> usize {
    1usize << (2 * t - 1)
}

/// Random point parameters over the full support of a table.
pub fn random_params(rng: &mut impl Rng, table: &CellTable) -> PointParams {
    let mut params = PointParams {
        grand_mean: rng.gen_range(-5.0..5.0),
        ..Default::default()
    };
    for key in table.active_full_strata() {
        params.theta.insert(key, rng.gen_range(-10.0..10.0));
    }
    for key in seqcausal::point_params::enumerate_gamma_keys(table) {
        params.gamma.insert(key, rng.gen_range(-10.0..10.0));
    }
    params
}

pub fn gamma_keys(table: &CellTable) -> Vec<GammaKey> {
    seqcausal::point_params::enumerate_gamma_keys(table)
}

pub fn scalar_cov(v: Level) -> CovValue {
    vec![v]
}
