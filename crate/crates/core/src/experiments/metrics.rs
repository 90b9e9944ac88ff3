use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentError;

/// One CSV row per training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario_id: String,
    pub seed: u64,
    pub episode: usize,
    pub cost: f64,
    /// Running minimum of the costs of non-blown episodes so far. Infinite
    /// until the first episode that did not blow up.
    pub best_so_far: f64,
    pub regret: f64,
    pub spectral_radius: f64,
    pub blown_up: bool,
}

pub const CSV_COLUMNS: [&str; 8] = [
    "scenario_id",
    "seed",
    "episode",
    "cost",
    "best_so_far",
    "regret",
    "spectral_radius",
    "blown_up",
];

/// `Regret(e) = Σ_{i≤e} (G(i) − G_ref(i))` with `G_ref(i) = min_{j≤i} G(j)`.
pub fn cumulative_regret(costs: &[f64]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    let mut total = 0.0;
    costs
        .iter()
        .map(|&c| {
            best = best.min(c);
            total += c - best;
            total
        })
        .collect()
}

/// Builds rows for one seed. Blown episodes are kept as rows but leave the
/// running minimum and the regret unchanged.
pub fn build_records(
    scenario_id: &str,
    seed: u64,
    costs: &[f64],
    blown: &[bool],
    spectral_radii: &[f64],
) -> Vec<MetricsRecord> {
    let mut best = f64::INFINITY;
    let mut regret = 0.0;
    costs
        .iter()
        .zip(blown)
        .zip(spectral_radii)
        .enumerate()
        .map(|(episode, ((&cost, &blown_up), &rho))| {
            if !blown_up {
                best = best.min(cost);
                regret += cost - best;
            }
            MetricsRecord {
                scenario_id: scenario_id.to_owned(),
                seed,
                episode,
                cost,
                best_so_far: best,
                regret,
                spectral_radius: rho,
                blown_up,
            }
        })
        .collect()
}

/// Number of trailing episodes used for steady-state means: 1000, or half
/// the run when it is shorter than that.
pub fn steady_window(episodes: usize) -> usize {
    if episodes >= 1000 {
        1000
    } else {
        (episodes / 2).max(1).min(episodes)
    }
}

/// Mean cost of the non-blown episodes among the last `window` rows.
pub fn tail_mean(records: &[MetricsRecord], window: usize) -> Option<f64> {
    let start = records.len().saturating_sub(window);
    let kept: Vec<f64> = records[start..].iter().filter(|r| !r.blown_up).map(|r| r.cost).collect();
    (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<(), ExperimentError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>, ExperimentError> {
    let mut r = csv::Reader::from_path(path)?;
    let records = r.deserialize().collect::<Result<Vec<MetricsRecord>, _>>()?;
    Ok(records)
}
