//! Raw per-repetition results and their mean ± sd aggregate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One measured value: e.g. the ELBO of one test task, or the squared
/// error of one test image, in one training repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    /// Method/setting the value belongs to, e.g. `apovi_meta10`.
    pub group: String,
    pub repetition: usize,
    pub item: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub group: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation of the per-repetition means (0 for one
    /// repetition).
    pub sd: f64,
    pub repetitions: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub metric: String,
    pub rows: Vec<RawRow>,
}

/// Mean computed relative to the first value so that identical inputs give
/// that value back exactly.
fn exact_mean(v: &[f64]) -> f64 {
    let first = v[0];
    first + v.iter().map(|x| x - first).sum::<f64>() / v.len() as f64
}

impl MetricsRecord {
    pub fn new(metric: impl Into<String>) -> Self {
        Self { metric: metric.into(), rows: Vec::new() }
    }

    pub fn push(&mut self, group: &str, repetition: usize, item: usize, value: f64) {
        self.rows.push(RawRow { group: group.to_string(), repetition, item, value });
    }

    /// Groups in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.group) {
                out.push(r.group.clone());
            }
        }
        out
    }

    /// Per-repetition means (over items) of `group`, ordered by repetition.
    pub fn repetition_means(&self, group: &str) -> Vec<f64> {
        let mut reps: Vec<usize> = self.rows.iter().filter(|r| r.group == group).map(|r| r.repetition).collect();
        reps.sort_unstable();
        reps.dedup();
        reps.iter()
            .map(|&rep| {
                let v: Vec<f64> = self.rows.iter().filter(|r| r.group == group && r.repetition == rep).map(|r| r.value).collect();
                exact_mean(&v)
            })
            .collect()
    }

    pub fn aggregate(&self) -> Vec<AggregateRow> {
        self.groups()
            .into_iter()
            .map(|group| {
                let means = self.repetition_means(&group);
                let mean = exact_mean(&means);
                let sd = if means.len() < 2 {
                    0.0
                } else {
                    (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt()
                };
                AggregateRow { group, metric: self.metric.clone(), mean, sd, repetitions: means.len() }
            })
            .collect()
    }

    pub fn aggregate_for(&self, group: &str) -> Option<AggregateRow> {
        self.aggregate().into_iter().find(|a| a.group == group)
    }

    /// Writes `metrics_raw.csv` and `metrics_aggregate.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut raw = csv::Writer::from_path(dir.join("metrics_raw.csv"))?;
        for r in &self.rows {
            raw.serialize(r)?;
        }
        raw.flush()?;
        let mut agg = csv::Writer::from_path(dir.join("metrics_aggregate.csv"))?;
        for a in self.aggregate() {
            agg.serialize(a)?;
        }
        agg.flush()?;
        Ok(())
    }

    pub fn read_raw(path: &Path, metric: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<RawRow>, _>>()?;
        if rows.is_empty() {
            return Err(CliError::Config(format!("{} holds no rows", path.display())));
        }
        Ok(Self { metric: metric.into(), rows })
    }

    pub fn summary(&self) -> String {
        self.aggregate()
            .iter()
            .map(|a| format!("{:<16} {} = {:.3} ± {:.3} ({} repetitions)\n", a.group, a.metric, a.mean, a.sd, a.repetitions))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_recomputes_from_raw_file() {
        let mut m = MetricsRecord::new("elbo");
        for rep in 0..3 {
            for item in 0..4 {
                m.push("apovi", rep, item, 0.1 * (rep * 7 + item) as f64 - 0.37);
                m.push("povi", rep, item, 1.0 / (1 + rep + item) as f64);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        m.write(dir.path()).unwrap();
        let back = MetricsRecord::read_raw(&dir.path().join("metrics_raw.csv"), "elbo").unwrap();
        assert_eq!(back, m);
        let mut rdr = csv::Reader::from_path(dir.path().join("metrics_aggregate.csv")).unwrap();
        let stored: Vec<AggregateRow> = rdr.deserialize().map(|r| r.unwrap()).collect();
        for (a, b) in stored.iter().zip(back.aggregate()) {
            assert!((a.mean - b.mean).abs() < 1e-12 && (a.sd - b.sd).abs() < 1e-12);
        }
        assert_eq!(stored.len(), 2);
    }

    #[test]
    fn identical_repetitions_have_zero_sd() {
        let mut m = MetricsRecord::new("sse");
        for rep in 0..3 {
            for (item, v) in [0.1, 0.7, 51.3].into_iter().enumerate() {
                m.push("lininterp", rep, item, v);
            }
        }
        let a = m.aggregate_for("lininterp").unwrap();
        assert_eq!(a.sd, 0.0);
        assert_eq!(a.mean, m.repetition_means("lininterp")[0]);
    }
}
