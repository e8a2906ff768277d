use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub view: String,
    pub p: f64,
    pub metric: String,
    pub fold: usize,
    pub seed: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub view: String,
    pub p: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub config: serde_json::Value,
    pub metrics: Vec<SummaryRow>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

type Key = (String, String, u64, String);

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    fn groups(&self) -> BTreeMap<Key, Vec<f64>> {
        let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            // p ≥ 0, so its bit pattern orders like the value
            let key = (r.scenario.clone(), r.view.clone(), r.p.to_bits(), r.metric.clone());
            groups.entry(key).or_default().push(r.value);
        }
        groups
    }

    /// Mean ± sample standard deviation per (scenario, view, p, metric),
    /// sorted by that key.
    pub fn aggregate(&self) -> Vec<SummaryRow> {
        self.groups()
            .into_iter()
            .map(|((scenario, view, p, metric), values)| {
                let n = values.len();
                let mean = values.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                SummaryRow {
                    scenario,
                    view,
                    p: f64::from_bits(p),
                    metric,
                    mean,
                    std,
                    n,
                }
            })
            .collect()
    }

    /// Mean of one metric in one scenario.
    pub fn mean(&self, scenario: &str, view: &str, p: f64, metric: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.scenario == scenario && r.view == view && r.p == p && r.metric == metric)
            .map(|r| r.value)
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    pub fn summary(&self, config: serde_json::Value, seed: u64) -> Summary {
        Summary {
            seed,
            config,
            metrics: self.aggregate(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path, config: serde_json::Value, seed: u64) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary(config, seed))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
