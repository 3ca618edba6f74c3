//! Metric aggregation across seeds and report emitters (JSON, CSV, text).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::InterventionPoint;
use crate::error::{Error, Result};

/// Mean and sample standard deviation (`n - 1` denominator, 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    #[serde(flatten)]
    pub summary: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Scalar(MetricSummary),
    Curve(Vec<CurvePoint>),
}

/// One seed's raw value for a metric.
#[derive(Debug, Clone, PartialEq)]
pub enum RunValue {
    Scalar(f64),
    Curve(Vec<InterventionPoint>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub split: String,
    pub n_concepts: usize,
    pub embedding_dim: usize,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub metrics: BTreeMap<String, MetricValue>,
}

impl EvalReport {
    /// Aggregates per-run metric maps. Every run must report the same metrics,
    /// and curves must share their grid.
    pub fn aggregate(meta: ReportMeta, runs: &[BTreeMap<String, RunValue>]) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::data("no runs to aggregate"))?;
        let mut metrics = BTreeMap::new();
        for (name, value) in first {
            let per_run: Vec<&RunValue> = runs
                .iter()
                .map(|r| {
                    r.get(name)
                        .ok_or_else(|| Error::data(format!("metric {name} missing in a run")))
                })
                .collect::<Result<_>>()?;
            let merged = match value {
                RunValue::Scalar(_) => {
                    let vals = per_run
                        .iter()
                        .map(|v| match v {
                            RunValue::Scalar(x) => Ok(*x),
                            RunValue::Curve(_) => {
                                Err(Error::data(format!("metric {name} changes kind")))
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    MetricValue::Scalar(MetricSummary::from_values(&vals))
                }
                RunValue::Curve(points) => {
                    let curves = per_run
                        .iter()
                        .map(|v| match v {
                            RunValue::Curve(c) if c.len() == points.len() => Ok(c),
                            _ => Err(Error::data(format!("metric {name} has mismatched curves"))),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut out = Vec::with_capacity(points.len());
                    for (i, pt) in points.iter().enumerate() {
                        // one summary over every draw of every run
                        let vals: Vec<f64> = curves
                            .iter()
                            .flat_map(|c| c[i].draws.iter().copied())
                            .collect();
                        out.push(CurvePoint {
                            x: pt.probability,
                            summary: MetricSummary::from_values(&vals),
                        });
                    }
                    MetricValue::Curve(out)
                }
            };
            metrics.insert(name.clone(), merged);
        }
        Ok(Self { meta, metrics })
    }

    pub fn scalar(&self, name: &str) -> Option<MetricSummary> {
        match self.metrics.get(name)? {
            MetricValue::Scalar(s) => Some(*s),
            MetricValue::Curve(_) => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `metric,x,mean,std,n` rows; `x` is empty for scalars.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,x,mean,std,n\n");
        for (name, value) in &self.metrics {
            match value {
                MetricValue::Scalar(s) => {
                    let _ = writeln!(out, "{name},,{},{},{}", s.mean, s.std, s.n);
                }
                MetricValue::Curve(points) => {
                    for p in points {
                        let s = p.summary;
                        let _ = writeln!(out, "{name},{},{},{},{}", p.x, s.mean, s.std, s.n);
                    }
                }
            }
        }
        out
    }

    /// Aligned `metric  mean ± std` rows.
    pub fn to_table(&self) -> String {
        let rows: Vec<(String, String)> = self
            .metrics
            .iter()
            .flat_map(|(name, value)| match value {
                MetricValue::Scalar(s) => vec![(name.clone(), fmt_summary(s))],
                MetricValue::Curve(points) => points
                    .iter()
                    .map(|p| (format!("{name}@{}", p.x), fmt_summary(&p.summary)))
                    .collect(),
            })
            .collect();
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{} k={} d={} seeds={:?}\n",
            self.meta.dataset, self.meta.n_concepts, self.meta.embedding_dim, self.meta.seeds
        );
        let _ = writeln!(out, "{:<width$}  value", "metric");
        for (name, v) in rows {
            let _ = writeln!(out, "{name:<width$}  {v}");
        }
        out
    }
}

fn fmt_summary(s: &MetricSummary) -> String {
    format!("{:.4} ± {:.4}", s.mean, s.std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(accs: &[&[f64]]) -> Vec<InterventionPoint> {
        accs.iter()
            .enumerate()
            .map(|(i, d)| InterventionPoint {
                probability: i as f64 * 0.5,
                accuracy: MetricSummary::from_values(d).mean,
                std: 0.0,
                draws: d.to_vec(),
            })
            .collect()
    }

    #[test]
    fn summary_uses_sample_std() {
        let s = MetricSummary::from_values(&[0.90, 0.95, 1.0]);
        assert!((s.mean - 0.95).abs() < 1e-12);
        assert!((s.std - 0.05).abs() < 1e-12);
        assert_eq!(MetricSummary::from_values(&[0.3]).std, 0.0);
    }

    #[test]
    fn aggregates_scalars_and_curves() {
        let run = |acc: f64, c: Vec<InterventionPoint>| {
            BTreeMap::from([
                ("accuracy".to_string(), RunValue::Scalar(acc)),
                ("interventions".to_string(), RunValue::Curve(c)),
            ])
        };
        let runs = vec![
            run(0.9, curve(&[&[0.9, 0.9], &[0.5, 0.6]])),
            run(1.0, curve(&[&[1.0, 1.0], &[0.5, 0.4]])),
        ];
        let r = EvalReport::aggregate(ReportMeta::default(), &runs).unwrap();
        assert_eq!(r.metrics.len(), 2);
        assert!((r.scalar("accuracy").unwrap().mean - 0.95).abs() < 1e-12);
        let MetricValue::Curve(points) = &r.metrics["interventions"] else {
            panic!("curve expected")
        };
        assert_eq!(points[1].summary.n, 4);
        assert!((points[1].summary.mean - 0.5).abs() < 1e-12);

        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 1 + 2);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["metrics"]["accuracy"]["n"], 2);
        assert!(r.to_table().contains("interventions@0.5"));
    }

    #[test]
    fn missing_metric_is_rejected() {
        let a = BTreeMap::from([("accuracy".to_string(), RunValue::Scalar(1.0))]);
        let b = BTreeMap::new();
        assert!(EvalReport::aggregate(ReportMeta::default(), &[a, b]).is_err());
    }
}
