//! Pooled z-score percentiles for comparing methods on one metric.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PercentileMapping {
    /// Standard-normal CDF of the pooled z-score.
    #[default]
    NormalCdf,
    /// Mid-rank within the pooled set, ties averaged.
    EmpiricalRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileReport {
    /// Mean percentile per method, in input order.
    pub method_means: Vec<f64>,
    /// Percentile of every score, grouped like the input.
    pub percentiles: Vec<Vec<f64>>,
    /// Set when the pooled variance is zero; every percentile is then 50.
    pub degenerate: bool,
}

pub fn zscore_percentiles(scores: &[Vec<f64>]) -> PercentileReport {
    zscore_percentiles_with(scores, PercentileMapping::NormalCdf)
}

pub fn zscore_percentiles_with(scores: &[Vec<f64>], mapping: PercentileMapping) -> PercentileReport {
    let pooled: Vec<f64> = scores.iter().flatten().copied().collect();
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let var = pooled.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let degenerate = pooled.is_empty() || !(var > 0.0);
    let percentiles: Vec<Vec<f64>> = if degenerate {
        scores.iter().map(|s| vec![50.0; s.len()]).collect()
    } else {
        match mapping {
            PercentileMapping::NormalCdf => {
                let sd = var.sqrt();
                let normal = Normal::standard();
                scores
                    .iter()
                    .map(|s| s.iter().map(|x| 100.0 * normal.cdf((x - mean) / sd)).collect())
                    .collect()
            }
            PercentileMapping::EmpiricalRank => {
                let mut sorted = pooled.clone();
                sorted.sort_by(f64::total_cmp);
                let rank = |x: f64| {
                    let below = sorted.partition_point(|v| *v < x) as f64;
                    let upto = sorted.partition_point(|v| *v <= x) as f64;
                    // average 1-based rank of the tie group, as a mid-rank percentile
                    100.0 * ((below + upto) / 2.0) / n
                };
                scores
                    .iter()
                    .map(|s| s.iter().map(|&x| rank(x)).collect())
                    .collect()
            }
        }
    };
    let method_means = percentiles
        .iter()
        .map(|p| {
            if p.is_empty() {
                f64::NAN
            } else {
                p.iter().sum::<f64>() / p.len() as f64
            }
        })
        .collect();
    PercentileReport {
        method_means,
        percentiles,
        degenerate,
    }
}
