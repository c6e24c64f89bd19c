//! Run reports: per-seed metrics, mean/std aggregation, and a markdown
//! rendering for side-by-side strategy comparison.

use serde::{Deserialize, Serialize};

use crate::metrics::MetricReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub auc: f64,
    pub pauc_std: f64,
    pub f1: f64,
    pub threshold: f64,
}

impl SeedReport {
    pub fn from_metrics(seed: u64, report: &MetricReport) -> Self {
        SeedReport {
            seed,
            auc: report.auc,
            pauc_std: report.pauc_standardized,
            f1: report.f1,
            threshold: report.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub auc_mean: f64,
    pub auc_std: f64,
    pub pauc_mean: f64,
    pub pauc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    pub aggregate: AggregateReport,
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Sample mean and standard deviation per metric (std is 0 for one seed).
pub fn aggregate(per_seed: &[SeedReport]) -> AggregateReport {
    let aucs: Vec<f64> = per_seed.iter().map(|s| s.auc).collect();
    let paucs: Vec<f64> = per_seed.iter().map(|s| s.pauc_std).collect();
    let f1s: Vec<f64> = per_seed.iter().map(|s| s.f1).collect();
    let (auc_mean, auc_std) = mean_and_std(&aucs);
    let (pauc_mean, pauc_std) = mean_and_std(&paucs);
    let (f1_mean, f1_std) = mean_and_std(&f1s);
    AggregateReport {
        auc_mean,
        auc_std,
        pauc_mean,
        pauc_std,
        f1_mean,
        f1_std,
    }
}

pub fn run_report(strategy: &str, per_seed: Vec<SeedReport>) -> RunReport {
    RunReport {
        strategy: strategy.to_string(),
        seeds: per_seed.iter().map(|s| s.seed).collect(),
        aggregate: aggregate(&per_seed),
        per_seed,
    }
}

/// Markdown comparison table, one row per strategy.
pub fn render_markdown(reports: &[RunReport]) -> String {
    let mut out = String::new();
    out.push_str("| Fusion strategy | AUC | pAUC | F1 |\n");
    out.push_str("|---|---|---|---|\n");
    for r in reports {
        let a = &r.aggregate;
        out.push_str(&format!(
            "| {} | {:.3} ± {:.3} | {:.3} ± {:.3} | {:.3} ± {:.3} |\n",
            r.strategy, a.auc_mean, a.auc_std, a.pauc_mean, a.pauc_std, a.f1_mean, a.f1_std
        ));
    }
    out
}
