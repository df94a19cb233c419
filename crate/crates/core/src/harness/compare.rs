use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::sim::{final_test_accuracy, run_rows, test_curve, write_metrics, metrics_path};

/// Final-accuracy summary for one config across its seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub method: String,
    #[serde(rename = "L")]
    pub max_seq_len: usize,
    #[serde(rename = "W")]
    pub warmup: usize,
    pub seeds: usize,
    pub mean_final_accuracy: f64,
    /// Sample standard deviation (denominator `n − 1`); 0 for a single seed.
    pub std_final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub label: String,
    pub method: String,
    pub round: usize,
    pub mean_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub summary: Vec<SummaryRow>,
    pub curves: Vec<CurveRow>,
    /// Final accuracy per config, in seed order.
    pub per_seed: Vec<Vec<f64>>,
}

/// Mean and sample standard deviation (`n − 1`).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn check_comparable(configs: &[ExperimentConfig]) -> Result<()> {
    if configs.len() < 2 {
        return Err(Error::Comparison("compare needs at least two configs".into()));
    }
    let first = &configs[0];
    for c in &configs[1..] {
        if c.data != first.data || c.model != first.model || c.num_clients != first.num_clients {
            return Err(Error::Comparison(format!(
                "`{}` and `{}` use different data specs",
                first.label(),
                c.label()
            )));
        }
        if c.seed_set() != first.seed_set() {
            return Err(Error::Comparison(format!(
                "`{}` and `{}` use different seed sets",
                first.label(),
                c.label()
            )));
        }
    }
    Ok(())
}

/// Runs every config over the shared seed set. When `write_runs` is set,
/// each run's metrics CSV is written under its config's output dir.
pub fn compare(configs: &[ExperimentConfig], write_runs: bool) -> Result<Comparison> {
    check_comparable(configs)?;
    let mut summary = Vec::new();
    let mut curves = Vec::new();
    let mut per_seed = Vec::new();
    for cfg in configs {
        let mut finals = Vec::new();
        let mut curve_sum: Vec<(usize, f64)> = Vec::new();
        let seeds = cfg.seed_set();
        for &seed in &seeds {
            let run = cfg.with_seed(seed);
            let (rows, _) = run_rows(&run)?;
            if write_runs {
                write_metrics(&metrics_path(&run), &run, &rows)?;
            }
            finals.push(final_test_accuracy(&rows).ok_or_else(|| Error::State("run produced no rows".into()))?);
            let curve = test_curve(&rows);
            if curve_sum.is_empty() {
                curve_sum = curve;
            } else {
                for (acc, (_, a)) in curve_sum.iter_mut().zip(curve) {
                    acc.1 += a;
                }
            }
        }
        let (mean, std) = mean_std(&finals);
        summary.push(SummaryRow {
            label: cfg.label(),
            method: cfg.method.name().into(),
            max_seq_len: cfg.max_seq_len,
            warmup: cfg.warmup,
            seeds: seeds.len(),
            mean_final_accuracy: mean,
            std_final_accuracy: std,
        });
        curves.extend(curve_sum.into_iter().map(|(round, s)| CurveRow {
            label: cfg.label(),
            method: cfg.method.name().into(),
            round,
            mean_test_accuracy: s / seeds.len() as f64,
        }));
        per_seed.push(finals);
    }
    Ok(Comparison {
        summary,
        curves,
        per_seed,
    })
}

/// Writes `summary.csv` and `curves.csv` into `dir`; returns their paths.
pub fn write_comparison(cmp: &Comparison, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let summary = dir.join("summary.csv");
    let curves = dir.join("curves.csv");
    write_csv(&summary, &cmp.summary)?;
    write_csv(&curves, &cmp.curves)?;
    Ok((summary, curves))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Configs that differ from `base` only in the maximum sequence length.
pub fn sweep_seq_len(base: &ExperimentConfig, lengths: &[usize]) -> Vec<ExperimentConfig> {
    lengths
        .iter()
        .map(|&l| ExperimentConfig {
            name: Some(format!("{}_L{l}", base.label())),
            max_seq_len: l,
            ..base.clone()
        })
        .collect()
}

/// Configs that differ from `base` only in the warm-up length.
pub fn sweep_warmup(base: &ExperimentConfig, warmups: &[usize]) -> Vec<ExperimentConfig> {
    warmups
        .iter()
        .map(|&w| ExperimentConfig {
            name: Some(format!("{}_W{w}", base.label())),
            warmup: w,
            ..base.clone()
        })
        .collect()
}
