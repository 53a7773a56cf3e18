//! Seed sweeps over the regularizer ablations with median summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dropsplat::regularizer::{DropMode, SelectCriterion};
use dropsplat::trainer::{train, LogRecord, Regularizer};
use serde::{Deserialize, Serialize};

use crate::config::{self, FileConfig, SceneArgs};

/// Final metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub table: String,
    pub variant: String,
    pub seed: u64,
    pub train_psnr: f64,
    pub test_psnr: f64,
    pub train_ssim: f64,
    pub test_ssim: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub seeds: usize,
    pub train_psnr: f64,
    pub test_psnr: f64,
    pub train_ssim: f64,
    pub test_ssim: f64,
    pub gap: f64,
}

/// The variants of each ablation table in row order.
pub fn table_variants(table: u8, gamma: f64, lambda_reg: f64) -> Vec<Regularizer> {
    let drop = Regularizer::DropGaussian { gamma, mode: DropMode::Progressive };
    match table {
        5 => {
            let mut v = vec![Regularizer::None];
            for mode in [DropMode::Fixed, DropMode::Progressive] {
                for g in [0.1, 0.2, 0.3] {
                    v.push(Regularizer::DropGaussian { gamma: g, mode });
                }
            }
            v
        }
        6 => vec![
            drop,
            Regularizer::Selective { criterion: SelectCriterion::Gradient, gamma, mode: DropMode::Progressive },
            Regularizer::Selective { criterion: SelectCriterion::Distance, gamma, mode: DropMode::Progressive },
        ],
        7 => vec![
            drop,
            Regularizer::L1 { criterion: SelectCriterion::Gradient, lambda_reg },
            Regularizer::L1 { criterion: SelectCriterion::Distance, lambda_reg },
        ],
        _ => Vec::new(),
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Medians per variant, keeping the first-seen variant order.
pub fn summarize(rows: &[RunRow]) -> Vec<SummaryRow> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.variant.as_str()) {
            order.push(r.variant.as_str());
        }
        groups.entry(&r.variant).or_default().push(r);
    }
    order
        .into_iter()
        .map(|v| {
            let g = &groups[v];
            let col = |f: fn(&RunRow) -> f64| median(&mut g.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                variant: v.to_string(),
                seeds: g.len(),
                train_psnr: col(|r| r.train_psnr),
                test_psnr: col(|r| r.test_psnr),
                train_ssim: col(|r| r.train_ssim),
                test_ssim: col(|r| r.test_ssim),
                gap: col(|r| r.gap),
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every table over `seeds` seeds; runs shared between tables are
/// trained once.
pub fn run(
    base: &FileConfig,
    scene_args: &SceneArgs,
    tables: &[u8],
    seeds: u64,
    out: &Path,
    mut progress: impl FnMut(&str),
) -> anyhow::Result<BTreeMap<u8, Vec<SummaryRow>>> {
    fs::create_dir_all(out.join("runs"))?;
    let (gamma, lambda_reg) = match base.train.regularizer {
        Regularizer::DropGaussian { gamma, .. } | Regularizer::Selective { gamma, .. } => (gamma, 1e-3),
        Regularizer::L1 { lambda_reg, .. } => (0.2, lambda_reg),
        Regularizer::None => (0.2, 1e-3),
    };
    let mut cache: BTreeMap<(String, u64), LogRecord> = BTreeMap::new();
    let mut rows: BTreeMap<u8, Vec<RunRow>> = BTreeMap::new();
    for seed in 0..seeds {
        let scene = config::load(base, scene_args, seed)?;
        for &table in tables {
            for reg in table_variants(table, gamma, lambda_reg) {
                let label = reg.label();
                let key = (label.clone(), seed);
                if !cache.contains_key(&key) {
                    progress(&format!("seed {seed} {label}"));
                    let mut cfg = base.train.clone();
                    cfg.seed = seed;
                    cfg.regularizer = reg;
                    let outcome = train(&scene.bundle, &cfg)?;
                    fs::write(out.join("runs").join(format!("{label}_seed{seed}.csv")), outcome.log.to_csv())?;
                    let last = *outcome.log.last().ok_or_else(|| anyhow::anyhow!("run logged no evaluations"))?;
                    cache.insert(key.clone(), last);
                }
                let r = &cache[&key];
                rows.entry(table).or_default().push(RunRow {
                    table: format!("table{table}"),
                    variant: label,
                    seed,
                    train_psnr: r.train_psnr,
                    test_psnr: r.test_psnr,
                    train_ssim: r.train_ssim,
                    test_ssim: r.test_ssim,
                    gap: r.train_psnr - r.test_psnr,
                });
            }
        }
    }
    let mut summaries = BTreeMap::new();
    for (table, rs) in rows {
        let summary = summarize(&rs);
        write_csv(&out.join(format!("table{table}_runs.csv")), &rs)?;
        write_csv(&out.join(format!("table{table}_summary.csv")), &summary)?;
        summaries.insert(table, summary);
    }
    Ok(summaries)
}
