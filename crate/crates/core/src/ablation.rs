//! Mapping × activation grid over the classification recipe.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{AugmentConfig, ImageSet};
use crate::engine::{EpochMetrics, MetricsSink, Split, TrainConfig};
use crate::error::{QuanError, Result};
use crate::layers::ActivationKind;
use crate::mapping::MappingStrategy;
use crate::models::{train_classifier, ClassifierConfig};

pub const CELLS_DIR: &str = "cells";
pub const SUMMARY_FILE: &str = "ranking.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub mapping: MappingStrategy,
    pub activation: ActivationKind,
    /// Last eval record, or the last train record when there is no eval split.
    /// `None` when training diverged.
    pub last: Option<EpochMetrics>,
    /// Why training stopped early, e.g. a non-finite gradient.
    pub failure: Option<String>,
    pub metrics_path: PathBuf,
}

impl AblationCell {
    /// Final accuracy; a diverged cell scores 0.
    pub fn accuracy(&self) -> f64 {
        self.last.map_or(0.0, |m| m.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    /// Cells by final accuracy, best first; ties keep grid order.
    pub fn ranked_cells(&self) -> Vec<&AblationCell> {
        let mut v: Vec<&AblationCell> = self.cells.iter().collect();
        v.sort_by(|a, b| b.accuracy().total_cmp(&a.accuracy()));
        v
    }

    /// Mapping strategies by mean final accuracy over activations, best first.
    pub fn ranked_mappings(&self) -> Vec<(MappingStrategy, f64)> {
        let mut v: Vec<(MappingStrategy, f64)> = MappingStrategy::ALL
            .into_iter()
            .filter_map(|m| {
                let accs: Vec<f64> = self.cells.iter().filter(|c| c.mapping == m).map(AblationCell::accuracy).collect();
                (!accs.is_empty()).then(|| (m, accs.iter().sum::<f64>() / accs.len() as f64))
            })
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("rank,mapping,activation,split,accuracy,loss,status\n");
        for (r, c) in self.ranked_cells().into_iter().enumerate() {
            let (split, acc, loss) = match c.last {
                Some(m) => (m.split.to_string(), m.accuracy.to_string(), m.loss.to_string()),
                None => ("-".into(), "nan".into(), "nan".into()),
            };
            let status = if c.failure.is_some() { "diverged" } else { "ok" };
            writeln!(s, "{},{},{},{split},{acc},{loss},{status}", r + 1, c.mapping, c.activation)
                .expect("writing to a String");
        }
        s
    }
}

pub fn cell_file_name(mapping: MappingStrategy, activation: ActivationKind) -> String {
    format!("{mapping}_{activation}.csv")
}

/// Trains every (mapping, activation) pair with identical data order and
/// initialization seed. Writes one metrics CSV per cell under
/// `out_dir/cells` and the ranking to `out_dir/ranking.csv`. A cell whose
/// training hits a numeric failure is kept, marked diverged and ranked last;
/// any other error aborts the grid.
pub fn run_ablation(
    train: &ImageSet,
    eval: Option<&ImageSet>,
    model: ClassifierConfig,
    cfg: &TrainConfig,
    augment: Option<AugmentConfig>,
    out_dir: &Path,
) -> Result<AblationReport> {
    cfg.validate()?;
    let cells_dir = out_dir.join(CELLS_DIR);
    fs::create_dir_all(&cells_dir).map_err(|e| QuanError::io(&cells_dir, e))?;
    let mut report = AblationReport::default();
    for mapping in MappingStrategy::ALL {
        for activation in ActivationKind::ALL {
            let cell_cfg = TrainConfig {
                mapping,
                activation,
                ..cfg.clone()
            };
            let path = cells_dir.join(cell_file_name(mapping, activation));
            let mut sink = MetricsSink::create(&path)?;
            let (last, failure) = match train_classifier(train, eval, model, &cell_cfg, augment, &mut sink) {
                Ok((_, history)) => {
                    let want = if eval.is_some() { Split::Eval } else { Split::Train };
                    let last = *history
                        .iter()
                        .rev()
                        .find(|m| m.split == want)
                        .ok_or_else(|| QuanError::Numeric("training produced no metrics".into()))?;
                    (Some(last), None)
                }
                Err(QuanError::Numeric(msg)) => (None, Some(msg)),
                Err(e) => return Err(e),
            };
            report.cells.push(AblationCell {
                mapping,
                activation,
                last,
                failure,
                metrics_path: path,
            });
        }
    }
    let summary = out_dir.join(SUMMARY_FILE);
    fs::write(&summary, report.summary_csv()).map_err(|e| QuanError::io(&summary, e))?;
    Ok(report)
}
