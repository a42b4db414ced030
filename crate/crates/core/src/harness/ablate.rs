//! Grid of training runs over variant, upsampling ratio and glancing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::evaluate_model;
use super::train::{train, EpochRecord};
use crate::emission::Variant;
use crate::error::Result;
use crate::glancing::GlancingConfig;
use crate::lattice::EditSample;
use crate::loss::feasible;
use crate::metrics::DEFAULT_BUCKET_EDGES;
use crate::model::Model;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub variants: Vec<Variant>,
    pub upsample: Vec<usize>,
    pub glancing: Vec<bool>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            variants: vec![Variant::CopyAware, Variant::Vanilla],
            upsample: vec![2, 4, 6, 8],
            glancing: vec![true, false],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub variant: Variant,
    pub upsample: usize,
    pub glancing: bool,
}

impl GridPoint {
    pub fn label(&self) -> String {
        format!(
            "{}-T{}{}",
            self.variant.name(),
            self.upsample,
            if self.glancing { "" } else { "-noglat" }
        )
    }
}

impl AblationGrid {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &upsample in &self.upsample {
                for &glancing in &self.glancing {
                    out.push(GridPoint {
                        variant,
                        upsample,
                        glancing,
                    });
                }
            }
        }
        out
    }

    /// The base config specialised to one grid point.
    pub fn config_for(base: &RunConfig, point: &GridPoint) -> RunConfig {
        let mut c = base.clone();
        c.model.variant = point.variant;
        c.model.upsample = point.upsample;
        c.glancing = match (point.glancing, &base.glancing) {
            (false, _) => None,
            (true, Some(g)) => Some(g.clone()),
            (true, None) => Some(GlancingConfig::default()),
        };
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub point: GridPoint,
    pub config_hash: String,
    /// `None` when the run succeeded.
    pub error: Option<String>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub dev_em: f64,
    pub dev_f05: f64,
    pub dev_precision: f64,
    pub dev_recall: f64,
    /// Dev samples alignable under this ratio, percent.
    pub dev_feasible_pct: f64,
    pub curve: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base_hash: String,
    pub rows: Vec<AblationRow>,
}

/// Runs every grid point in order. A failed point is recorded and the grid
/// continues. `on_row` sees each row as it completes.
pub fn run_ablation(
    base: &RunConfig,
    grid: &AblationGrid,
    vocab: &Vocab,
    train_set: &[EditSample],
    dev: &[EditSample],
    on_row: &mut dyn FnMut(&AblationRow, Option<&Model>),
) -> AblationReport {
    let mut rows = Vec::new();
    for point in grid.points() {
        let cfg = AblationGrid::config_for(base, &point);
        let feasible_pct = 100.0 * dev.iter().filter(|s| feasible(s, point.upsample)).count() as f64
            / dev.len().max(1) as f64;
        let mut row = AblationRow {
            point: point.clone(),
            config_hash: cfg.resolved().hash(),
            error: None,
            epochs_run: 0,
            best_epoch: 0,
            dev_em: 0.0,
            dev_f05: 0.0,
            dev_precision: 0.0,
            dev_recall: 0.0,
            dev_feasible_pct: feasible_pct,
            curve: Vec::new(),
        };
        let result: Result<(Model, _)> = train(&cfg, vocab, train_set, dev, &mut |_| {}).and_then(|o| {
            let report = evaluate_model(&o.best_model, dev, cfg.decode_iterations, &DEFAULT_BUCKET_EDGES)?;
            row.config_hash = o.config_hash.clone();
            row.epochs_run = o.records.len();
            row.best_epoch = o.best_epoch;
            row.curve = o.records.clone();
            Ok((o.best_model, report))
        });
        match result {
            Ok((model, report)) => {
                row.dev_em = 100.0 * report.exact_match;
                row.dev_f05 = report.f05;
                row.dev_precision = report.precision;
                row.dev_recall = report.recall;
                on_row(&row, Some(&model));
            }
            Err(e) => {
                row.error = Some(e.to_string());
                on_row(&row, None);
            }
        }
        rows.push(row);
    }
    AblationReport {
        base_hash: base.resolved().hash(),
        rows,
    }
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>2} {:>5} {:>8} {:>8} {:>8} {:>8} {:>7} {:>9}  {:<16} status",
            "variant", "T", "glat", "dev EM", "P", "R", "F0.5", "epochs", "feasible", "config"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>2} {:>5} {:>8.2} {:>8.4} {:>8.4} {:>8.4} {:>7} {:>8.1}%  {:<16} {}",
                r.point.variant.name(),
                r.point.upsample,
                if r.point.glancing { "on" } else { "off" },
                r.dev_em,
                r.dev_precision,
                r.dev_recall,
                r.dev_f05,
                r.epochs_run,
                r.dev_feasible_pct,
                r.config_hash,
                r.error.as_deref().unwrap_or("ok")
            );
        }
        s
    }

    /// Dev EM per epoch, one column per grid point; missing epochs are empty.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch");
        for r in &self.rows {
            s.push(',');
            s.push_str(&r.point.label());
        }
        s.push('\n');
        let epochs = self.rows.iter().map(|r| r.curve.len()).max().unwrap_or(0);
        for e in 0..epochs {
            let _ = write!(s, "{}", e + 1);
            for r in &self.rows {
                s.push(',');
                if let Some(rec) = r.curve.get(e) {
                    let _ = write!(s, "{:.4}", rec.dev_em);
                }
            }
            s.push('\n');
        }
        s
    }
}
