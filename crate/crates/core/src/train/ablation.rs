use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Method, Split, SplitPlan, TrainConfig};
use super::data::SampleView;
use super::trainer::{evaluate, train_with_observer, LogRow};
use crate::binio;
use crate::error::{invalid, Result};
use crate::features::FeatureSet;

/// One row of the ablation table: a method with the knowledge-transfer term on or off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    pub method: Method,
    pub kt: bool,
    #[serde(default)]
    pub lambda1: Option<f64>,
    #[serde(default)]
    pub lambda2: Option<f64>,
}

impl AblationCell {
    pub fn new(name: &str, method: Method, kt: bool) -> Self {
        Self {
            name: name.into(),
            method,
            kt,
            lambda1: None,
            lambda2: None,
        }
    }

    pub fn config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            method: self.method,
            seed,
            kt: Some(self.kt),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub base: TrainConfig,
    pub split: Option<SplitPlan>,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
    /// Cell whose RMSE anchors the localization gain column.
    pub baseline: String,
    /// Cell whose accuracy anchors the classification gain column.
    pub pcp_baseline: String,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self::table()
    }
}

impl AblationGrid {
    /// CR-only and PCP-only with and without KT, equal weights, hand-set weights, learned weights.
    pub fn table() -> Self {
        Self {
            base: TrainConfig::desk(),
            split: None,
            seeds: vec![1, 2, 3],
            cells: vec![
                AblationCell::new("cr_only", Method::Dcnn, false),
                AblationCell::new("cr_only_kt", Method::Dcnn, true),
                AblationCell::new("pcp_only", Method::PcpOnly, false),
                AblationCell::new("pcp_only_kt", Method::PcpOnly, true),
                AblationCell::new("mda_unweighted", Method::MdaUnweighted, true),
                AblationCell::new("mda", Method::Mda, true),
                AblationCell::new("hda", Method::Hda, true),
            ],
            baseline: "cr_only".into(),
            pcp_baseline: "pcp_only".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.cells.is_empty() {
            return Err(invalid("ablation grid needs at least one seed and one cell"));
        }
        for (i, c) in self.cells.iter().enumerate() {
            if self.cells[..i].iter().any(|d| d.name == c.name) {
                return Err(invalid(format!("duplicate ablation cell `{}`", c.name)));
            }
            c.config(&self.base, self.seeds[0]).validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_rmse: f64,
    pub test_accuracy: f64,
    pub val_rmse: f64,
    pub best_epoch: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub lambda1: f64,
    pub lambda2: f64,
    pub runs: Vec<SeedResult>,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    /// `(baseline − rmse)/rmse`; `None` for the baseline and cells without a CR term.
    pub loc_gain: Option<f64>,
    /// `(acc − baseline)/baseline`; `None` for the baseline and cells without a PCP term.
    pub pcp_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Progress events emitted while the grid runs.
pub enum AblationEvent<'a> {
    Start { cell: &'a AblationCell, seed: u64 },
    Log(&'a LogRow),
    Done { cell: &'a AblationCell, result: &'a SeedResult },
}

pub fn run_ablation(fs: &FeatureSet, split: &SplitPlan, grid: &AblationGrid) -> Result<AblationTable> {
    run_ablation_with_observer(fs, split, grid, &mut |_| {})
}

/// Trains every cell for every seed and evaluates the kept checkpoint on the target scenes.
pub fn run_ablation_with_observer(
    fs: &FeatureSet,
    split: &SplitPlan,
    grid: &AblationGrid,
    observer: &mut dyn FnMut(AblationEvent),
) -> Result<AblationTable> {
    grid.validate()?;
    let test = SampleView::new(fs, split.range(Split::Target).clone())?;
    let mut rows = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let mut runs = Vec::with_capacity(grid.seeds.len());
        for &seed in &grid.seeds {
            observer(AblationEvent::Start { cell, seed });
            let cfg = cell.config(&grid.base, seed);
            let t0 = Instant::now();
            let out = train_with_observer(fs, split, &cfg, &mut |r| observer(AblationEvent::Log(r)))?;
            let m = evaluate(&out.checkpoint, &test, cfg.eval_chunk)?;
            let result = SeedResult {
                seed,
                test_rmse: m.rmse,
                test_accuracy: m.accuracy,
                val_rmse: out.best_val.rmse,
                best_epoch: out.best_epoch,
                seconds: t0.elapsed().as_secs_f64(),
            };
            observer(AblationEvent::Done { cell, result: &result });
            runs.push(result);
        }
        let (rmse_mean, rmse_std) = mean_std(&runs.iter().map(|r| r.test_rmse).collect::<Vec<_>>());
        let (acc_mean, acc_std) = mean_std(&runs.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
        let (lambda1, lambda2) = cell.config(&grid.base, 0).task_weights();
        rows.push(AblationRow {
            cell: cell.clone(),
            lambda1,
            lambda2,
            runs,
            rmse_mean,
            rmse_std,
            acc_mean,
            acc_std,
            loc_gain: None,
            pcp_gain: None,
        });
    }
    let find = |name: &str| rows.iter().find(|r| r.cell.name == name).map(|r| (r.rmse_mean, r.acc_mean));
    let loc_base = find(&grid.baseline).map(|b| b.0);
    let pcp_base = find(&grid.pcp_baseline).map(|b| b.1);
    for row in &mut rows {
        let hda = row.cell.method == Method::Hda;
        if let Some(b) = loc_base.filter(|_| row.cell.name != grid.baseline && (hda || row.lambda1 > 0.0)) {
            row.loc_gain = Some((b - row.rmse_mean) / row.rmse_mean);
        }
        if let Some(b) = pcp_base.filter(|_| row.cell.name != grid.pcp_baseline && (hda || row.lambda2 > 0.0)) {
            row.pcp_gain = Some((row.acc_mean - b) / b);
        }
    }
    Ok(AblationTable { rows })
}

pub const ABLATION_COLUMNS: [&str; 12] = [
    "cell", "method", "kt", "lambda1", "lambda2", "seeds", "rmse_mean", "rmse_std", "acc_mean", "acc_std", "loc_gain",
    "pcp_gain",
];

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell.name == name)
    }

    /// One line per cell; empty gain fields mark the baselines.
    pub fn to_csv(&self) -> String {
        let mut out = ABLATION_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let gain = |g: Option<f64>| g.map(|v| v.to_string()).unwrap_or_default();
            let (l1, l2) = if r.cell.method == Method::Hda {
                (String::new(), String::new())
            } else {
                (r.lambda1.to_string(), r.lambda2.to_string())
            };
            let _ = writeln!(
                out,
                "{},{},{},{l1},{l2},{},{},{},{},{},{},{}",
                r.cell.name,
                r.cell.method,
                r.cell.kt,
                r.runs.len(),
                r.rmse_mean,
                r.rmse_std,
                r.acc_mean,
                r.acc_std,
                gain(r.loc_gain),
                gain(r.pcp_gain),
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        binio::write_bytes(path, self.to_csv().as_bytes())
    }
}
