//! Parameter sweeps: one independent run per (grid value, seed) cell, plus a
//! deterministic report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::{run_llm, run_selftrain, ExperimentConfig, ExperimentError, RunResult, SeedTree};
use crate::llm::{LlmClient, LlmMode};
use crate::metrics::{summarize, Summary};
use crate::seed;
use crate::strategies::StrategyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ConfThreshold,
    EntThreshold,
    ScoreThreshold,
    NShot,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::ConfThreshold => "conf_threshold",
            SweepAxis::EntThreshold => "ent_threshold",
            SweepAxis::ScoreThreshold => "score_threshold",
            SweepAxis::NShot => "n_shot",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepAxis::ConfThreshold | SweepAxis::ScoreThreshold => {
                (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
            }
            SweepAxis::EntThreshold => (1..=10).map(|i| i as f64 / 10.0).collect(),
            SweepAxis::NShot => vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
        }
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conf_threshold" => Ok(SweepAxis::ConfThreshold),
            "ent_threshold" => Ok(SweepAxis::EntThreshold),
            "score_threshold" => Ok(SweepAxis::ScoreThreshold),
            "n_shot" => Ok(SweepAxis::NShot),
            other => Err(format!("unknown sweep axis {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SweepError {
    #[error("grid is empty")]
    EmptyGrid,
    #[error("grid is not strictly monotone")]
    NotMonotone,
    #[error("seed list is empty")]
    NoSeeds,
    #[error("grid value {0} is not valid for this axis")]
    BadValue(f64),
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.grid.is_empty() {
            return Err(SweepError::EmptyGrid);
        }
        if self.seeds.is_empty() {
            return Err(SweepError::NoSeeds);
        }
        if let Some(&v) = self.grid.iter().find(|v| !v.is_finite()) {
            return Err(SweepError::BadValue(v));
        }
        let up = self.grid.windows(2).all(|w| w[0] < w[1]);
        let down = self.grid.windows(2).all(|w| w[0] > w[1]);
        if !(up || down) {
            return Err(SweepError::NotMonotone);
        }
        if self.axis == SweepAxis::NShot {
            if let Some(&v) = self.grid.iter().find(|v| v.fract() != 0.0 || **v < 1.0) {
                return Err(SweepError::BadValue(v));
            }
        }
        Ok(())
    }
}

/// Seed for the cell at (`seed`, `axis`, `value`).
pub fn cell_seed(seed: u64, axis: SweepAxis, value: f64) -> u64 {
    seed::derive_u64(seed::derive(seed, axis.name()), value.to_bits())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    pub cell_seed: u64,
}

/// What a cell reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub num_added: usize,
    pub pseudo_label_accuracy: Option<f64>,
    pub test_macro_f1: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub cell_seed: u64,
    pub num_added: Option<usize>,
    pub pseudo_label_accuracy: Option<f64>,
    pub test_macro_f1: Option<f64>,
    pub test_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Run every cell, in parallel, and return rows in grid-major, seed-minor
/// order. A failing cell becomes an error row.
pub fn run_sweep<F>(spec: &SweepSpec, cell: F) -> Result<Vec<SweepRow>, SweepError>
where
    F: Fn(&SweepCell) -> Result<CellOutcome, String> + Sync,
{
    spec.validate()?;
    let cells: Vec<SweepCell> = spec
        .grid
        .iter()
        .flat_map(|&value| {
            spec.seeds.iter().map(move |&seed| SweepCell {
                axis: spec.axis,
                value,
                seed,
                cell_seed: cell_seed(seed, spec.axis, value),
            })
        })
        .collect();
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; cells.len()]);
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(cells.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(c) = cells.get(i) else { break };
                let row = match cell(c) {
                    Ok(o) => SweepRow {
                        value: c.value,
                        seed: c.seed,
                        cell_seed: c.cell_seed,
                        num_added: Some(o.num_added),
                        pseudo_label_accuracy: o.pseudo_label_accuracy,
                        test_macro_f1: Some(o.test_macro_f1),
                        test_accuracy: Some(o.test_accuracy),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("sweep cell {}={} seed {} failed: {e}", c.axis.name(), c.value, c.seed);
                        SweepRow {
                            value: c.value,
                            seed: c.seed,
                            cell_seed: c.cell_seed,
                            num_added: None,
                            pseudo_label_accuracy: None,
                            test_macro_f1: None,
                            test_accuracy: None,
                            error: Some(e),
                        }
                    }
                };
                rows.lock().unwrap()[i] = Some(row);
            });
        }
    });
    Ok(rows.into_inner().unwrap().into_iter().map(|r| r.expect("every cell ran")).collect())
}

/// Apply a grid value to a base config.
pub fn apply_axis(base: &ExperimentConfig, axis: SweepAxis, value: f64) -> ExperimentConfig {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::ConfThreshold | SweepAxis::EntThreshold => {
            cfg.strategy = StrategyConfig {
                strategy: axis.name().into(),
                t: Some(value),
                batch_cap: base.strategy.batch_cap,
                ..Default::default()
            };
        }
        SweepAxis::NShot => cfg.n_shot = value as usize,
        SweepAxis::ScoreThreshold => {
            let mut llm = cfg.llm.take().unwrap_or_default();
            llm.mode = LlmMode::ObjConfScore;
            llm.threshold = Some(value);
            cfg.llm = Some(llm);
        }
    }
    cfg
}

fn outcome(r: RunResult) -> CellOutcome {
    CellOutcome {
        num_added: r.num_added,
        pseudo_label_accuracy: r.metrics.labeling_accuracy,
        test_macro_f1: r.metrics.macro_f1,
        test_accuracy: r.metrics.accuracy,
    }
}

/// Run one cell of an experiment sweep. Threshold and n-shot axes run
/// self-training (or the LLM pipeline when the base config has an `[llm]`
/// block and the axis is n-shot); the score axis runs the obj-conf-score
/// pipeline with a client from `make_client`.
pub fn experiment_cell<C, M>(
    base: &ExperimentConfig,
    cell: &SweepCell,
    make_client: M,
) -> Result<CellOutcome, ExperimentError>
where
    C: LlmClient,
    M: Fn(&ExperimentConfig) -> Result<C, ExperimentError>,
{
    let cfg = apply_axis(base, cell.axis, cell.value);
    cfg.validate()?;
    let seeds = SeedTree::for_cell(cell.seed, cell.cell_seed);
    let use_llm = cell.axis == SweepAxis::ScoreThreshold || (cell.axis == SweepAxis::NShot && cfg.llm.is_some());
    let r = if use_llm {
        run_llm(&cfg, seeds, &make_client(&cfg)?)?
    } else {
        run_selftrain(&cfg, seeds)?
    };
    Ok(outcome(r))
}

/// Per grid value summaries over the successful rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub value: f64,
    pub runs: usize,
    pub failed: usize,
    pub num_added: Option<Summary>,
    pub pseudo_label_accuracy: Option<Summary>,
    pub test_macro_f1: Option<Summary>,
    pub test_accuracy: Option<Summary>,
}

pub fn aggregate(rows: &[SweepRow]) -> Vec<Aggregate> {
    let mut values: Vec<f64> = Vec::new();
    for r in rows {
        if !values.iter().any(|v| v.to_bits() == r.value.to_bits()) {
            values.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|v| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.value.to_bits() == v.to_bits()).collect();
            let col = |f: &dyn Fn(&SweepRow) -> Option<f64>| {
                let xs: Vec<f64> = cell.iter().filter_map(|r| f(r)).collect();
                summarize(&xs)
            };
            Aggregate {
                value: v,
                runs: cell.len(),
                failed: cell.iter().filter(|r| r.error.is_some()).count(),
                num_added: col(&|r| r.num_added.map(|n| n as f64)),
                pseudo_label_accuracy: col(&|r| r.pseudo_label_accuracy),
                test_macro_f1: col(&|r| r.test_macro_f1),
                test_accuracy: col(&|r| r.test_accuracy),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

#[derive(Serialize)]
struct SweepDoc<'a> {
    axis: SweepAxis,
    rows: &'a [SweepRow],
    aggregates: Vec<Aggregate>,
}

/// Series for a bar-and-two-lines chart: bars are the mean number of added
/// instances, lines the mean pseudo-label accuracy and test macro-F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub axis: SweepAxis,
    pub x: Vec<f64>,
    pub bars: Vec<Option<f64>>,
    pub pseudo_label_accuracy: Vec<Option<f64>>,
    pub test_macro_f1: Vec<Option<f64>>,
}

fn cell_text<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn tsv_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

pub fn render_tsv(table: &SweepTable) -> String {
    let mut out = String::from(
        "kind\tvalue\tseed\tnum_added\tpseudo_label_accuracy\ttest_macro_f1\ttest_accuracy\terror\n",
    );
    for r in &table.rows {
        let _ = writeln!(
            out,
            "run\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.value,
            r.seed,
            cell_text(r.num_added),
            cell_text(r.pseudo_label_accuracy),
            cell_text(r.test_macro_f1),
            cell_text(r.test_accuracy),
            tsv_field(r.error.as_deref().unwrap_or("")),
        );
    }
    for a in aggregate(&table.rows) {
        for (kind, pick) in [
            ("mean", (|s: &Summary| Some(s.mean)) as fn(&Summary) -> Option<f64>),
            ("ci95", |s: &Summary| s.ci95),
        ] {
            let f = |s: &Option<Summary>| cell_text(s.as_ref().and_then(pick));
            let _ = writeln!(
                out,
                "{kind}\t{}\t\t{}\t{}\t{}\t{}\t",
                a.value,
                f(&a.num_added),
                f(&a.pseudo_label_accuracy),
                f(&a.test_macro_f1),
                f(&a.test_accuracy),
            );
        }
    }
    out
}

pub fn plot_data(table: &SweepTable) -> PlotData {
    let aggs = aggregate(&table.rows);
    let mean = |s: &Option<Summary>| s.as_ref().map(|s| s.mean);
    PlotData {
        axis: table.axis,
        x: aggs.iter().map(|a| a.value).collect(),
        bars: aggs.iter().map(|a| mean(&a.num_added)).collect(),
        pseudo_label_accuracy: aggs.iter().map(|a| mean(&a.pseudo_label_accuracy)).collect(),
        test_macro_f1: aggs.iter().map(|a| mean(&a.test_macro_f1)).collect(),
    }
}

/// Write `sweep.tsv`, `sweep.json` and `plotdata.json` into `dir`.
pub fn render_report(table: &SweepTable, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty sweep table"));
    }
    fs::create_dir_all(dir)?;
    let doc = SweepDoc {
        axis: table.axis,
        rows: &table.rows,
        aggregates: aggregate(&table.rows),
    };
    let files = [
        ("sweep.tsv", render_tsv(table)),
        ("sweep.json", serde_json::to_string_pretty(&doc).expect("serializable") + "\n"),
        ("plotdata.json", serde_json::to_string_pretty(&plot_data(table)).expect("serializable") + "\n"),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}

/// Read back the raw rows of a `sweep.json`.
pub fn load_table(path: &Path) -> Result<SweepTable, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}
