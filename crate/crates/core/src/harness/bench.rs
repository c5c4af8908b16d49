//! Ablation benchmark: alignment variants crossed with color jitter, each
//! cell trained over a shared seed set, reported as mean test accuracy with
//! its range and the delta against the jitter-matched reference row.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::AlignmentVariant;
use crate::error::{Error, Result};
use crate::synth::{self, Dataset, SynthSpec};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::write_jsonl;
use super::train::{train, METRICS_FILE};

pub const REPORT_JSON: &str = "bench.json";
pub const REPORT_TEXT: &str = "bench.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub alignment: AlignmentVariant,
}

impl BenchRow {
    pub fn new(label: &str, alignment: AlignmentVariant) -> Self {
        BenchRow {
            label: label.to_string(),
            alignment,
        }
    }
}

/// One table: a dataset, its rows and the jitter settings crossed with them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: String,
    pub synth: SynthSpec,
    pub rows: Vec<BenchRow>,
    pub jitter: Vec<bool>,
    /// Index into `rows` of the row deltas are taken against.
    pub reference: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Shared by every cell except for alignment, jitter, seed and synth.
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub tables: Vec<TableSpec>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig::from_base(desk_base())
    }
}

/// Single-machine training budget for the bench: half the default train set
/// and a short schedule, so the full matrix fits in minutes per core.
pub fn desk_base() -> RunConfig {
    let mut base = RunConfig {
        epochs: 5,
        ..RunConfig::default()
    };
    base.synth.train_count = 1000;
    base
}

impl BenchConfig {
    /// Pose table (every alignment row, with and without jitter) plus the
    /// texture-only table, both built around `base`.
    pub fn from_base(base: RunConfig) -> Self {
        let pose = TableSpec {
            name: "pose".into(),
            synth: base.synth.clone(),
            rows: vec![
                BenchRow::new("Baseline (graph matching)", AlignmentVariant::GraphMatch),
                BenchRow::new("Self-attention, 3 layers", AlignmentVariant::SelfAttn { layers: 3 }),
                BenchRow::new("Self-attention, 1 layer", AlignmentVariant::SelfAttn { layers: 1 }),
                BenchRow::new("Cross-attention", AlignmentVariant::CrossAttn),
                BenchRow::new("No alignment", AlignmentVariant::None),
            ],
            jitter: vec![false, true],
            reference: 0,
        };
        let food = TableSpec {
            name: "food".into(),
            synth: SynthSpec {
                texture_only: true,
                ..base.synth.clone()
            },
            rows: vec![
                BenchRow::new("No alignment", AlignmentVariant::None),
                BenchRow::new("Self-attention, 3 layers", AlignmentVariant::SelfAttn { layers: 3 }),
            ],
            jitter: vec![false],
            reference: 0,
        };
        BenchConfig {
            base,
            seeds: vec![0, 1, 2],
            tables: vec![pose, food],
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("bench needs at least one seed".into()));
        }
        for t in &self.tables {
            if t.rows.is_empty() || t.jitter.is_empty() || t.reference >= t.rows.len() {
                return Err(Error::Config(format!("table '{}' has no rows, no jitter settings or a bad reference", t.name)));
            }
            for row in &t.rows {
                self.cell_config(t, row, false, self.seeds[0]).validate()?;
            }
        }
        Ok(())
    }

    fn cell_config(&self, table: &TableSpec, row: &BenchRow, jitter: bool, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            alignment: row.alignment,
            jitter,
            synth: table.synth.clone(),
            ..self.base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub alignment: AlignmentVariant,
    pub jitter: bool,
    pub seeds: Vec<u64>,
    /// Final test accuracy per seed, in `seeds` order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// `mean` minus the jitter-matched reference row's `mean`.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableResult {
    pub name: String,
    pub reference: String,
    pub cells: Vec<CellResult>,
}

impl TableResult {
    pub fn cell(&self, alignment: AlignmentVariant, jitter: bool) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.alignment == alignment && c.jitter == jitter)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub tables: Vec<TableResult>,
}

impl BenchReport {
    pub fn table(&self, name: &str) -> Option<&TableResult> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Aligned text table, accuracies in percent.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            let width = t.cells.iter().map(|c| c.label.len()).max().unwrap_or(0).max(5);
            let _ = writeln!(out, "[{}] deltas against '{}'", t.name, t.reference);
            let _ = writeln!(out, "{:<width$}  {:>6}  {:>15}  {:>7}", "row", "jitter", "accuracy (%)", "delta");
            for c in &t.cells {
                let half = (c.max - c.min) * 50.0;
                let delta = if c.label == t.reference {
                    "-".to_string()
                } else {
                    format!("{:+.2}", c.delta * 100.0)
                };
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>6}  {:>7.2} ± {:<5.2}  {:>7}",
                    c.label,
                    if c.jitter { "yes" } else { "no" },
                    c.mean * 100.0,
                    half,
                    delta
                );
            }
            out.push('\n');
        }
        out
    }
}

struct Job {
    table: usize,
    row: usize,
    jitter: bool,
    seed: u64,
}

/// Runs every cell for every seed. Independent runs execute in parallel on
/// the rayon pool; results do not depend on scheduling. With `out_dir`, each
/// run's metrics and checkpoint land in `runs/<table>/<variant>-<jitter>-s<seed>`
/// and the report in `bench.json` / `bench.txt`.
pub fn cmd_bench(config: &BenchConfig, out_dir: Option<&Path>) -> Result<BenchReport> {
    config.validate()?;
    let data: Vec<(Dataset, Dataset)> = config
        .tables
        .iter()
        .map(|t| synth::generate(&t.synth))
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for (ti, t) in config.tables.iter().enumerate() {
        for &jitter in &t.jitter {
            for ri in 0..t.rows.len() {
                for &seed in &config.seeds {
                    jobs.push(Job { table: ti, row: ri, jitter, seed });
                }
            }
        }
    }

    let accuracies: Vec<f64> = jobs
        .par_iter()
        .map(|job| {
            let table = &config.tables[job.table];
            let row = &table.rows[job.row];
            let run = config.cell_config(table, row, job.jitter, job.seed);
            let (train_set, test_set) = &data[job.table];
            let outcome = train(&run, train_set, test_set)?;
            if let Some(dir) = out_dir {
                let name = format!(
                    "{}-{}-s{}",
                    row.alignment,
                    if job.jitter { "jitter" } else { "plain" },
                    job.seed
                );
                let run_dir = dir.join("runs").join(&table.name).join(name);
                std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
                write_jsonl(&run_dir.join(METRICS_FILE), &outcome.records)?;
                Checkpoint::from_outcome(&run, &outcome).save(&run_dir)?;
            }
            outcome
                .final_test_accuracy()
                .ok_or_else(|| Error::Config("run produced no test record".into()))
        })
        .collect::<Result<_>>()?;

    let per_seed = config.seeds.len();
    let mut next = accuracies.chunks(per_seed);
    let mut tables = Vec::new();
    for t in &config.tables {
        let mut cells = Vec::new();
        for &jitter in &t.jitter {
            let mut group: Vec<CellResult> = t
                .rows
                .iter()
                .map(|row| {
                    let accs = next.next().expect("one chunk per cell").to_vec();
                    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                    CellResult {
                        label: row.label.clone(),
                        alignment: row.alignment,
                        jitter,
                        seeds: config.seeds.clone(),
                        min: accs.iter().copied().fold(f64::INFINITY, f64::min),
                        max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        accuracies: accs,
                        mean,
                        delta: 0.0,
                    }
                })
                .collect();
            let reference = group[t.reference].mean;
            for c in &mut group {
                c.delta = c.mean - reference;
            }
            cells.extend(group);
        }
        tables.push(TableResult {
            name: t.name.clone(),
            reference: t.rows[t.reference].label.clone(),
            cells,
        });
    }

    let report = BenchReport {
        config: config.clone(),
        tables,
    };
    if let Some(dir) = out_dir {
        let json = dir.join(REPORT_JSON);
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join(REPORT_TEXT);
        std::fs::write(&txt, report.render()).map_err(|e| Error::io(&txt, e))?;
    }
    Ok(report)
}
