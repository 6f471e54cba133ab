use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mean_std, median};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One per-seed measurement. PIS rows carry a quantity; whole-sequence
/// metrics (`rollout_mse`, `state_rmse_normalized`, `energy_drift`,
/// `r_stat`, ...) have none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub schema_version: u32,
    pub table: String,
    pub method: String,
    pub variant: String,
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantity: Option<String>,
    pub horizon: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

impl ReportRow {
    pub fn new(table: &str, method: &str, variant: &str, family: &str, quantity: Option<&str>, horizon: usize, seed: u64) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            table: table.into(),
            method: method.into(),
            variant: variant.into(),
            family: family.into(),
            quantity: quantity.map(Into::into),
            horizon,
            seed,
            metrics: BTreeMap::new(),
        }
    }

    pub fn with(mut self, metric: &str, value: f64) -> Self {
        self.metrics.insert(metric.into(), value);
        self
    }
}

/// Across-seed summary of one metric for one (table, method, variant, horizon).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub schema_version: u32,
    pub table: String,
    pub method: String,
    pub variant: String,
    pub horizon: usize,
    pub metric: String,
    /// Per-seed values in seed order.
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<AggregateRow>,
}

type GroupKey = (String, String, String, usize);

/// Per-seed values: PIS rows collapse to motion-balanced and row-wise mPIS;
/// other metrics average over families. Then mean, population std and
/// median across seeds.
pub fn aggregate(rows: &[ReportRow]) -> Vec<AggregateRow> {
    // group -> metric -> seed -> values
    let mut per: BTreeMap<GroupKey, BTreeMap<String, BTreeMap<u64, Vec<f64>>>> = BTreeMap::new();
    // group -> seed -> family -> pis values
    let mut pis: BTreeMap<GroupKey, BTreeMap<u64, BTreeMap<String, Vec<f64>>>> = BTreeMap::new();
    for r in rows {
        let key = (r.table.clone(), r.method.clone(), r.variant.clone(), r.horizon);
        for (m, &v) in &r.metrics {
            if r.quantity.is_some() && m == "pis" {
                pis.entry(key.clone()).or_default().entry(r.seed).or_default().entry(r.family.clone()).or_default().push(v);
            } else {
                per.entry(key.clone()).or_default().entry(m.clone()).or_default().entry(r.seed).or_default().push(v);
            }
        }
    }
    for (key, seeds) in pis {
        let target = per.entry(key).or_default();
        for (seed, families) in seeds {
            let fam_means: Vec<f64> = families.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
            let balanced = fam_means.iter().sum::<f64>() / fam_means.len() as f64;
            let all: Vec<f64> = families.values().flatten().copied().collect();
            let row_wise = all.iter().sum::<f64>() / all.len() as f64;
            target.entry("mpis_motion_balanced".into()).or_default().insert(seed, vec![balanced]);
            target.entry("mpis_row_wise".into()).or_default().insert(seed, vec![row_wise]);
        }
    }
    let mut out = Vec::new();
    for ((table, method, variant, horizon), metrics) in per {
        for (metric, seeds) in metrics {
            let per_seed: Vec<(u64, f64)> = seeds.into_iter().map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64)).collect();
            let xs: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
            let (mean, std) = mean_std(&xs);
            out.push(AggregateRow {
                schema_version: REPORT_SCHEMA_VERSION,
                table: table.clone(),
                method: method.clone(),
                variant: variant.clone(),
                horizon,
                metric,
                per_seed,
                mean,
                std,
                median: median(&xs),
            });
        }
    }
    out
}

impl ExperimentReport {
    pub fn from_rows(rows: Vec<ReportRow>) -> Self {
        let aggregates = aggregate(&rows);
        Self { rows, aggregates }
    }

    pub fn find(&self, table: &str, method: &str, variant: &str, horizon: usize, metric: &str) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.table == table && a.method == method && a.variant == variant && a.horizon == horizon && a.metric == metric)
    }

    /// Largest absolute difference between stored aggregates and those
    /// recomputed from the rows; errors if the sets differ in shape.
    pub fn verify(&self) -> Result<f64> {
        let fresh = aggregate(&self.rows);
        if fresh.len() != self.aggregates.len() {
            return Err(Error::Invalid(format!("{} stored aggregates, {} recomputed", self.aggregates.len(), fresh.len())));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.aggregates.iter().zip(&fresh) {
            if (&a.table, &a.method, &a.variant, a.horizon, &a.metric) != (&b.table, &b.method, &b.variant, b.horizon, &b.metric) {
                return Err(Error::Invalid(format!("aggregate key mismatch at {}/{}/{}", a.table, a.method, a.metric)));
            }
            for (x, y) in [(a.mean, b.mean), (a.std, b.std), (a.median, b.median)] {
                if !(x.is_nan() && y.is_nan()) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        Ok(worst)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_jsonl(&dir.join("rows.jsonl"), &self.rows)?;
        write_jsonl(&dir.join("aggregates.jsonl"), &self.aggregates)?;
        let md = dir.join("report.md");
        std::fs::write(&md, self.render()).map_err(|e| Error::io(&md, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let rows: Vec<ReportRow> = read_jsonl(&dir.join("rows.jsonl"))?;
        let agg_path = dir.join("aggregates.jsonl");
        let aggregates = if agg_path.exists() { read_jsonl(&agg_path)? } else { aggregate(&rows) };
        for r in &rows {
            if r.schema_version != REPORT_SCHEMA_VERSION {
                return Err(Error::Format {
                    path: dir.join("rows.jsonl").display().to_string(),
                    detail: format!("unsupported row schema version {}", r.schema_version),
                });
            }
        }
        Ok(Self { rows, aggregates })
    }

    /// Markdown tables, one per report table, metrics as columns.
    pub fn render(&self) -> String {
        let mut tables: BTreeMap<&str, Vec<&AggregateRow>> = BTreeMap::new();
        for a in &self.aggregates {
            tables.entry(&a.table).or_default().push(a);
        }
        let mut s = String::new();
        for (table, aggs) in tables {
            let metrics: Vec<&str> = {
                let mut m: Vec<&str> = aggs.iter().map(|a| a.metric.as_str()).collect();
                m.sort_unstable();
                m.dedup();
                m
            };
            let mut lines: BTreeMap<(&str, &str, usize), BTreeMap<&str, &AggregateRow>> = BTreeMap::new();
            for a in &aggs {
                lines.entry((&a.method, &a.variant, a.horizon)).or_default().insert(&a.metric, a);
            }
            let _ = writeln!(s, "## {table}\n");
            let _ = writeln!(s, "| method | variant | H | {} |", metrics.join(" | "));
            let _ = writeln!(s, "|---|---|---|{}", "---|".repeat(metrics.len()));
            for ((method, variant, h), cells) in lines {
                let vals: Vec<String> = metrics
                    .iter()
                    .map(|m| match cells.get(m) {
                        Some(a) if a.per_seed.len() > 1 => format!("{:.4e} ± {:.1e}", a.mean, a.std),
                        Some(a) => format!("{:.4e}", a.mean),
                        None => "-".into(),
                    })
                    .collect();
                let _ = writeln!(s, "| {method} | {variant} | {h} | {} |", vals.join(" | "));
            }
            s.push('\n');
        }
        s
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for it in items {
        let line = serde_json::to_string(it).map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format { path: path.display().to_string(), detail: format!("line {}: {e}", i + 1) })?);
    }
    Ok(out)
}
