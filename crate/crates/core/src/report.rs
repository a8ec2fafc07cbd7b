//! Benchmark table over metric files: one row per arm, per-domain WER/EWER
//! plus the pooled average, medians across seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::AVERAGE;
use crate::pipeline::{Lineage, MetricFile, BASELINE};

const ROW_ORDER: [(&str, &str); 6] = [
    (BASELINE, "Baseline"),
    ("self", "Self-training"),
    ("raft", "RAFT"),
    ("dpo", "DPO"),
    ("grpo", "GRPO"),
    ("rescore", "Rescore"),
];

pub fn row_label(algo: &str) -> String {
    if let Some((_, l)) = ROW_ORDER.iter().find(|(a, _)| *a == algo) {
        return l.to_string();
    }
    match algo.strip_suffix("-nocontext") {
        Some(base) => format!("{} (generic prompt)", row_label(base)),
        None => algo.to_string(),
    }
}

/// Median with min and max over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Some(Self {
            median,
            min: v[0],
            max: v[n - 1],
            n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub wer: Option<Stat>,
    pub ewer: Option<Stat>,
    pub ter: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub algo: String,
    pub label: String,
    pub seeds: Vec<u64>,
    /// Keyed by domain, plus `average`.
    pub cells: BTreeMap<String, Cell>,
    /// `(self EWER - EWER) / self EWER` in percent, on median average EWER.
    pub rel_ewer_vs_self: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub domains: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn row(&self, algo: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.algo == algo)
    }
}

/// Refuses inputs that mix studies, or seeds whose arms disagree on world,
/// reference policy or reward LM, or repeat an arm.
pub fn check_lineage(files: &[MetricFile]) -> Result<()> {
    let Some(first) = files.first() else {
        return Err(Error::Usage("report needs at least one metric file".into()));
    };
    let mut per_seed: BTreeMap<u64, &Lineage> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for f in files {
        let l = &f.lineage;
        if l.experiment != first.lineage.experiment {
            return Err(Error::Lineage(format!(
                "{} (seed {}) comes from a different config than {} (seed {})",
                f.report.algo, l.seed, first.report.algo, first.lineage.seed
            )));
        }
        if l.seed != f.report.seed {
            return Err(Error::Lineage(format!("{} has inconsistent seeds", f.report.algo)));
        }
        if !seen.insert((f.report.algo.clone(), l.seed)) {
            return Err(Error::Lineage(format!(
                "{} appears twice for seed {}",
                f.report.algo, l.seed
            )));
        }
        match per_seed.get(&l.seed) {
            None => {
                per_seed.insert(l.seed, l);
            }
            Some(other) => {
                let lm_clash = !l.lm.is_empty() && !other.lm.is_empty() && l.lm != other.lm;
                if l.world != other.world || l.reference != other.reference || lm_clash {
                    return Err(Error::Lineage(format!(
                        "seed {}: {} disagrees with other arms on world, reference or reward LM",
                        l.seed, f.report.algo
                    )));
                }
                if other.lm.is_empty() {
                    per_seed.insert(l.seed, l);
                }
            }
        }
    }
    Ok(())
}

pub fn build_table(files: &[MetricFile]) -> Result<Table> {
    check_lineage(files)?;
    let mut domains: Vec<String> = Vec::new();
    for f in files {
        for r in &f.report.rows {
            if r.domain != AVERAGE && !domains.contains(&r.domain) {
                domains.push(r.domain.clone());
            }
        }
    }
    let mut algos: Vec<String> = ROW_ORDER
        .iter()
        .map(|(a, _)| a.to_string())
        .filter(|a| files.iter().any(|f| &f.report.algo == a))
        .collect();
    let extra: BTreeSet<&String> = files
        .iter()
        .map(|f| &f.report.algo)
        .filter(|a| !ROW_ORDER.iter().any(|(o, _)| o == a))
        .collect();
    algos.extend(extra.into_iter().cloned());

    let mut rows = Vec::new();
    for algo in algos {
        let mine: Vec<&MetricFile> = files.iter().filter(|f| f.report.algo == algo).collect();
        let mut cells = BTreeMap::new();
        for d in domains.iter().map(String::as_str).chain([AVERAGE]) {
            let pick = |f: fn(&crate::eval::MetricRow) -> Option<f64>| -> Option<Stat> {
                let v: Vec<f64> = mine.iter().filter_map(|m| m.report.row(d).and_then(f)).collect();
                Stat::of(&v)
            };
            cells.insert(
                d.to_string(),
                Cell {
                    wer: pick(|r| r.wer),
                    ewer: pick(|r| r.ewer),
                    ter: pick(|r| r.ter),
                },
            );
        }
        let mut seeds: Vec<u64> = mine.iter().map(|m| m.report.seed).collect();
        seeds.sort_unstable();
        rows.push(TableRow {
            label: row_label(&algo),
            algo,
            seeds,
            cells,
            rel_ewer_vs_self: None,
        });
    }
    let self_ewer = rows
        .iter()
        .find(|r| r.algo == "self")
        .and_then(|r| r.cells[AVERAGE].ewer)
        .map(|s| s.median);
    if let Some(base) = self_ewer.filter(|b| *b > 0.0) {
        for r in rows.iter_mut().filter(|r| r.algo != "self" && r.algo != BASELINE) {
            r.rel_ewer_vs_self = r.cells[AVERAGE].ewer.map(|s| 100.0 * (base - s.median) / base);
        }
    }
    Ok(Table { domains, rows })
}

fn fmt_stat(s: Option<Stat>, spread: bool) -> String {
    match s {
        None => "-".into(),
        Some(s) if spread && s.n > 1 => format!("{:.2} [{:.2},{:.2}]", s.median, s.min, s.max),
        Some(s) => format!("{:.2}", s.median),
    }
}

/// Plain-text table. Multi-seed averages carry `[min,max]`.
pub fn render(table: &Table) -> String {
    let mut header = vec!["".to_string()];
    for d in &table.domains {
        header.push(format!("{d} WER"));
        header.push(format!("{d} EWER"));
    }
    header.extend(["Avg WER".into(), "Avg EWER".into(), "Avg TER".into(), "EWER vs self".into(), "seeds".into()]);
    let mut lines = vec![header];
    for r in &table.rows {
        let mut line = vec![r.label.clone()];
        for d in &table.domains {
            let c = &r.cells[d];
            line.push(fmt_stat(c.wer, false));
            line.push(fmt_stat(c.ewer, false));
        }
        let a = &r.cells[AVERAGE];
        line.push(fmt_stat(a.wer, true));
        line.push(fmt_stat(a.ewer, true));
        line.push(fmt_stat(a.ter, false));
        line.push(match r.rel_ewer_vs_self {
            Some(x) => format!("{x:+.1}%"),
            None => "-".into(),
        });
        line.push(r.seeds.len().to_string());
        lines.push(line);
    }
    let cols = lines[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let cells: Vec<String> = l
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}
