//! Edit-distance alignment and the WER / EWER / TER metrics.
//!
//! WER is computed on normalized words (lowercase, punctuation removed),
//! TER on raw space-separated tokens. EWER counts substitutions and
//! deletions of annotated entity positions in the reference; insertions
//! have no reference anchor and are never counted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditKind {
    Match,
    Substitute,
    Delete,
    Insert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: EditKind,
    pub ref_pos: Option<usize>,
    pub hyp_pos: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub matches: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

impl Alignment {
    pub fn counts(&self) -> EditCounts {
        let mut c = EditCounts::default();
        for op in &self.ops {
            match op.kind {
                EditKind::Match => c.matches += 1,
                EditKind::Substitute => c.substitutions += 1,
                EditKind::Delete => c.deletions += 1,
                EditKind::Insert => c.insertions += 1,
            }
        }
        c
    }

    pub fn cost(&self) -> usize {
        self.counts().errors()
    }
}

/// Minimal unit-cost alignment. Among equal-cost alignments the one with the
/// most substitutions wins, which makes the counts symmetric when the sides
/// are swapped. Remaining ties are broken in the backtrace, preferring match,
/// then substitution, then deletion, then insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    // (cost, substitutions); smaller cost first, then more substitutions
    let better = |a: (usize, usize), b: (usize, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 > b.1);
    let mut d = vec![(0usize, 0usize); (n + 1) * w];
    for j in 0..=m {
        d[j] = (j, 0);
    }
    for i in 1..=n {
        d[i * w] = (i, 0);
        for j in 1..=m {
            let (c, s) = d[(i - 1) * w + j - 1];
            let diag = if reference[i - 1] == hypothesis[j - 1] { (c, s) } else { (c + 1, s + 1) };
            let (c, s) = d[(i - 1) * w + j];
            let del = (c + 1, s);
            let (c, s) = d[i * w + j - 1];
            let ins = (c + 1, s);
            let mut best = diag;
            for cand in [del, ins] {
                if better(cand, best) {
                    best = cand;
                }
            }
            d[i * w + j] = best;
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let (c, s) = d[(i - 1) * w + j - 1];
            let same = reference[i - 1] == hypothesis[j - 1];
            if same && (c, s) == here {
                ops.push(EditOp {
                    kind: EditKind::Match,
                    ref_pos: Some(i - 1),
                    hyp_pos: Some(j - 1),
                });
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && (c + 1, s + 1) == here {
                ops.push(EditOp {
                    kind: EditKind::Substitute,
                    ref_pos: Some(i - 1),
                    hyp_pos: Some(j - 1),
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        let via_del = i > 0 && {
            let (c, s) = d[(i - 1) * w + j];
            (c + 1, s) == here
        };
        if via_del {
            ops.push(EditOp {
                kind: EditKind::Delete,
                ref_pos: Some(i - 1),
                hyp_pos: None,
            });
            i -= 1;
        } else {
            ops.push(EditOp {
                kind: EditKind::Insert,
                ref_pos: None,
                hyp_pos: Some(j - 1),
            });
            j -= 1;
        }
    }
    ops.reverse();
    Alignment { ops }
}

/// Lowercases and drops ASCII punctuation; tokens that become empty vanish.
pub fn normalize_words(words: &[String]) -> Vec<String> {
    words
        .iter()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn split_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Error and reference counts behind one rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateCounts {
    pub errors: usize,
    pub reference: usize,
}

impl RateCounts {
    pub fn rate(&self, what: &str) -> Result<f64> {
        if self.reference == 0 {
            return Err(Error::UndefinedMetric(format!("{what}: no reference tokens")));
        }
        Ok(100.0 * self.errors as f64 / self.reference as f64)
    }

    pub fn add(&mut self, other: RateCounts) {
        self.errors += other.errors;
        self.reference += other.reference;
    }
}

fn check_paired<A, B>(refs: &[A], hyps: &[B]) -> Result<()> {
    if refs.len() != hyps.len() {
        return Err(Error::Usage(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    Ok(())
}

/// `S + D + I` over total reference length, on tokens as given.
pub fn edit_counts(refs: &[Vec<String>], hyps: &[Vec<String>]) -> Result<RateCounts> {
    check_paired(refs, hyps)?;
    let mut c = RateCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        c.errors += align(r, h).cost();
        c.reference += r.len();
    }
    Ok(c)
}

/// Entity substitutions and deletions over entity reference count.
pub fn entity_counts(
    refs: &[Vec<String>],
    hyps: &[Vec<String>],
    entities: &[Vec<usize>],
) -> Result<RateCounts> {
    check_paired(refs, hyps)?;
    check_paired(refs, entities)?;
    let mut c = RateCounts::default();
    for ((r, h), ents) in refs.iter().zip(hyps).zip(entities) {
        if let Some(&bad) = ents.iter().find(|&&e| e >= r.len()) {
            return Err(Error::Data(format!(
                "entity index {bad} outside a {}-word reference",
                r.len()
            )));
        }
        let a = align(r, h);
        for op in &a.ops {
            if let (Some(rp), EditKind::Substitute | EditKind::Delete) = (op.ref_pos, op.kind) {
                if ents.contains(&rp) {
                    c.errors += 1;
                }
            }
        }
        c.reference += ents.len();
    }
    Ok(c)
}

/// Word error rate on normalized words.
pub fn wer(refs: &[Vec<String>], hyps: &[Vec<String>]) -> Result<f64> {
    let r: Vec<Vec<String>> = refs.iter().map(|w| normalize_words(w)).collect();
    let h: Vec<Vec<String>> = hyps.iter().map(|w| normalize_words(w)).collect();
    edit_counts(&r, &h)?.rate("WER")
}

pub fn ewer(refs: &[Vec<String>], hyps: &[Vec<String>], entities: &[Vec<usize>]) -> Result<f64> {
    entity_counts(refs, hyps, entities)?.rate("EWER")
}

/// Case- and punctuation-sensitive token error rate.
pub fn ter(refs: &[Vec<String>], hyps: &[Vec<String>]) -> Result<f64> {
    edit_counts(refs, hyps)?.rate("TER")
}

/// One reference/hypothesis pair with its domain and entity positions.
#[derive(Clone, Debug)]
pub struct Scored {
    pub domain: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub entities: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub word: RateCounts,
    pub entity: RateCounts,
    pub token: RateCounts,
}

impl MetricCounts {
    fn add(&mut self, o: &MetricCounts) {
        self.word.add(o.word);
        self.entity.add(o.entity);
        self.token.add(o.token);
    }
}

/// Metrics for one domain, or for all domains pooled (`domain = "average"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub algo: String,
    pub seed: u64,
    pub domain: String,
    pub wer: Option<f64>,
    pub ewer: Option<f64>,
    pub ter: Option<f64>,
    pub counts: MetricCounts,
    pub checkpoint_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub wer: Option<f64>,
    pub ewer: Option<f64>,
    pub ter: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub algo: String,
    pub seed: u64,
    pub checkpoint_id: String,
    /// Per-domain rows in first-seen order, then the pooled `average` row.
    pub rows: Vec<MetricRow>,
    pub macro_average: MacroAverage,
}

pub const AVERAGE: &str = "average";

impl EvalReport {
    pub fn row(&self, domain: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.domain == domain)
    }

    pub fn average(&self) -> &MetricRow {
        self.row(AVERAGE).expect("report always has an average row")
    }
}

fn counts_for(items: &[&Scored]) -> Result<MetricCounts> {
    let refs: Vec<Vec<String>> = items.iter().map(|s| s.reference.clone()).collect();
    let hyps: Vec<Vec<String>> = items.iter().map(|s| s.hypothesis.clone()).collect();
    let ents: Vec<Vec<usize>> = items.iter().map(|s| s.entities.clone()).collect();
    let nr: Vec<Vec<String>> = refs.iter().map(|w| normalize_words(w)).collect();
    let nh: Vec<Vec<String>> = hyps.iter().map(|w| normalize_words(w)).collect();
    Ok(MetricCounts {
        word: edit_counts(&nr, &nh)?,
        entity: entity_counts(&refs, &hyps, &ents)?,
        token: edit_counts(&refs, &hyps)?,
    })
}

fn make_row(algo: &str, seed: u64, domain: &str, counts: MetricCounts, checkpoint_id: &str) -> MetricRow {
    MetricRow {
        algo: algo.to_string(),
        seed,
        domain: domain.to_string(),
        wer: counts.word.rate("WER").ok(),
        ewer: counts.entity.rate("EWER").ok(),
        ter: counts.token.rate("TER").ok(),
        counts,
        checkpoint_id: checkpoint_id.to_string(),
    }
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Builds per-domain rows plus pooled and macro averages.
pub fn evaluate(algo: &str, seed: u64, checkpoint_id: &str, scored: &[Scored]) -> Result<EvalReport> {
    let mut domains: Vec<&str> = Vec::new();
    for s in scored {
        if !domains.contains(&s.domain.as_str()) {
            domains.push(&s.domain);
        }
    }
    let mut rows = Vec::new();
    let mut pooled = MetricCounts::default();
    for d in &domains {
        let items: Vec<&Scored> = scored.iter().filter(|s| s.domain == *d).collect();
        let c = counts_for(&items)?;
        pooled.add(&c);
        rows.push(make_row(algo, seed, d, c, checkpoint_id));
    }
    let macro_average = MacroAverage {
        wer: mean_of(rows.iter().map(|r| r.wer)),
        ewer: mean_of(rows.iter().map(|r| r.ewer)),
        ter: mean_of(rows.iter().map(|r| r.ter)),
    };
    let avg = make_row(algo, seed, AVERAGE, pooled, checkpoint_id);
    if avg.wer.is_none() {
        return Err(Error::UndefinedMetric("no reference words to evaluate".into()));
    }
    rows.push(avg);
    Ok(EvalReport {
        algo: algo.to_string(),
        seed,
        checkpoint_id: checkpoint_id.to_string(),
        rows,
        macro_average,
    })
}
