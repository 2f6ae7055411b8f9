//! Micro-F1 scoring under exact span match (AE) or exact span + polarity
//! match (AESC), with per-length bucket breakdowns and relative-improvement
//! tables.
//!
//! Counting uses set semantics per sentence: exact duplicates collapse
//! before matching. When every span within a sentence carries a single
//! polarity (deduplicated predictions always do; gold data does in
//! practice), AE F1 is bounded below by AESC F1.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{AspectAnnotation, Polarity};
use crate::error::{Result, SpandiffError};
use crate::inference::Prediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EvalMode {
    Ae,
    Aesc,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Ae => "AE",
            EvalMode::Aesc => "AESC",
        })
    }
}

/// Aggregated match counts with derived precision/recall/F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn absorb(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub const BUCKET_LABELS: [&str; 3] = ["LEN=1", "LEN=2", "LEN>2"];

fn bucket_of(len: usize) -> usize {
    match len {
        1 => 0,
        2 => 1,
        _ => 2,
    }
}

/// One scoring report: overall micro counts plus the three length buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub overall: Counts,
    pub buckets: Vec<(String, Counts)>,
}

impl EvalReport {
    pub fn f1(&self) -> f64 {
        self.overall.f1()
    }

    pub fn bucket(&self, label: &str) -> Option<&Counts> {
        self.buckets
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, c)| c)
    }

    /// Fixed-width text rendering.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9}\n",
            self.mode, "tp", "fp", "fn", "P", "R", "F1"
        ));
        let mut row = |label: &str, c: &Counts| {
            out.push_str(&format!(
                "{:<8} {:>6} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4}\n",
                label,
                c.tp,
                c.fp,
                c.fn_,
                c.precision(),
                c.recall(),
                c.f1()
            ));
        };
        row("ALL", &self.overall);
        for (label, c) in &self.buckets {
            row(label, c);
        }
        out
    }
}

/// Match key for one aspect under a mode. Exact span always; polarity only
/// for AESC. Set semantics: duplicates collapse before counting.
type Key = (usize, usize, Option<Polarity>);

fn pred_keys(preds: &[Prediction], mode: EvalMode) -> BTreeSet<Key> {
    preds
        .iter()
        .map(|p| match mode {
            EvalMode::Ae => (p.start, p.end, None),
            EvalMode::Aesc => (p.start, p.end, Some(p.polarity)),
        })
        .collect()
}

fn gold_keys(golds: &[AspectAnnotation], mode: EvalMode) -> BTreeSet<Key> {
    golds
        .iter()
        .map(|g| match mode {
            EvalMode::Ae => (g.start, g.end, None),
            EvalMode::Aesc => (g.start, g.end, Some(g.polarity)),
        })
        .collect()
}

/// Corpus-level micro-F1. `preds` and `golds` are parallel per-sentence
/// lists; every count lands in exactly one length bucket (matched pairs by
/// the gold span's length, unmatched items by their own length).
pub fn score(
    preds: &[Vec<Prediction>],
    golds: &[Vec<AspectAnnotation>],
    mode: EvalMode,
) -> Result<EvalReport> {
    if preds.len() != golds.len() {
        return Err(SpandiffError::Evaluation(format!(
            "{} prediction sentences vs {} gold sentences",
            preds.len(),
            golds.len()
        )));
    }
    let mut buckets = [Counts::default(); 3];
    for (p_sent, g_sent) in preds.iter().zip(golds) {
        let p = pred_keys(p_sent, mode);
        let g = gold_keys(g_sent, mode);
        for key in p.intersection(&g) {
            buckets[bucket_of(key.1 - key.0 + 1)].tp += 1;
        }
        for key in p.difference(&g) {
            buckets[bucket_of(key.1 - key.0 + 1)].fp += 1;
        }
        for key in g.difference(&p) {
            buckets[bucket_of(key.1 - key.0 + 1)].fn_ += 1;
        }
    }
    let mut overall = Counts::default();
    for b in &buckets {
        overall.absorb(*b);
    }
    Ok(EvalReport {
        mode,
        overall,
        buckets: BUCKET_LABELS
            .iter()
            .map(|&l| l.to_string())
            .zip(buckets)
            .collect(),
    })
}

/// Per-bucket rows only, for callers that do not need the overall counts.
pub fn bucket_by_length(
    preds: &[Vec<Prediction>],
    golds: &[Vec<AspectAnnotation>],
    mode: EvalMode,
) -> Result<Vec<(String, Counts)>> {
    Ok(score(preds, golds, mode)?.buckets)
}

/// Relative F1 improvement of `subject` over `baseline`, percent, per
/// column. A zero baseline leaves the cell undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTable {
    pub columns: Vec<(String, Option<f64>)>,
}

impl ImprovementTable {
    pub fn column(&self, label: &str) -> Option<f64> {
        self.columns
            .iter()
            .find(|(l, _)| l == label)
            .and_then(|(_, v)| *v)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (label, value) in &self.columns {
            match value {
                Some(v) => out.push_str(&format!("{label:<8} {v:+8.2}%\n")),
                None => out.push_str(&format!("{label:<8} undefined\n")),
            }
        }
        out
    }
}

pub fn relative_improvement(subject: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 {
        None
    } else {
        Some((subject - baseline) / baseline * 100.0)
    }
}

pub fn compare(subject: &EvalReport, baseline: &EvalReport) -> ImprovementTable {
    let mut columns = vec![(
        "ALL".to_string(),
        relative_improvement(subject.overall.f1(), baseline.overall.f1()),
    )];
    for (label, c) in &subject.buckets {
        let base = baseline
            .bucket(label)
            .map(Counts::f1)
            .unwrap_or(0.0);
        columns.push((label.clone(), relative_improvement(c.f1(), base)));
    }
    ImprovementTable { columns }
}
