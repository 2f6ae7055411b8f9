//! Prediction JSONL: one line per sentence,
//! {"tokens": [...], "pred": [[s,e,"polarity",score]...], "gold": [[s,e,"polarity"]...]}.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use spandiff::corpus::{AnnotatedExample, AspectAnnotation, Polarity};
use spandiff::inference::Prediction;

#[derive(Serialize, Deserialize)]
struct PredLine {
    tokens: Vec<String>,
    pred: Vec<(usize, usize, String, f64)>,
    gold: Vec<(usize, usize, String)>,
}

pub fn save(
    path: &Path,
    examples: &[AnnotatedExample],
    preds: &[Vec<Prediction>],
) -> Result<()> {
    let mut out = String::new();
    for (ex, ps) in examples.iter().zip(preds) {
        let line = PredLine {
            tokens: ex.tokens.clone(),
            pred: ps
                .iter()
                .map(|p| (p.start, p.end, p.polarity.to_string(), p.score))
                .collect(),
            gold: ex
                .gold
                .iter()
                .map(|g| (g.start, g.end, g.polarity.to_string()))
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub type LoadedPredictions = (Vec<Vec<Prediction>>, Vec<Vec<AspectAnnotation>>);

pub fn load(path: &Path) -> Result<LoadedPredictions> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading predictions {}", path.display()))?;
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredLine = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let p: Result<Vec<Prediction>> = parsed
            .pred
            .iter()
            .map(|(s, e, pol, score)| {
                Ok(Prediction {
                    start: *s,
                    end: *e,
                    polarity: pol.parse::<Polarity>().map_err(|e| anyhow::anyhow!("{e}"))?,
                    score: *score,
                })
            })
            .collect();
        let g: Result<Vec<AspectAnnotation>> = parsed
            .gold
            .iter()
            .map(|(s, e, pol)| {
                Ok(AspectAnnotation::new(
                    *s,
                    *e,
                    pol.parse::<Polarity>().map_err(|e| anyhow::anyhow!("{e}"))?,
                ))
            })
            .collect();
        preds.push(p?);
        golds.push(g?);
    }
    Ok((preds, golds))
}
