//! Merge a raw split with the offline annotation file into the canonical
//! dataset format.
//!
//! Raw line:        {"tokens": ["good","food"], "aspects": [[2,2,"positive"]]}
//! Annotation line: {"pos": ["JJ","NN"], "deps": [[2,1,"amod"]]}
//!
//! Lines pair up by index. Every problem is collected into one report so a
//! single run surfaces all broken examples.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

#[derive(Deserialize)]
struct RawLine {
    tokens: Vec<String>,
    aspects: Vec<(usize, usize, String)>,
}

#[derive(Deserialize)]
struct AnnotationLine {
    pos: Vec<String>,
    deps: Vec<(usize, usize, String)>,
    /// Optional echo of the tokens for cross-checking.
    #[serde(default)]
    tokens: Option<Vec<String>>,
}

pub fn run(
    raw_path: &Path,
    annotations_path: &Path,
    out_path: &Path,
    vocab_out: Option<&Path>,
) -> Result<()> {
    let raw_text = std::fs::read_to_string(raw_path)
        .with_context(|| format!("reading {}", raw_path.display()))?;
    let ann_text = std::fs::read_to_string(annotations_path)
        .with_context(|| format!("reading {}", annotations_path.display()))?;
    let raw_lines: Vec<&str> = raw_text.lines().filter(|l| !l.trim().is_empty()).collect();
    let ann_lines: Vec<&str> = ann_text.lines().filter(|l| !l.trim().is_empty()).collect();

    let mut errors: Vec<String> = Vec::new();
    if raw_lines.len() != ann_lines.len() {
        errors.push(format!(
            "{} raw sentences but {} annotation lines",
            raw_lines.len(),
            ann_lines.len()
        ));
    }

    let mut merged = String::new();
    let mut sentences = 0usize;
    let mut targets = 0usize;
    for (i, (raw, ann)) in raw_lines.iter().zip(&ann_lines).enumerate() {
        let line_no = i + 1;
        let raw: RawLine = match serde_json::from_str(raw) {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("raw line {line_no}: {e}"));
                continue;
            }
        };
        let ann: AnnotationLine = match serde_json::from_str(ann) {
            Ok(a) => a,
            Err(e) => {
                errors.push(format!("annotation line {line_no}: {e}"));
                continue;
            }
        };
        if ann.pos.len() != raw.tokens.len() {
            errors.push(format!(
                "line {line_no}: {} POS tags for {} tokens",
                ann.pos.len(),
                raw.tokens.len()
            ));
            continue;
        }
        if let Some(echo) = &ann.tokens {
            if echo != &raw.tokens {
                errors.push(format!("line {line_no}: annotation tokens disagree with raw"));
                continue;
            }
        }
        sentences += 1;
        targets += raw.aspects.len();
        let canonical = serde_json::json!({
            "tokens": raw.tokens,
            "pos": ann.pos,
            "deps": ann.deps,
            "aspects": raw.aspects,
        });
        merged.push_str(&serde_json::to_string(&canonical)?);
        merged.push('\n');
    }

    if !errors.is_empty() {
        let mut stderr = std::io::stderr().lock();
        for e in &errors {
            writeln!(stderr, "{}", serde_json::json!({ "example_error": e }))?;
        }
        bail!("{} example(s) failed preprocessing", errors.len());
    }

    std::fs::write(out_path, merged)?;

    // Re-load through the validating loader: canonical output must parse,
    // and the pass builds the vocabularies for the sidecar.
    let (examples, vocabs) = spandiff::corpus::load_dataset(out_path, None)
        .map_err(|e| anyhow::anyhow!("canonical output failed validation: {e}"))?;
    // Normalize serialization (stable field order) for byte-identical reruns.
    spandiff::corpus::save_dataset(out_path, &examples, &vocabs)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let vocab_path = match vocab_out {
        Some(p) => p.to_path_buf(),
        None => {
            let mut s = out_path.as_os_str().to_owned();
            s.push(".vocab.json");
            std::path::PathBuf::from(s)
        }
    };
    vocabs
        .save(&vocab_path)
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    println!("{}: {sentences} sentences, {targets} targets", out_path.display());
    println!("vocab: {}", vocab_path.display());
    Ok(())
}
