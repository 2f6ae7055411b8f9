//! Dataset loading and linguistic alignment.
//!
//! The canonical on-disk format is JSONL, one sentence per line:
//!
//! ```text
//! {"tokens": ["good", "food"],
//!  "pos": ["JJ", "NN"],
//!  "deps": [[2, 1, "amod"]],
//!  "aspects": [[2, 2, "positive"]]}
//! ```
//!
//! Word indices are 1-based and inclusive on disk and in the domain types,
//! matching the span arithmetic used everywhere downstream; conversion to
//! 0-based happens only where arrays are actually indexed. POS tags and
//! dependency labels are interned into [`Vocabularies`], which reserve an
//! unknown id so eval-time parser drift degrades instead of erroring.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::SpandiffError;

pub mod synthetic;

/// Sentiment polarity of one aspect term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
            Polarity::Neutral => 2,
        }
    }

    pub fn from_index(i: usize) -> Polarity {
        Self::ALL[i]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Polarity {
    type Err = SpandiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Polarity::Positive),
            "negative" => Ok(Polarity::Negative),
            "neutral" => Ok(Polarity::Neutral),
            other => Err(SpandiffError::Corpus(format!(
                "unknown polarity string {other:?}"
            ))),
        }
    }
}

/// One gold aspect: 1-based inclusive word span plus its polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AspectAnnotation {
    pub start: usize,
    pub end: usize,
    pub polarity: Polarity,
}

impl AspectAnnotation {
    pub fn new(start: usize, end: usize, polarity: Polarity) -> Self {
        Self {
            start,
            end,
            polarity,
        }
    }

    pub fn token_len(&self) -> usize {
        self.end - self.start + 1
    }

    /// 0-based inclusive row range for array indexing.
    pub fn zero_based(&self) -> (usize, usize) {
        (self.start - 1, self.end - 1)
    }
}

/// One dependency arc, already interned to a label id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub head: usize,
    pub dependent: usize,
    pub label_id: usize,
}

/// A fully validated sentence: tokens, POS ids, dependency arcs, gold aspects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub tokens: Vec<String>,
    pub pos_ids: Vec<usize>,
    pub edges: Vec<DependencyEdge>,
    pub gold: Vec<AspectAnnotation>,
}

impl AnnotatedExample {
    pub fn sentence_len(&self) -> usize {
        self.tokens.len()
    }
}

/// Interned string tables for POS tags and dependency labels.
///
/// Id 0 of each table is the reserved unknown; the dependency table also
/// reserves id 1 for the self-loop label used by [`build_adjacency`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub pos_vocab: BTreeMap<String, usize>,
    pub dep_label_vocab: BTreeMap<String, usize>,
}

pub const UNK_TOKEN: &str = "<unk>";
pub const SELF_LOOP_TOKEN: &str = "<self>";

impl Default for Vocabularies {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabularies {
    pub fn new() -> Self {
        let mut pos_vocab = BTreeMap::new();
        pos_vocab.insert(UNK_TOKEN.to_string(), 0);
        let mut dep_label_vocab = BTreeMap::new();
        dep_label_vocab.insert(UNK_TOKEN.to_string(), 0);
        dep_label_vocab.insert(SELF_LOOP_TOKEN.to_string(), 1);
        Self {
            pos_vocab,
            dep_label_vocab,
        }
    }

    pub fn pos_unknown_id(&self) -> usize {
        0
    }

    pub fn dep_unknown_id(&self) -> usize {
        0
    }

    pub fn dep_self_loop_id(&self) -> usize {
        1
    }

    pub fn pos_size(&self) -> usize {
        self.pos_vocab.len()
    }

    pub fn dep_size(&self) -> usize {
        self.dep_label_vocab.len()
    }

    fn intern_pos(&mut self, tag: &str, frozen: bool) -> usize {
        if let Some(&id) = self.pos_vocab.get(tag) {
            return id;
        }
        if frozen {
            return self.pos_unknown_id();
        }
        let id = self.pos_vocab.len();
        self.pos_vocab.insert(tag.to_string(), id);
        id
    }

    fn intern_dep(&mut self, label: &str, frozen: bool) -> usize {
        if let Some(&id) = self.dep_label_vocab.get(label) {
            return id;
        }
        if frozen {
            return self.dep_unknown_id();
        }
        let id = self.dep_label_vocab.len();
        self.dep_label_vocab.insert(label.to_string(), id);
        id
    }

    fn pos_name(&self, id: usize) -> &str {
        self.pos_vocab
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
            .unwrap_or(UNK_TOKEN)
    }

    fn dep_name(&self, id: usize) -> &str {
        self.dep_label_vocab
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
            .unwrap_or(UNK_TOKEN)
    }

    pub fn save(&self, path: &Path) -> Result<(), SpandiffError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SpandiffError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Wire form of one JSONL line.
#[derive(Debug, Serialize, Deserialize)]
struct RawExample {
    tokens: Vec<String>,
    pos: Vec<String>,
    deps: Vec<(usize, usize, String)>,
    aspects: Vec<(usize, usize, String)>,
}

/// Counts the loader reports after a successful pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetStats {
    pub sentences: usize,
    pub targets: usize,
}

pub fn dataset_stats(examples: &[AnnotatedExample]) -> DatasetStats {
    DatasetStats {
        sentences: examples.len(),
        targets: examples.iter().map(|e| e.gold.len()).sum(),
    }
}

/// Load a JSONL dataset. With `vocabs = None` (training mode) the string
/// tables grow as new tags appear; with `Some(v)` (eval mode) they are frozen
/// and unseen strings fall back to the unknown id.
pub fn load_dataset(
    path: &Path,
    vocabs: Option<Vocabularies>,
) -> Result<(Vec<AnnotatedExample>, Vocabularies), SpandiffError> {
    let file = File::open(path).map_err(|e| {
        SpandiffError::Corpus(format!("cannot open {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let frozen = vocabs.is_some();
    let mut vocabs = vocabs.unwrap_or_default();
    let mut examples = Vec::new();

    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line).map_err(|e| {
            SpandiffError::Corpus(format!(
                "{}:{}: malformed JSON: {e}",
                path.display(),
                line_no + 1
            ))
        })?;
        let example = validate_raw(raw, &mut vocabs, frozen).map_err(|e| {
            SpandiffError::Corpus(format!("{}:{}: {e}", path.display(), line_no + 1))
        })?;
        examples.push(example);
    }
    Ok((examples, vocabs))
}

fn validate_raw(
    raw: RawExample,
    vocabs: &mut Vocabularies,
    frozen: bool,
) -> Result<AnnotatedExample, SpandiffError> {
    let n = raw.tokens.len();
    if n == 0 {
        return Err(SpandiffError::Corpus("empty token list".into()));
    }
    if raw.pos.len() != n {
        return Err(SpandiffError::Corpus(format!(
            "example {:?}: {} POS tags for {} tokens",
            preview(&raw.tokens),
            raw.pos.len(),
            n
        )));
    }
    let pos_ids = raw
        .pos
        .iter()
        .map(|t| vocabs.intern_pos(t, frozen))
        .collect();

    let mut edges = Vec::with_capacity(raw.deps.len());
    for &(head, dependent, ref label) in &raw.deps {
        if head == 0 || dependent == 0 || head > n || dependent > n {
            return Err(SpandiffError::Corpus(format!(
                "example {:?}: dependency ({head},{dependent}) outside [1,{n}]",
                preview(&raw.tokens)
            )));
        }
        edges.push(DependencyEdge {
            head,
            dependent,
            label_id: vocabs.intern_dep(label, frozen),
        });
    }

    let mut gold = Vec::with_capacity(raw.aspects.len());
    for &(start, end, ref pol) in &raw.aspects {
        if start == 0 || start > end || end > n {
            return Err(SpandiffError::Corpus(format!(
                "example {:?}: aspect span ({start},{end}) violates 1 <= start <= end <= {n}",
                preview(&raw.tokens)
            )));
        }
        gold.push(AspectAnnotation::new(start, end, pol.parse()?));
    }

    Ok(AnnotatedExample {
        tokens: raw.tokens,
        pos_ids,
        edges,
        gold,
    })
}

fn preview(tokens: &[String]) -> String {
    let mut s = tokens
        .iter()
        .take(5)
        .cloned()
        .collect::<Vec<_>>()
        .join(" ");
    if tokens.len() > 5 {
        s.push_str(" ...");
    }
    s
}

/// Serialize examples back to the canonical JSONL form. Inverse of
/// [`load_dataset`] up to whitespace (field and key order are fixed).
pub fn save_dataset(
    path: &Path,
    examples: &[AnnotatedExample],
    vocabs: &Vocabularies,
) -> Result<(), SpandiffError> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for ex in examples {
        let raw = RawExample {
            tokens: ex.tokens.clone(),
            pos: ex.pos_ids.iter().map(|&i| vocabs.pos_name(i).to_string()).collect(),
            deps: ex
                .edges
                .iter()
                .map(|e| (e.head, e.dependent, vocabs.dep_name(e.label_id).to_string()))
                .collect(),
            aspects: ex
                .gold
                .iter()
                .map(|a| (a.start, a.end, a.polarity.as_str().to_string()))
                .collect(),
        };
        serde_json::to_writer(&mut out, &raw)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Dependency-label adjacency matrix with self-loops.
///
/// `M[i][j]` holds `label_id + 1` when an arc connects word i+1 and word j+1
/// in either direction, the shifted self-loop id on the diagonal, and 0
/// otherwise. When both directions carry different labels in the source
/// data, the head->dependent label wins.
pub fn build_adjacency(example: &AnnotatedExample, vocabs: &Vocabularies) -> Vec<Vec<usize>> {
    let n = example.sentence_len();
    let mut m = vec![vec![0usize; n]; n];
    // Deduplicate opposite-direction arcs: first write per (i, j) wins, and
    // edges are visited in file order so head->dependent comes first.
    for e in &example.edges {
        let (i, j) = (e.head - 1, e.dependent - 1);
        if m[i][j] == 0 {
            m[i][j] = e.label_id + 1;
            m[j][i] = e.label_id + 1;
        }
    }
    let self_id = vocabs.dep_self_loop_id() + 1;
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = self_id;
    }
    m
}

/// Map each word to its contiguous subword range (0-based inclusive).
///
/// Subword continuation is marked with the `##` prefix convention; the ranges
/// partition `subwords`, excluding any sentence markers, which the caller
/// must strip beforehand.
pub fn align_subwords(
    tokens: &[String],
    subwords: &[String],
) -> Result<Vec<(usize, usize)>, SpandiffError> {
    let mut ranges: Vec<(usize, usize)> = Vec::with_capacity(tokens.len());
    for (i, piece) in subwords.iter().enumerate() {
        let continuation = piece.starts_with("##");
        if continuation {
            match ranges.last_mut() {
                Some(last) => last.1 = i,
                None => {
                    return Err(SpandiffError::Corpus(
                        "subword stream starts with a continuation piece".into(),
                    ))
                }
            }
        } else {
            ranges.push((i, i));
        }
    }
    if ranges.len() != tokens.len() {
        return Err(SpandiffError::Corpus(format!(
            "tokenizer produced {} word groups for {} words",
            ranges.len(),
            tokens.len()
        )));
    }
    Ok(ranges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::NamedTempFile;

    fn write_jsonl(lines: &[&str]) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn minimal_well_formed_example() {
        let f = write_jsonl(&[
            r#"{"tokens":["good","food"],"pos":["JJ","NN"],"deps":[[2,1,"amod"]],"aspects":[[2,2,"positive"]]}"#,
        ]);
        let (examples, vocabs) = load_dataset(f.path(), None).unwrap();
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].sentence_len(), 2);
        assert_eq!(
            examples[0].gold,
            vec![AspectAnnotation::new(2, 2, Polarity::Positive)]
        );
        assert_eq!(vocabs.pos_vocab.len(), 3); // <unk>, JJ, NN
        assert_eq!(vocabs.dep_label_vocab.len(), 3); // <unk>, <self>, amod
    }

    #[test]
    fn empty_file_gives_empty_list_and_base_vocab() {
        let f = write_jsonl(&[]);
        let (examples, vocabs) = load_dataset(f.path(), None).unwrap();
        assert!(examples.is_empty());
        assert_eq!(vocabs, Vocabularies::new());
    }

    #[test]
    fn malformed_json_names_the_line() {
        let f = write_jsonl(&[
            r#"{"tokens":["a"],"pos":["X"],"deps":[],"aspects":[]}"#,
            r#"{"tokens": nope}"#,
        ]);
        let err = load_dataset(f.path(), None).unwrap_err().to_string();
        assert!(err.contains(":2:"), "missing line number: {err}");
        assert!(err.contains("malformed JSON"), "{err}");
    }

    #[test]
    fn out_of_bounds_span_names_the_example() {
        let f = write_jsonl(&[
            r#"{"tokens":["tiny","menu"],"pos":["JJ","NN"],"deps":[],"aspects":[[1,3,"neutral"]]}"#,
        ]);
        let err = load_dataset(f.path(), None).unwrap_err().to_string();
        assert!(err.contains("tiny menu"), "{err}");
        assert!(err.contains("(1,3)"), "{err}");
    }

    #[test]
    fn unknown_polarity_is_an_error() {
        let f = write_jsonl(&[
            r#"{"tokens":["x"],"pos":["NN"],"deps":[],"aspects":[[1,1,"mixed"]]}"#,
        ]);
        let err = load_dataset(f.path(), None).unwrap_err().to_string();
        assert!(err.contains("mixed"), "{err}");
    }

    #[test]
    fn frozen_vocab_maps_unknowns_and_is_idempotent() {
        let train = write_jsonl(&[
            r#"{"tokens":["good","food"],"pos":["JJ","NN"],"deps":[[2,1,"amod"]],"aspects":[]}"#,
        ]);
        let (_, vocabs) = load_dataset(train.path(), None).unwrap();

        let eval = write_jsonl(&[
            r#"{"tokens":["weird","beer"],"pos":["ZZ","NN"],"deps":[[2,1,"zmod"]],"aspects":[]}"#,
        ]);
        let (ex1, v1) = load_dataset(eval.path(), Some(vocabs.clone())).unwrap();
        assert_eq!(v1, vocabs, "frozen vocab must not grow");
        assert_eq!(ex1[0].pos_ids[0], vocabs.pos_unknown_id());
        assert_eq!(ex1[0].edges[0].label_id, vocabs.dep_unknown_id());

        // Applying the frozen vocab twice yields identical ids.
        let (ex2, _) = load_dataset(eval.path(), Some(v1)).unwrap();
        assert_eq!(ex1, ex2);
    }

    #[test]
    fn roundtrip_modulo_whitespace() {
        let lines = [
            r#"{"tokens":["the","fish","was","stale"],"pos":["DT","NN","VBD","JJ"],"deps":[[2,1,"det"],[3,2,"nsubj"],[3,4,"acomp"]],"aspects":[[2,2,"negative"]]}"#,
            r#"{"tokens":["ok"],"pos":["UH"],"deps":[],"aspects":[]}"#,
        ];
        let f = write_jsonl(&lines);
        let (examples, vocabs) = load_dataset(f.path(), None).unwrap();
        let out = NamedTempFile::new().unwrap();
        save_dataset(out.path(), &examples, &vocabs).unwrap();
        let text = std::fs::read_to_string(out.path()).unwrap();
        let normalize = |s: &str| {
            s.lines()
                .map(|l| {
                    serde_json::from_str::<serde_json::Value>(l).unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(normalize(&text), normalize(&lines.join("\n")));
    }

    #[test]
    fn adjacency_self_loops_only() {
        let vocabs = Vocabularies::new();
        let ex = AnnotatedExample {
            tokens: vec!["a".into(), "b".into(), "c".into()],
            pos_ids: vec![0, 0, 0],
            edges: vec![],
            gold: vec![],
        };
        let m = build_adjacency(&ex, &vocabs);
        let self_v = vocabs.dep_self_loop_id() + 1;
        for (i, row) in m.iter().enumerate() {
            for (j, &cell) in row.iter().enumerate() {
                assert_eq!(cell, if i == j { self_v } else { 0 });
            }
        }
    }

    #[test]
    fn adjacency_stores_shifted_label_both_directions() {
        let vocabs = Vocabularies::new();
        let ex = AnnotatedExample {
            tokens: vec!["a".into(), "b".into()],
            pos_ids: vec![0, 0],
            edges: vec![DependencyEdge {
                head: 1,
                dependent: 2,
                label_id: 4,
            }],
            gold: vec![],
        };
        let m = build_adjacency(&ex, &vocabs);
        assert_eq!(m[0][1], 5);
        assert_eq!(m[1][0], 5);
        assert_eq!(m[0][0], vocabs.dep_self_loop_id() + 1);
        assert_eq!(m[1][1], vocabs.dep_self_loop_id() + 1);
    }

    #[test]
    fn adjacency_fully_connected_two_words() {
        // Hand enumeration: both off-diagonal cells carry the edge label,
        // both diagonal cells the self-loop id.
        let vocabs = Vocabularies::new();
        let ex = AnnotatedExample {
            tokens: vec!["a".into(), "b".into()],
            pos_ids: vec![0, 0],
            edges: vec![
                DependencyEdge {
                    head: 1,
                    dependent: 2,
                    label_id: 2,
                },
                DependencyEdge {
                    head: 2,
                    dependent: 1,
                    label_id: 7,
                },
            ],
            gold: vec![],
        };
        let m = build_adjacency(&ex, &vocabs);
        for (i, row) in m.iter().enumerate() {
            for (j, &cell) in row.iter().enumerate() {
                assert_ne!(cell, 0, "cell ({i},{j}) must be nonzero");
            }
        }
        // First-seen direction (head->dependent of the first edge) wins.
        assert_eq!(m[0][1], 3);
        assert_eq!(m[1][0], 3);
    }

    #[test]
    fn adjacency_symmetry_property() {
        use crate::corpus::synthetic::synthetic_corpus;
        let (examples, vocabs, _) = synthetic_corpus(11, 20, 50);
        for ex in &examples {
            let m = build_adjacency(ex, &vocabs);
            for (i, row) in m.iter().enumerate() {
                assert_ne!(row[i], 0, "diagonal must be nonzero");
                for (j, &cell) in row.iter().enumerate() {
                    assert_eq!(cell, m[j][i], "asymmetric at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn align_identity_and_continuation() {
        let one = align_subwords(&["food".into()], &["food".into()]).unwrap();
        assert_eq!(one, vec![(0, 0)]);

        let playing = align_subwords(
            &["playing".into()],
            &["play".into(), "##ing".into()],
        )
        .unwrap();
        assert_eq!(playing, vec![(0, 1)]);
    }

    #[test]
    fn align_partition_property() {
        let tokens: Vec<String> = vec!["unbelievably".into(), "good".into(), "tapas".into()];
        let subwords: Vec<String> = vec![
            "un".into(),
            "##believ".into(),
            "##ably".into(),
            "good".into(),
            "tapa".into(),
            // 5 subwords for 3 words
        ];
        let mut subwords = subwords;
        subwords.push("##s".into()); // 6 pieces total; keep 3 groups
        let subwords = &subwords[..5]; // drop to exactly the example: 3 words, 5 pieces
        let ranges = align_subwords(&tokens, subwords).unwrap();
        // Brute-force partition check: concatenated ranges cover 0..=4 with no gaps.
        let mut covered = Vec::new();
        for &(lo, hi) in &ranges {
            assert!(lo <= hi);
            covered.extend(lo..=hi);
        }
        assert_eq!(covered, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn align_rejects_group_mismatch() {
        // Two words but the tokenizer only produced one group.
        let err = align_subwords(
            &["two".into(), "words".into()],
            &["twowords".into()],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("1 word groups for 2 words"), "{err}");
    }
}
