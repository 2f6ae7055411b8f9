//! Contextual encoders behind one interface: a trainable toy encoder
//! (word embeddings + window-3 mixer) and a frozen external-embedding
//! encoder fed from a sidecar file precomputed offline by any language
//! model. Both produce word-level representations of shape |S| × d.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{align_subwords, AnnotatedExample};
use crate::error::{Result, SpandiffError};
use crate::nn::{xavier_uniform, NodeId, ParamStore, Tape, Tensor};

use super::sinusoidal_embedding;

pub const TOY_MAX_LEN: usize = 512;

/// Token table for the toy encoder; id 0 is the reserved unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordVocab {
    map: BTreeMap<String, usize>,
}

impl WordVocab {
    pub fn build(examples: &[AnnotatedExample]) -> Self {
        let mut map = BTreeMap::new();
        map.insert(crate::corpus::UNK_TOKEN.to_string(), 0);
        for ex in examples {
            for tok in &ex.tokens {
                let next = map.len();
                map.entry(tok.clone()).or_insert(next);
            }
        }
        Self { map }
    }

    pub fn id(&self, word: &str) -> usize {
        self.map.get(word).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// One sidecar record: vectors per word, or per subword when `subwords`
/// is present (pooled to word level through [`align_subwords`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExternalRecord {
    tokens: Vec<String>,
    #[serde(default)]
    subwords: Option<Vec<String>>,
    vectors: Vec<Vec<f64>>,
}

/// In-memory index of an external-embedding sidecar, keyed by the joined
/// token sequence.
#[derive(Debug, Clone)]
pub struct PrecomputedTable {
    entries: HashMap<String, ExternalRecord>,
    dim: usize,
}

fn sentence_key(tokens: &[String]) -> String {
    tokens.join(" ")
}

impl PrecomputedTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SpandiffError::Model(format!(
                "cannot read embedding sidecar {}: {e}",
                path.display()
            ))
        })?;
        let mut entries = HashMap::new();
        let mut dim = 0usize;
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExternalRecord = serde_json::from_str(line).map_err(|e| {
                SpandiffError::Model(format!("{}:{}: {e}", path.display(), line_no + 1))
            })?;
            let d = rec.vectors.first().map_or(0, Vec::len);
            if d == 0 || rec.vectors.iter().any(|v| v.len() != d) {
                return Err(SpandiffError::Model(format!(
                    "{}:{}: ragged or empty vectors",
                    path.display(),
                    line_no + 1
                )));
            }
            if dim == 0 {
                dim = d;
            } else if dim != d {
                return Err(SpandiffError::Model(format!(
                    "{}:{}: vector dim {d} differs from earlier {dim}",
                    path.display(),
                    line_no + 1
                )));
            }
            entries.insert(sentence_key(&rec.tokens), rec);
        }
        if entries.is_empty() {
            return Err(SpandiffError::Model(format!(
                "embedding sidecar {} is empty",
                path.display()
            )));
        }
        Ok(Self { entries, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Word-level vectors for one sentence, pooling subword vectors when the
    /// record carries a subword stream.
    fn word_vectors(&self, example: &AnnotatedExample) -> Result<Vec<Vec<f64>>> {
        let key = sentence_key(&example.tokens);
        let rec = self.entries.get(&key).ok_or_else(|| {
            SpandiffError::Model(format!(
                "no precomputed embedding for sentence {key:?}"
            ))
        })?;
        match &rec.subwords {
            None => {
                if rec.vectors.len() != example.tokens.len() {
                    return Err(SpandiffError::Model(format!(
                        "sentence {key:?}: {} vectors for {} words",
                        rec.vectors.len(),
                        example.tokens.len()
                    )));
                }
                Ok(rec.vectors.clone())
            }
            Some(subwords) => {
                if rec.vectors.len() != subwords.len() {
                    return Err(SpandiffError::Model(format!(
                        "sentence {key:?}: {} vectors for {} subwords",
                        rec.vectors.len(),
                        subwords.len()
                    )));
                }
                let ranges = align_subwords(&example.tokens, subwords)?;
                Ok(ranges
                    .iter()
                    .map(|&(lo, hi)| {
                        let len = (hi - lo + 1) as f64;
                        (0..self.dim)
                            .map(|c| {
                                rec.vectors[lo..=hi].iter().map(|v| v[c]).sum::<f64>() / len
                            })
                            .collect()
                    })
                    .collect())
            }
        }
    }
}

/// The concrete encoder wired into a model.
#[derive(Debug, Clone)]
pub enum EncoderImpl {
    Toy { vocab: WordVocab },
    Precomputed { table: PrecomputedTable, path: String },
}

/// Serializable mirror of [`EncoderImpl`] for checkpoints; the external
/// table itself is data, not weights, and is re-read from its path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "encoder", rename_all = "snake_case")]
pub enum EncoderState {
    Toy { vocab: WordVocab },
    Pretrained { path: String },
}

impl EncoderImpl {
    pub fn state(&self) -> EncoderState {
        match self {
            EncoderImpl::Toy { vocab } => EncoderState::Toy {
                vocab: vocab.clone(),
            },
            EncoderImpl::Precomputed { path, .. } => EncoderState::Pretrained { path: path.clone() },
        }
    }

    pub fn from_state(state: EncoderState) -> Result<Self> {
        Ok(match state {
            EncoderState::Toy { vocab } => EncoderImpl::Toy { vocab },
            EncoderState::Pretrained { path } => EncoderImpl::Precomputed {
                table: PrecomputedTable::load(Path::new(&path))?,
                path,
            },
        })
    }

    /// Register this encoder's trainable parameters.
    pub fn init_params(&self, params: &mut ParamStore, d: usize, rng: &mut impl Rng) {
        match self {
            EncoderImpl::Toy { vocab } => {
                params.insert("enc.word_emb", xavier_uniform(vocab.len(), d, rng));
                params.insert("enc.mix_w", xavier_uniform(4 * d, d, rng));
                params.insert("enc.mix_b", Tensor::zeros(1, d));
                params.insert("enc.out_w", xavier_uniform(d, d, rng));
                params.insert("enc.out_b", Tensor::zeros(1, d));
            }
            EncoderImpl::Precomputed { table, .. } => {
                params.insert("enc.proj_w", xavier_uniform(table.dim(), d, rng));
                params.insert("enc.proj_b", Tensor::zeros(1, d));
            }
        }
    }

    /// Word-level contextual matrix |S| × d on the tape.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        example: &AnnotatedExample,
        d: usize,
    ) -> Result<NodeId> {
        let n = example.sentence_len();
        match self {
            EncoderImpl::Toy { vocab } => {
                if n > TOY_MAX_LEN {
                    return Err(SpandiffError::Model(format!(
                        "sentence {:?} has {n} words, beyond the encoder maximum {TOY_MAX_LEN}",
                        example.tokens.join(" ")
                    )));
                }
                let ids: Vec<usize> = example.tokens.iter().map(|w| vocab.id(w)).collect();
                let emb = tape.param("enc.word_emb", params.get("enc.word_emb"));
                let looked_up = tape.gather_rows(emb, &ids);

                let mut pos = Tensor::zeros(n, d);
                for i in 0..n {
                    pos.row_mut(i)
                        .copy_from_slice(&sinusoidal_embedding(i as f64, d));
                }
                let pos = tape.constant(pos);
                let e = tape.add(looked_up, pos);

                // Window-3 mixing with zero padding at the sentence edges,
                // plus the sentence mean so every position sees global
                // context.
                let zero = tape.constant(Tensor::zeros(1, d));
                let padded = tape.concat_rows(&[zero, e, zero]);
                let left = tape.gather_rows(padded, &(0..n).collect::<Vec<_>>());
                let center = tape.gather_rows(padded, &(1..n + 1).collect::<Vec<_>>());
                let right = tape.gather_rows(padded, &(2..n + 2).collect::<Vec<_>>());
                let mean = tape.mean_row_ranges(e, &[(0, n - 1)]);
                let mean_rep = tape.gather_rows(mean, &vec![0; n]);
                let cat = tape.concat_cols(&[left, center, right, mean_rep]);

                let mix_w = tape.param("enc.mix_w", params.get("enc.mix_w"));
                let mix_b = tape.param("enc.mix_b", params.get("enc.mix_b"));
                let mixed = tape.matmul(cat, mix_w);
                let mixed = tape.add_row_broadcast(mixed, mix_b);
                let mixed = tape.relu(mixed);

                let out_w = tape.param("enc.out_w", params.get("enc.out_w"));
                let out_b = tape.param("enc.out_b", params.get("enc.out_b"));
                let out = tape.matmul(mixed, out_w);
                Ok(tape.add_row_broadcast(out, out_b))
            }
            EncoderImpl::Precomputed { table, .. } => {
                let vectors = table.word_vectors(example)?;
                let frozen = tape.constant(Tensor::from_rows(&vectors));
                let w = tape.param("enc.proj_w", params.get("enc.proj_w"));
                let b = tape.param("enc.proj_b", params.get("enc.proj_b"));
                let projected = tape.matmul(frozen, w);
                Ok(tape.add_row_broadcast(projected, b))
            }
        }
    }
}
