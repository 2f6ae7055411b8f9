//! BIO sequence-labeling baseline: seven polarity-fused tags over the
//! shared encoder, per-token softmax, greedy decoding with begin-repair
//! for illegal continuation tags.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{AnnotatedExample, AspectAnnotation, Polarity, Vocabularies};
use crate::error::{Result, SpandiffError};
use crate::evaluation::{score, EvalMode};
use crate::inference::Prediction;
use crate::nn::{clip_global_norm, xavier_uniform, AdamW, NodeId, ParamStore, Tape, Tensor};
use crate::syntanet::model::{CHECKPOINT_VERSION, MODEL_TYPE as DIFFUSION_MODEL_TYPE};
use crate::syntanet::{EncoderImpl, EncoderState, WordVocab};

/// O, or begin/inside fused with a polarity: 7 tags total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BioTag {
    O,
    B(Polarity),
    I(Polarity),
}

pub const TAG_COUNT: usize = 7;

impl BioTag {
    pub fn index(self) -> usize {
        match self {
            BioTag::O => 0,
            BioTag::B(p) => 1 + p.index(),
            BioTag::I(p) => 4 + p.index(),
        }
    }

    pub fn from_index(i: usize) -> BioTag {
        match i {
            0 => BioTag::O,
            1..=3 => BioTag::B(Polarity::from_index(i - 1)),
            4..=6 => BioTag::I(Polarity::from_index(i - 4)),
            _ => panic!("tag index {i} out of range"),
        }
    }
}

impl std::fmt::Display for BioTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BioTag::O => write!(f, "O"),
            BioTag::B(p) => write!(f, "B-{}", short(*p)),
            BioTag::I(p) => write!(f, "I-{}", short(*p)),
        }
    }
}

fn short(p: Polarity) -> &'static str {
    match p {
        Polarity::Positive => "pos",
        Polarity::Negative => "neg",
        Polarity::Neutral => "neu",
    }
}

/// Gold spans to a BIO tag sequence. Overlapping gold spans cannot be
/// expressed and are rejected with the offending example named.
pub fn spans_to_tags(example: &AnnotatedExample) -> Result<Vec<BioTag>> {
    let n = example.sentence_len();
    let mut sorted = example.gold.clone();
    sorted.sort_by_key(|g| (g.start, g.end));
    for w in sorted.windows(2) {
        if w[1].start <= w[0].end {
            return Err(SpandiffError::Corpus(format!(
                "example {:?}: spans ({},{}) and ({},{}) overlap",
                example.tokens.join(" "),
                w[0].start,
                w[0].end,
                w[1].start,
                w[1].end
            )));
        }
    }
    let mut tags = vec![BioTag::O; n];
    for g in &sorted {
        tags[g.start - 1] = BioTag::B(g.polarity);
        for tag in tags.iter_mut().take(g.end).skip(g.start) {
            *tag = BioTag::I(g.polarity);
        }
    }
    Ok(tags)
}

/// Decode a tag sequence into spans. An `I-x` that does not continue an
/// open `x` span is repaired into a begin.
pub fn tags_to_spans(tags: &[BioTag]) -> Vec<AspectAnnotation> {
    let mut out = Vec::new();
    let mut open: Option<(usize, Polarity)> = None;
    for (i, &tag) in tags.iter().enumerate() {
        let pos = i + 1;
        match tag {
            BioTag::O => {
                if let Some((start, pol)) = open.take() {
                    out.push(AspectAnnotation::new(start, pos - 1, pol));
                }
            }
            BioTag::B(pol) => {
                if let Some((start, prev)) = open.take() {
                    out.push(AspectAnnotation::new(start, pos - 1, prev));
                }
                open = Some((pos, pol));
            }
            BioTag::I(pol) => match open {
                Some((_, prev)) if prev == pol => {}
                _ => {
                    // begin-repair
                    if let Some((start, prev)) = open.take() {
                        out.push(AspectAnnotation::new(start, pos - 1, prev));
                    }
                    open = Some((pos, pol));
                }
            },
        }
    }
    if let Some((start, pol)) = open {
        out.push(AspectAnnotation::new(start, tags.len(), pol));
    }
    out
}

pub const SEQLAB_MODEL_TYPE: &str = "seqlab";

/// Per-token classifier over the shared encoder abstraction.
#[derive(Debug)]
pub struct SeqLabModel {
    pub config: TrainConfig,
    pub vocabs: Vocabularies,
    pub encoder: EncoderImpl,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct SeqLabCheckpoint {
    version: u32,
    model_type: String,
    config: TrainConfig,
    vocabs: Vocabularies,
    encoder: EncoderState,
    params: ParamStore,
}

impl SeqLabModel {
    pub fn init(
        config: TrainConfig,
        vocabs: Vocabularies,
        encoder: EncoderImpl,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        encoder.init_params(&mut params, d, &mut rng);
        params.insert("seqlab.head_w", xavier_uniform(d, TAG_COUNT, &mut rng));
        params.insert("seqlab.head_b", Tensor::zeros(1, TAG_COUNT));
        Ok(Self {
            config,
            vocabs,
            encoder,
            params,
        })
    }

    fn logits_on_tape(&self, tape: &mut Tape, example: &AnnotatedExample) -> Result<NodeId> {
        let h = self
            .encoder
            .forward_on_tape(tape, &self.params, example, self.config.hidden_dim)?;
        let w = tape.param("seqlab.head_w", self.params.get("seqlab.head_w"));
        let b = tape.param("seqlab.head_b", self.params.get("seqlab.head_b"));
        let logits = tape.matmul(h, w);
        Ok(tape.add_row_broadcast(logits, b))
    }

    /// Greedy per-token decode followed by tag-to-span conversion. The
    /// score of a span is the mean probability of its chosen tags.
    pub fn predict(&self, example: &AnnotatedExample) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let logits = self.logits_on_tape(&mut tape, example)?;
        let probs = tape.softmax_rows(logits);
        let probs = tape.value(probs);
        let mut tags = Vec::with_capacity(example.sentence_len());
        let mut tag_probs = Vec::with_capacity(example.sentence_len());
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let best = crate::syntanet::argmax(row);
            tags.push(BioTag::from_index(best));
            tag_probs.push(row[best]);
        }
        Ok(tags_to_spans(&tags)
            .into_iter()
            .map(|a| {
                let (lo, hi) = a.zero_based();
                let score =
                    tag_probs[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
                Prediction {
                    start: a.start,
                    end: a.end,
                    polarity: a.polarity,
                    score,
                }
            })
            .collect())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let ckpt = SeqLabCheckpoint {
            version: CHECKPOINT_VERSION,
            model_type: SEQLAB_MODEL_TYPE.to_string(),
            config: self.config.clone(),
            vocabs: self.vocabs.clone(),
            encoder: self.encoder.state(),
            params: self.params.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SpandiffError::Checkpoint(format!("cannot read {}: {e}", path.display()))
        })?;
        let ckpt: SeqLabCheckpoint = serde_json::from_str(&text)
            .map_err(|e| SpandiffError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.model_type != SEQLAB_MODEL_TYPE {
            return Err(SpandiffError::Checkpoint(format!(
                "{} holds a {:?} model, expected {SEQLAB_MODEL_TYPE:?} (diffusion checkpoints are {DIFFUSION_MODEL_TYPE:?})",
                path.display(),
                ckpt.model_type
            )));
        }
        Ok(Self {
            config: ckpt.config,
            vocabs: ckpt.vocabs,
            encoder: EncoderImpl::from_state(ckpt.encoder)?,
            params: ckpt.params,
        })
    }
}

/// Train the baseline with the same optimizer defaults as the main model,
/// selecting on dev AESC micro-F1.
pub fn train_seqlab(
    config: &TrainConfig,
    train: &[AnnotatedExample],
    dev: &[AnnotatedExample],
    vocabs: &Vocabularies,
) -> Result<(SeqLabModel, f64)> {
    if train.is_empty() {
        return Err(SpandiffError::Training("empty training set".into()));
    }
    let encoder = match &config.encoder {
        crate::config::EncoderKind::Toy => EncoderImpl::Toy {
            vocab: WordVocab::build(train),
        },
        crate::config::EncoderKind::Pretrained(path) => EncoderImpl::Precomputed {
            table: crate::syntanet::PrecomputedTable::load(std::path::Path::new(path))?,
            path: path.clone(),
        },
    };
    let mut model = SeqLabModel::init(config.clone(), vocabs.clone(), encoder)?;
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Gold tags are fixed; precompute and fail fast on overlaps.
    let tag_targets: Vec<Vec<BioTag>> = train
        .iter()
        .map(spans_to_tags)
        .collect::<Result<_>>()?;

    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_params = model.params.clone();

    let eval = |model: &SeqLabModel| -> Result<f64> {
        if dev.is_empty() {
            return Ok(0.0);
        }
        let mut preds = Vec::with_capacity(dev.len());
        let mut golds = Vec::with_capacity(dev.len());
        for ex in dev {
            preds.push(model.predict(ex)?);
            golds.push(ex.gold.clone());
        }
        Ok(score(&preds, &golds, EvalMode::Aesc)?.f1())
    };

    if config.epochs == 0 {
        best_f1 = eval(&model)?;
    }

    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let logits = model.logits_on_tape(&mut tape, &train[i])?;
                let logp = tape.log_softmax_rows(logits);
                let items: Vec<(usize, usize)> = tag_targets[i]
                    .iter()
                    .enumerate()
                    .map(|(r, t)| (r, t.index()))
                    .collect();
                let picked = tape.select_items(logp, &items);
                let neg = tape.scalar_mul(picked, -1.0);
                losses.push(tape.sum_all(neg));
            }
            let stacked = tape.concat_rows(&losses);
            let total = tape.sum_all(stacked);
            let mean = tape.scalar_mul(total, 1.0 / chunk.len() as f64);
            let loss = tape.value(mean).item();
            if !loss.is_finite() {
                return Err(SpandiffError::Training(format!(
                    "non-finite baseline loss {loss}"
                )));
            }
            let mut grads = tape.backward(mean).into_param_grads(&tape);
            clip_global_norm(&mut grads, config.grad_clip);
            opt.step(&mut model.params, &grads);
        }
        let f1 = eval(&model)?;
        if f1 > best_f1 {
            best_f1 = f1;
            best_params = model.params.clone();
        }
    }

    model.params = best_params;
    Ok((model, best_f1.max(0.0)))
}
