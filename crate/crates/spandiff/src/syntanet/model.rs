//! The denoising network `g(x_t, t, S)` assembled end to end:
//! encode → graph convolution → span pooling → attention stack →
//! timestep conditioning → boundary and sentiment heads.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{build_adjacency, AnnotatedExample, Vocabularies};
use crate::error::{Result, SpandiffError};
use crate::nn::{xavier_uniform, NodeId, ParamStore, Tape, Tensor};
use crate::schedule::{denormalize_spans, SpanTensor};

use super::attention::synta_attend_on_tape;
use super::encoder::{EncoderImpl, EncoderState};
use super::gcn::{gcn_on_tape, GcnInputs};
use super::heads::{boundary_logits_on_tape, init_head_params, polarity_logits_on_tape};
use super::time::{init_time_params, time_embed_on_tape};
use super::{x0_from_prediction, EncoderOutput, SlotPrediction};

/// Tape handles to the three logit blocks of one forward pass; the training
/// loop builds its loss directly on top of these.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseNodes {
    pub start_logits: NodeId,
    pub end_logits: NodeId,
    pub polarity_logits: NodeId,
}

#[derive(Debug)]
pub struct SyntaNet {
    pub config: TrainConfig,
    pub vocabs: Vocabularies,
    pub encoder: EncoderImpl,
    pub params: ParamStore,
    /// Resolved slot count N.
    pub slots: usize,
}

impl SyntaNet {
    /// Fresh model with seeded initialization. `slots` is the resolved N.
    pub fn init(
        config: TrainConfig,
        vocabs: Vocabularies,
        encoder: EncoderImpl,
        slots: usize,
    ) -> Result<Self> {
        config.validate()?;
        if slots < 1 {
            return Err(SpandiffError::Model("slot count must be >= 1".into()));
        }
        let d = config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();

        encoder.init_params(&mut params, d, &mut rng);

        params.insert("gcn.dep_emb", xavier_uniform(vocabs.dep_size(), d, &mut rng));
        params.insert("gcn.pos_emb", xavier_uniform(vocabs.pos_size(), d, &mut rng));
        for k in 0..config.gcn_layers {
            params.insert(format!("gcn.{k}.w1"), xavier_uniform(3 * d, d, &mut rng));
            params.insert(format!("gcn.{k}.b"), Tensor::zeros(1, d));
            params.insert(format!("gcn.{k}.w2"), xavier_uniform(3 * d, 1, &mut rng));
        }

        for l in 0..config.synta_layers {
            for half in ["self", "cross"] {
                for w in ["wq", "wk", "wv"] {
                    params.insert(
                        format!("synta.{l}.{half}_{w}"),
                        xavier_uniform(d, d, &mut rng),
                    );
                }
                params.insert(format!("synta.{l}.{half}_ln_g"), Tensor::full(1, d, 1.0));
                params.insert(format!("synta.{l}.{half}_ln_b"), Tensor::zeros(1, d));
            }
        }

        init_time_params(&mut params, d, config.time_mode);
        init_head_params(&mut params, d, &mut rng);

        Ok(Self {
            config,
            vocabs,
            encoder,
            params,
            slots,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    // ---- single-stage forward passes ----

    pub fn encode_on_tape(&self, tape: &mut Tape, example: &AnnotatedExample) -> Result<NodeId> {
        self.encoder
            .forward_on_tape(tape, &self.params, example, self.config.hidden_dim)
    }

    /// Word-level contextual representations for one sentence.
    pub fn encode(&self, example: &AnnotatedExample) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let h = self.encode_on_tape(&mut tape, example)?;
        Ok(EncoderOutput {
            hidden: tape.value(h).clone(),
        })
    }

    pub fn gcn_on_tape(
        &self,
        tape: &mut Tape,
        h0: NodeId,
        example: &AnnotatedExample,
    ) -> NodeId {
        let adjacency = build_adjacency(example, &self.vocabs);
        gcn_on_tape(
            tape,
            &self.params,
            h0,
            &GcnInputs {
                adjacency: &adjacency,
                pos_ids: &example.pos_ids,
            },
            self.config.gcn_layers,
        )
    }

    /// Syntax-enhanced representations from explicit inputs.
    pub fn gcn_forward(
        &self,
        h0: &Tensor,
        adjacency: &[Vec<usize>],
        pos_ids: &[usize],
    ) -> Tensor {
        let mut tape = Tape::new();
        let h0 = tape.constant(h0.clone());
        let out = gcn_on_tape(
            &mut tape,
            &self.params,
            h0,
            &GcnInputs { adjacency, pos_ids },
            self.config.gcn_layers,
        );
        tape.value(out).clone()
    }

    /// Slot representations by average pooling over the decoded spans of
    /// the current diffusion state.
    pub fn pool_spans(hidden: &Tensor, x_t: &SpanTensor) -> Tensor {
        let mut tape = Tape::new();
        let h = tape.constant(hidden.clone());
        let pooled = pool_on_tape(&mut tape, h, x_t);
        tape.value(pooled).clone()
    }

    pub fn synta_attend_on_tape(
        &self,
        tape: &mut Tape,
        slots: NodeId,
        sentence: NodeId,
    ) -> NodeId {
        synta_attend_on_tape(
            tape,
            &self.params,
            slots,
            sentence,
            self.config.synta_layers,
        )
    }

    /// Slot/sentence interaction on plain matrices.
    pub fn synta_attend(&self, slots: &Tensor, sentence: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let a = tape.constant(slots.clone());
        let s = tape.constant(sentence.clone());
        let out = self.synta_attend_on_tape(&mut tape, a, s);
        tape.value(out).clone()
    }

    /// Timestep conditioning on plain matrices.
    pub fn time_embed(&self, slots: &Tensor, t: usize) -> Tensor {
        let mut tape = Tape::new();
        let a = tape.constant(slots.clone());
        let out = time_embed_on_tape(&mut tape, &self.params, a, t, self.config.time_mode);
        tape.value(out).clone()
    }

    /// (start, end) logits on plain matrices.
    pub fn predict_boundaries(&self, slots: &Tensor, sentence: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let a = tape.constant(slots.clone());
        let s = tape.constant(sentence.clone());
        let (start, end) = boundary_logits_on_tape(&mut tape, &self.params, a, s);
        (tape.value(start).clone(), tape.value(end).clone())
    }

    /// Polarity logits on plain matrices.
    pub fn classify_sentiment(&self, slots: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let a = tape.constant(slots.clone());
        let out = polarity_logits_on_tape(&mut tape, &self.params, a);
        tape.value(out).clone()
    }

    // ---- the composed denoiser ----

    /// Full forward pass on a caller-owned tape, for training.
    pub fn denoise_on_tape(
        &self,
        tape: &mut Tape,
        x_t: &SpanTensor,
        t: usize,
        example: &AnnotatedExample,
    ) -> Result<DenoiseNodes> {
        if x_t.slots() != self.slots {
            return Err(SpandiffError::Model(format!(
                "state has {} slots, model expects {}",
                x_t.slots(),
                self.slots
            )));
        }
        let h0 = self.encode_on_tape(tape, example)?;
        let h_hat = self.gcn_on_tape(tape, h0, example);
        let pooled = pool_on_tape(tape, h_hat, x_t);
        let attended = self.synta_attend_on_tape(tape, pooled, h_hat);
        let conditioned = time_embed_on_tape(
            tape,
            &self.params,
            attended,
            t,
            self.config.time_mode,
        );
        let (start_logits, end_logits) =
            boundary_logits_on_tape(tape, &self.params, conditioned, h_hat);
        let polarity_logits = polarity_logits_on_tape(tape, &self.params, conditioned);
        Ok(DenoiseNodes {
            start_logits,
            end_logits,
            polarity_logits,
        })
    }

    /// Evaluation-mode forward pass: per-slot distributions plus the
    /// coordinate estimate that drives the reverse chain.
    pub fn denoise(
        &self,
        x_t: &SpanTensor,
        t: usize,
        example: &AnnotatedExample,
    ) -> Result<(SlotPrediction, SpanTensor)> {
        let mut tape = Tape::new();
        let nodes = self.denoise_on_tape(&mut tape, x_t, t, example)?;
        let pred = SlotPrediction::from_logits(
            tape.value(nodes.start_logits).clone(),
            tape.value(nodes.end_logits).clone(),
            tape.value(nodes.polarity_logits).clone(),
            self.config.boundary_loss,
        );
        let x0_hat = x0_from_prediction(
            &pred,
            example.sentence_len(),
            self.config.lambda,
            self.config.x0_decode,
        );
        Ok((pred, x0_hat))
    }

    // ---- persistence ----

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            model_type: MODEL_TYPE.to_string(),
            config: self.config.clone(),
            vocabs: self.vocabs.clone(),
            encoder: self.encoder.state(),
            slots: self.slots,
            params: self.params.clone(),
        };
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        Ok(Self {
            config: ckpt.config,
            vocabs: ckpt.vocabs,
            encoder: EncoderImpl::from_state(ckpt.encoder)?,
            params: ckpt.params,
            slots: ckpt.slots,
        })
    }
}

pub(crate) fn pool_on_tape(tape: &mut Tape, hidden: NodeId, x_t: &SpanTensor) -> NodeId {
    let spans = denormalize_spans(x_t);
    let ranges: Vec<(usize, usize)> = spans.iter().map(|&(s, e)| (s - 1, e - 1)).collect();
    tape.mean_row_ranges(hidden, &ranges)
}

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MODEL_TYPE: &str = "spandiff";

/// Versioned container for everything an inference run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_type: String,
    pub config: TrainConfig,
    pub vocabs: Vocabularies,
    pub encoder: EncoderState,
    pub slots: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SpandiffError::Checkpoint(format!("cannot read {}: {e}", path.display()))
        })?;
        // Inspect the header fields before the strict parse so a wrong-type
        // or wrong-version file gets a usable message.
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| SpandiffError::Checkpoint(format!("{}: {e}", path.display())))?;
        let model_type = value
            .get("model_type")
            .and_then(|v| v.as_str())
            .unwrap_or("");
        if model_type != MODEL_TYPE {
            return Err(SpandiffError::Checkpoint(format!(
                "{} holds a {model_type:?} model, expected {MODEL_TYPE:?}",
                path.display()
            )));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != CHECKPOINT_VERSION as u64 {
            return Err(SpandiffError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        serde_json::from_value(value)
            .map_err(|e| SpandiffError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::X0Decode;
    use crate::corpus::synthetic::synthetic_corpus;
    use crate::schedule::normalize_spans;
    use crate::syntanet::WordVocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(d: usize, slots: usize) -> (SyntaNet, Vec<AnnotatedExample>) {
        let (examples, vocabs, _) = synthetic_corpus(5, 10, 30);
        let config = TrainConfig {
            hidden_dim: d,
            slots: Some(slots),
            t_total: 100,
            gamma: 5,
            ..TrainConfig::default()
        };
        let encoder = EncoderImpl::Toy {
            vocab: WordVocab::build(&examples),
        };
        let model = SyntaNet::init(config, vocabs, encoder, slots).unwrap();
        (model, examples)
    }

    #[test]
    fn encode_single_word_has_one_row() {
        let (model, _) = toy_model(8, 2);
        let ex = AnnotatedExample {
            tokens: vec!["pasta".into()],
            pos_ids: vec![0],
            edges: vec![],
            gold: vec![],
        };
        let out = model.encode(&ex).unwrap();
        assert_eq!(out.sentence_len(), 1);
        assert_eq!(out.dim(), 8);
    }

    #[test]
    fn encode_is_deterministic_and_order_independent() {
        let (model, examples) = toy_model(8, 2);
        let a1 = model.encode(&examples[0]).unwrap();
        let b1 = model.encode(&examples[1]).unwrap();
        // Opposite order.
        let b2 = model.encode(&examples[1]).unwrap();
        let a2 = model.encode(&examples[0]).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn pool_single_token_span_equals_that_row() {
        let hidden = Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
        ]);
        let x = normalize_spans(&[(2, 2)], 3, 1.0).unwrap();
        let pooled = SyntaNet::pool_spans(&hidden, &x);
        assert_eq!(pooled.row(0), &[3.0, 4.0]);
    }

    #[test]
    fn pool_constant_matrix_gives_the_constant() {
        let hidden = Tensor::full(4, 3, 0.7);
        let x = normalize_spans(&[(1, 4)], 4, 1.0).unwrap();
        let pooled = SyntaNet::pool_spans(&hidden, &x);
        assert!(pooled.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn pool_matches_bruteforce_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let hidden = xavier_uniform(6, 4, &mut rng);
        let x = normalize_spans(&[(2, 4)], 6, 1.0).unwrap();
        let pooled = SyntaNet::pool_spans(&hidden, &x);
        for c in 0..4 {
            let brute = (hidden.get(1, c) + hidden.get(2, c) + hidden.get(3, c)) / 3.0;
            assert!((pooled.get(0, c) - brute).abs() < 1e-15);
        }
    }

    #[test]
    fn denoise_shapes_and_determinism() {
        let (model, examples) = toy_model(8, 3);
        let ex = &examples[0];
        let n = ex.sentence_len();
        let x_t = SpanTensor {
            values: vec![[0.1, 0.3], [-0.2, 0.0], [0.4, 0.2]],
            lambda: 1.0,
            sentence_len: n,
        };
        let (pred, x0_hat) = model.denoise(&x_t, 10, ex).unwrap();
        assert_eq!(pred.start_logits.shape(), (3, n));
        assert_eq!(pred.end_logits.shape(), (3, n));
        assert_eq!(pred.polarity_logits.shape(), (3, 3));
        assert_eq!(x0_hat.slots(), 3);

        let (pred2, x0_hat2) = model.denoise(&x_t, 10, ex).unwrap();
        assert_eq!(pred, pred2);
        assert_eq!(x0_hat, x0_hat2);

        // Distributions normalize.
        for rows in [&pred.p_start, &pred.p_end, &pred.p_polarity] {
            for row in rows {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn denoise_handles_single_word_sentences() {
        let (model, _) = toy_model(8, 2);
        let ex = AnnotatedExample {
            tokens: vec!["soup".into()],
            pos_ids: vec![0],
            edges: vec![],
            gold: vec![],
        };
        let x_t = SpanTensor {
            values: vec![[0.4, -0.1], [0.0, 0.2]],
            lambda: 1.0,
            sentence_len: 1,
        };
        let (pred, x0_hat) = model.denoise(&x_t, 3, &ex).unwrap();
        assert_eq!(pred.start_logits.shape(), (2, 1));
        for row in &pred.p_start {
            assert_eq!(row, &vec![1.0]);
        }
        // The only position normalizes to the top of the coordinate band.
        for v in &x0_hat.values {
            assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_argmax_decode_is_available() {
        let (mut model, examples) = toy_model(8, 2);
        model.config.x0_decode = X0Decode::HardArgmax;
        let ex = &examples[0];
        let x_t = SpanTensor {
            values: vec![[0.0, 0.1], [0.2, 0.3]],
            lambda: 1.0,
            sentence_len: ex.sentence_len(),
        };
        let (pred, x0_hat) = model.denoise(&x_t, 5, ex).unwrap();
        // Hard decode must land exactly on a normalized integer position.
        let n = ex.sentence_len() as f64;
        for (slot, v) in x0_hat.values.iter().enumerate() {
            let s = crate::syntanet::argmax(&pred.p_start[slot]) + 1;
            assert!((v[0] - (s as f64 / n - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let (model, examples) = toy_model(8, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        model.save(&path).unwrap();
        let loaded = SyntaNet::load(&path).unwrap();
        assert_eq!(model.params, loaded.params);
        assert_eq!(model.config, loaded.config);
        assert_eq!(model.vocabs, loaded.vocabs);
        assert_eq!(model.slots, loaded.slots);

        // Identical forward outputs after reload.
        let x_t = SpanTensor {
            values: vec![[0.0, 0.1], [0.2, 0.3], [-0.1, 0.4]],
            lambda: 1.0,
            sentence_len: examples[0].sentence_len(),
        };
        let (a, _) = model.denoise(&x_t, 7, &examples[0]).unwrap();
        let (b, _) = loaded.denoise(&x_t, 7, &examples[0]).unwrap();
        assert_eq!(a, b);

        // Re-serialization is byte-identical.
        let path2 = dir.path().join("model2.ckpt.json");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
