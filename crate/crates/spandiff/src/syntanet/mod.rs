//! The denoising network: contextual encoding, syntax-aware temporal
//! attention over dependency structure, and the boundary/sentiment heads.
//! The composition lives in [`model::SyntaNet::denoise`].

pub mod attention;
pub mod encoder;
pub mod gcn;
pub mod heads;
pub mod model;
pub mod time;

pub use encoder::{EncoderImpl, EncoderState, PrecomputedTable, WordVocab};
pub use model::{Checkpoint, DenoiseNodes, SyntaNet};

use crate::config::{BoundaryLoss, X0Decode};
use crate::nn::{tape, Tensor};
use crate::schedule::SpanTensor;

/// Word-level contextual representations, one row per word.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Tensor,
}

impl EncoderOutput {
    pub fn sentence_len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn dim(&self) -> usize {
        self.hidden.cols()
    }
}

/// Per-slot output distributions: start/end over positions, polarity over
/// the three classes. Raw logits are kept alongside for loss computation.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotPrediction {
    pub p_start: Vec<Vec<f64>>,
    pub p_end: Vec<Vec<f64>>,
    pub p_polarity: Vec<Vec<f64>>,
    pub start_logits: Tensor,
    pub end_logits: Tensor,
    pub polarity_logits: Tensor,
}

impl SlotPrediction {
    pub fn from_logits(
        start_logits: Tensor,
        end_logits: Tensor,
        polarity_logits: Tensor,
        mode: BoundaryLoss,
    ) -> Self {
        let boundary_probs = |logits: &Tensor| -> Vec<Vec<f64>> {
            (0..logits.rows())
                .map(|r| {
                    let mut row = logits.row(r).to_vec();
                    match mode {
                        BoundaryLoss::Categorical => tape::softmax_in_place(&mut row),
                        BoundaryLoss::Binary => {
                            for v in row.iter_mut() {
                                *v = tape::sigmoid(*v);
                            }
                            let sum: f64 = row.iter().sum();
                            if sum > 0.0 {
                                for v in row.iter_mut() {
                                    *v /= sum;
                                }
                            }
                        }
                    }
                    row
                })
                .collect()
        };
        let p_start = boundary_probs(&start_logits);
        let p_end = boundary_probs(&end_logits);
        let p_polarity = (0..polarity_logits.rows())
            .map(|r| {
                let mut row = polarity_logits.row(r).to_vec();
                tape::softmax_in_place(&mut row);
                row
            })
            .collect();
        Self {
            p_start,
            p_end,
            p_polarity,
            start_logits,
            end_logits,
            polarity_logits,
        }
    }

    pub fn slots(&self) -> usize {
        self.p_start.len()
    }

    pub fn sentence_len(&self) -> usize {
        self.p_start.first().map_or(0, Vec::len)
    }
}

/// Map boundary distributions back to normalized coordinates. Soft mode
/// takes the probability-weighted mean position, hard mode the argmax;
/// positions are 1-based so the result stays within (−λ/2, λ/2].
pub fn x0_from_prediction(
    pred: &SlotPrediction,
    sentence_len: usize,
    lambda: f64,
    mode: X0Decode,
) -> SpanTensor {
    let n = sentence_len as f64;
    let position = |probs: &[f64]| -> f64 {
        match mode {
            X0Decode::SoftArgmax => probs
                .iter()
                .enumerate()
                .map(|(i, p)| p * (i + 1) as f64)
                .sum(),
            X0Decode::HardArgmax => (argmax(probs) + 1) as f64,
        }
    };
    let values = pred
        .p_start
        .iter()
        .zip(&pred.p_end)
        .map(|(ps, pe)| {
            [
                lambda * (position(ps) / n - 0.5),
                lambda * (position(pe) / n - 0.5),
            ]
        })
        .collect();
    SpanTensor {
        values,
        lambda,
        sentence_len,
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Standard transformer sinusoid: pairs of sin/cos at geometrically spaced
/// frequencies, base 10000.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let half = dim.div_ceil(2);
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = (position * freq).sin();
        if 2 * i + 1 < dim {
            out[2 * i + 1] = (position * freq).cos();
        }
    }
    out
}
