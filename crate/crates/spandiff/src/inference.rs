//! Reverse-chain sampling: start from pure noise, alternate network
//! prediction with deterministic reverse steps, then decode, deduplicate,
//! and threshold the final slot distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedExample, Polarity};
use crate::error::Result;
use crate::schedule::{ddim_step, gaussian_noise, DdimPlan, NoiseSchedule, SpanTensor};
use crate::syntanet::{argmax, SlotPrediction, SyntaNet};

/// One extracted aspect with its joint confidence
/// `p_start[s] · p_end[e] · max polarity probability`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub start: usize,
    pub end: usize,
    pub polarity: Polarity,
    pub score: f64,
}

/// Anything that can play the role of `g(x_t, t, S)` in the reverse chain.
/// Implemented by the real network and by test oracles.
pub trait Denoiser {
    fn slots(&self) -> usize;
    fn lambda(&self) -> f64;
    fn denoise(
        &self,
        x_t: &SpanTensor,
        t: usize,
        example: &AnnotatedExample,
    ) -> Result<(SlotPrediction, SpanTensor)>;
}

impl Denoiser for SyntaNet {
    fn slots(&self) -> usize {
        self.slots
    }

    fn lambda(&self) -> f64 {
        self.config.lambda
    }

    fn denoise(
        &self,
        x_t: &SpanTensor,
        t: usize,
        example: &AnnotatedExample,
    ) -> Result<(SlotPrediction, SpanTensor)> {
        SyntaNet::denoise(self, x_t, t, example)
    }
}

/// Decoded state after one reverse step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    /// 1-based position in the plan, counting from the noisiest step.
    pub step: usize,
    pub t: usize,
    pub t_prev: usize,
    /// Integer spans decoded from the post-step coordinates, per slot.
    pub slot_spans: Vec<(usize, usize)>,
    /// Deduplicated, thresholded predictions decoded from this step's
    /// distributions.
    pub decoded: Vec<Prediction>,
}

/// Decode each slot by argmax over start/end/polarity.
fn decode_slots(pred: &SlotPrediction) -> Vec<Prediction> {
    let mut out = Vec::with_capacity(pred.slots());
    for i in 0..pred.slots() {
        let s_idx = argmax(&pred.p_start[i]);
        let e_idx = argmax(&pred.p_end[i]);
        let p_idx = argmax(&pred.p_polarity[i]);
        let score = pred.p_start[i][s_idx] * pred.p_end[i][e_idx] * pred.p_polarity[i][p_idx];
        let (start, end) = if s_idx <= e_idx {
            (s_idx + 1, e_idx + 1)
        } else {
            (e_idx + 1, s_idx + 1)
        };
        out.push(Prediction {
            start,
            end,
            polarity: Polarity::from_index(p_idx),
            score,
        });
    }
    out
}

/// Collapse slots that decoded to the same span: the highest-scoring member
/// decides the polarity and the group score. Output is sorted by
/// (start, end). Idempotent.
pub fn dedup(predictions: &[Prediction]) -> Vec<Prediction> {
    let mut best: Vec<Prediction> = Vec::new();
    for p in predictions {
        match best
            .iter_mut()
            .find(|b| b.start == p.start && b.end == p.end)
        {
            Some(b) => {
                if p.score > b.score {
                    *b = *p;
                }
            }
            None => best.push(*p),
        }
    }
    best.sort_by_key(|p| (p.start, p.end));
    best
}

fn finalize(pred: &SlotPrediction, threshold: f64) -> Vec<Prediction> {
    dedup(&decode_slots(pred))
        .into_iter()
        .filter(|p| p.score > threshold)
        .collect()
}

/// Run the reverse chain from an explicit initial state, recording every
/// step. The last record's `decoded` list is the sampling output.
pub fn run_chain<D: Denoiser>(
    denoiser: &D,
    example: &AnnotatedExample,
    sched: &NoiseSchedule,
    plan: &DdimPlan,
    threshold: f64,
    x_init: SpanTensor,
) -> Result<Vec<TraceStep>> {
    let mut x = x_init;
    let mut steps = Vec::with_capacity(plan.gamma());
    for (k, (t, t_prev)) in plan.steps().into_iter().enumerate() {
        let (pred, x0_hat) = denoiser.denoise(&x, t, example)?;
        x = ddim_step(&x, &x0_hat, t, t_prev, sched)?;
        steps.push(TraceStep {
            step: k + 1,
            t,
            t_prev,
            slot_spans: crate::schedule::denormalize_spans(&x),
            decoded: finalize(&pred, threshold),
        });
    }
    Ok(steps)
}

/// Deterministic core of [`sample`]: everything after the initial draw.
pub fn sample_from<D: Denoiser>(
    denoiser: &D,
    example: &AnnotatedExample,
    sched: &NoiseSchedule,
    plan: &DdimPlan,
    threshold: f64,
    x_init: SpanTensor,
) -> Result<Vec<Prediction>> {
    let steps = run_chain(denoiser, example, sched, plan, threshold, x_init)?;
    Ok(steps.into_iter().last().map(|s| s.decoded).unwrap_or_default())
}

/// Draw `x_T` from a standard normal and refine it into predictions.
pub fn sample<D: Denoiser>(
    denoiser: &D,
    example: &AnnotatedExample,
    sched: &NoiseSchedule,
    plan: &DdimPlan,
    threshold: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Prediction>> {
    let x_init = initial_state(denoiser, example, rng);
    sample_from(denoiser, example, sched, plan, threshold, x_init)
}

/// As [`sample`], but returning the per-step trace.
pub fn trace_denoising<D: Denoiser>(
    denoiser: &D,
    example: &AnnotatedExample,
    sched: &NoiseSchedule,
    plan: &DdimPlan,
    threshold: f64,
    rng: &mut impl Rng,
) -> Result<Vec<TraceStep>> {
    let x_init = initial_state(denoiser, example, rng);
    run_chain(denoiser, example, sched, plan, threshold, x_init)
}

pub fn initial_state<D: Denoiser>(
    denoiser: &D,
    example: &AnnotatedExample,
    rng: &mut impl Rng,
) -> SpanTensor {
    SpanTensor {
        values: gaussian_noise(denoiser.slots(), rng),
        lambda: denoiser.lambda(),
        sentence_len: example.sentence_len(),
    }
}
