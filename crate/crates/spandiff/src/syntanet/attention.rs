//! Single-head scaled dot-product attention and the slot/sentence
//! interaction stack: per layer, self-attention over the slots followed by
//! cross-attention with the sentence rows, each wrapped in a residual
//! connection with layer normalization.

use crate::nn::{NodeId, ParamStore, Tape};

/// `softmax(q·kᵀ/√d)·v`. Also returns the weight matrix node so callers can
/// inspect the attention distribution.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> (NodeId, NodeId) {
    let d = tape.value(q).cols() as f64;
    let scores = tape.matmul_nt(q, k);
    let scaled = tape.scalar_mul(scores, 1.0 / d.sqrt());
    let weights = tape.softmax_rows(scaled);
    (tape.matmul(weights, v), weights)
}

/// One projected attention sublayer with residual + layer norm.
fn attention_block(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    queries_from: NodeId,
    keys_values_from: NodeId,
) -> NodeId {
    let wq = tape.param(&format!("{prefix}_wq"), params.get(&format!("{prefix}_wq")));
    let wk = tape.param(&format!("{prefix}_wk"), params.get(&format!("{prefix}_wk")));
    let wv = tape.param(&format!("{prefix}_wv"), params.get(&format!("{prefix}_wv")));
    let q = tape.matmul(queries_from, wq);
    let k = tape.matmul(keys_values_from, wk);
    let v = tape.matmul(keys_values_from, wv);
    let (attended, _) = scaled_dot_attention(tape, q, k, v);
    let residual = tape.add(queries_from, attended);
    let g = tape.param(&format!("{prefix}_ln_g"), params.get(&format!("{prefix}_ln_g")));
    let b = tape.param(&format!("{prefix}_ln_b"), params.get(&format!("{prefix}_ln_b")));
    tape.layer_norm_rows(residual, g, b)
}

/// The full interaction stack: `layers` rounds of slot self-attention and
/// slot→sentence cross-attention.
pub fn synta_attend_on_tape(
    tape: &mut Tape,
    params: &ParamStore,
    slots: NodeId,
    sentence: NodeId,
    layers: usize,
) -> NodeId {
    let mut a = slots;
    for l in 0..layers {
        a = attention_block(tape, params, &format!("synta.{l}.self"), a, a);
        a = attention_block(tape, params, &format!("synta.{l}.cross"), a, sentence);
    }
    a
}
