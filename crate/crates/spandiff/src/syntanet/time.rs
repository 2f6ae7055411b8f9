//! Timestep conditioning. The sinusoidal embedding of t is projected and
//! combined with the slot representations either additively or as a
//! feature-wise scale-and-shift. Both projections start at zero, so a
//! freshly initialized model conditions on nothing until training moves
//! the weights.

use crate::config::TimeMode;
use crate::nn::{NodeId, ParamStore, Tape, Tensor};

use super::sinusoidal_embedding;

pub fn time_embed_on_tape(
    tape: &mut Tape,
    params: &ParamStore,
    slots: NodeId,
    t: usize,
    mode: TimeMode,
) -> NodeId {
    let d = tape.value(slots).cols();
    let n = tape.value(slots).rows();
    let embedding = Tensor::new(1, d, sinusoidal_embedding(t as f64, d));
    let e_t = tape.constant(embedding);
    match mode {
        TimeMode::Add => {
            let w = tape.param("time.add_w", params.get("time.add_w"));
            let b = tape.param("time.add_b", params.get("time.add_b"));
            let proj = tape.matmul(e_t, w);
            let proj = tape.add(proj, b);
            tape.add_row_broadcast(slots, proj)
        }
        TimeMode::ScaleShift => {
            let sw = tape.param("time.scale_w", params.get("time.scale_w"));
            let sb = tape.param("time.scale_b", params.get("time.scale_b"));
            let hw = tape.param("time.shift_w", params.get("time.shift_w"));
            let hb = tape.param("time.shift_b", params.get("time.shift_b"));
            let scale = tape.matmul(e_t, sw);
            let scale = tape.add(scale, sb);
            let one_plus = tape.add_scalar(scale, 1.0);
            let rep = tape.gather_rows(one_plus, &vec![0; n]);
            let scaled = tape.mul(slots, rep);
            let shift = tape.matmul(e_t, hw);
            let shift = tape.add(shift, hb);
            tape.add_row_broadcast(scaled, shift)
        }
    }
}

/// Register the conditioning projections for `mode`, zero-initialized.
pub fn init_time_params(params: &mut ParamStore, d: usize, mode: TimeMode) {
    match mode {
        TimeMode::Add => {
            params.insert("time.add_w", Tensor::zeros(d, d));
            params.insert("time.add_b", Tensor::zeros(1, d));
        }
        TimeMode::ScaleShift => {
            params.insert("time.scale_w", Tensor::zeros(d, d));
            params.insert("time.scale_b", Tensor::zeros(1, d));
            params.insert("time.shift_w", Tensor::zeros(d, d));
            params.insert("time.shift_b", Tensor::zeros(1, d));
        }
    }
}
