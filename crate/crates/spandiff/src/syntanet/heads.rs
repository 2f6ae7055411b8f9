//! Output heads. The boundary head is an additive pointer: the slot
//! projection and the token projection combine by broadcast addition, pass
//! through tanh, and a readout vector maps each (slot, position) pair to a
//! logit — one head for start, one for end. The sentiment head is a
//! two-layer perceptron over the slot representations.

use rand::Rng;

use crate::nn::{xavier_uniform, NodeId, ParamStore, Tape, Tensor};

/// (start_logits, end_logits), each N × |S|.
pub fn boundary_logits_on_tape(
    tape: &mut Tape,
    params: &ParamStore,
    slots: NodeId,
    sentence: NodeId,
) -> (NodeId, NodeId) {
    let n = tape.value(slots).rows();
    let s = tape.value(sentence).rows();
    let one_head = |tape: &mut Tape, which: &str| -> NodeId {
        let slot_w = tape.param(&format!("head.{which}.slot_w"), params.get(&format!("head.{which}.slot_w")));
        let tok_w = tape.param(&format!("head.{which}.tok_w"), params.get(&format!("head.{which}.tok_w")));
        let b = tape.param(&format!("head.{which}.b"), params.get(&format!("head.{which}.b")));
        let u = tape.param(&format!("head.{which}.u"), params.get(&format!("head.{which}.u")));
        let q = tape.matmul(slots, slot_w);
        let k = tape.matmul(sentence, tok_w);
        let pairs = tape.outer_row_sum(q, k); // (N·|S|) × d
        let pairs = tape.add_row_broadcast(pairs, b);
        let act = tape.tanh(pairs);
        let scores = tape.matmul(act, u); // (N·|S|) × 1
        tape.reshape(scores, n, s)
    };
    let start = one_head(tape, "start");
    let end = one_head(tape, "end");
    (start, end)
}

/// Polarity logits, N × 3.
pub fn polarity_logits_on_tape(
    tape: &mut Tape,
    params: &ParamStore,
    slots: NodeId,
) -> NodeId {
    let w1 = tape.param("head.pol.w1", params.get("head.pol.w1"));
    let b1 = tape.param("head.pol.b1", params.get("head.pol.b1"));
    let w2 = tape.param("head.pol.w2", params.get("head.pol.w2"));
    let b2 = tape.param("head.pol.b2", params.get("head.pol.b2"));
    let hidden = tape.matmul(slots, w1);
    let hidden = tape.add_row_broadcast(hidden, b1);
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, w2);
    tape.add_row_broadcast(out, b2)
}

pub fn init_head_params(params: &mut ParamStore, d: usize, rng: &mut impl Rng) {
    for which in ["start", "end"] {
        params.insert(format!("head.{which}.slot_w"), xavier_uniform(d, d, rng));
        params.insert(format!("head.{which}.tok_w"), xavier_uniform(d, d, rng));
        params.insert(format!("head.{which}.b"), Tensor::zeros(1, d));
        params.insert(format!("head.{which}.u"), xavier_uniform(d, 1, rng));
    }
    params.insert("head.pol.w1", xavier_uniform(d, d, rng));
    params.insert("head.pol.b1", Tensor::zeros(1, d));
    params.insert("head.pol.w2", xavier_uniform(d, 3, rng));
    params.insert("head.pol.b2", Tensor::zeros(1, 3));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::softmax_in_place;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head_params(d: usize, seed: u64) -> ParamStore {
        let mut p = ParamStore::new();
        init_head_params(&mut p, d, &mut ChaCha8Rng::seed_from_u64(seed));
        p
    }

    #[test]
    fn boundary_shapes_are_slots_by_positions() {
        let d = 6;
        let params = head_params(d, 41);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let slots = tape.constant(xavier_uniform(3, d, &mut rng));
        let sentence = tape.constant(xavier_uniform(7, d, &mut rng));
        let (start, end) = boundary_logits_on_tape(&mut tape, &params, slots, sentence);
        assert_eq!(tape.value(start).shape(), (3, 7));
        assert_eq!(tape.value(end).shape(), (3, 7));
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let d = 6;
        let mut params = head_params(d, 43);
        for which in ["start", "end"] {
            *params.get_mut(&format!("head.{which}.slot_w")) = Tensor::zeros(d, d);
            *params.get_mut(&format!("head.{which}.tok_w")) = Tensor::zeros(d, d);
            *params.get_mut(&format!("head.{which}.u")) = Tensor::zeros(d, 1);
        }
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let slots = tape.constant(xavier_uniform(2, d, &mut rng));
        let sentence = tape.constant(xavier_uniform(5, d, &mut rng));
        let (start, _) = boundary_logits_on_tape(&mut tape, &params, slots, sentence);
        for r in 0..2 {
            let mut row = tape.value(start).row(r).to_vec();
            softmax_in_place(&mut row);
            for p in row {
                assert!((p - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_final_layer_gives_uniform_polarity() {
        let d = 6;
        let mut params = head_params(d, 45);
        *params.get_mut("head.pol.w2") = Tensor::zeros(d, 3);
        *params.get_mut("head.pol.b2") = Tensor::zeros(1, 3);
        let mut tape = Tape::new();
        let slots = tape.constant(xavier_uniform(4, d, &mut ChaCha8Rng::seed_from_u64(46)));
        let logits = polarity_logits_on_tape(&mut tape, &params, slots);
        for r in 0..4 {
            let mut row = tape.value(logits).row(r).to_vec();
            softmax_in_place(&mut row);
            for p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn polarity_softmax_rows_sum_to_one_and_argmax_shift_invariant() {
        let d = 6;
        let params = head_params(d, 47);
        let mut tape = Tape::new();
        let slots = tape.constant(xavier_uniform(4, d, &mut ChaCha8Rng::seed_from_u64(48)));
        let logits = polarity_logits_on_tape(&mut tape, &params, slots);
        for r in 0..4 {
            let base = tape.value(logits).row(r).to_vec();
            let mut probs = base.clone();
            softmax_in_place(&mut probs);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);

            let shifted: Vec<f64> = base.iter().map(|v| v + 11.5).collect();
            let arg = |row: &[f64]| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(arg(&base), arg(&shifted));
        }
    }

    #[test]
    fn boundary_gradient_matches_finite_differences() {
        // Head-level oracle at fp64: d=8, |S|=5, N=3.
        let (n_slots, s_len, d) = (3, 5, 8);
        let mut params = head_params(d, 49);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let slots_val = xavier_uniform(n_slots, d, &mut rng);
        let sent_val = xavier_uniform(s_len, d, &mut rng);
        let probe_s = xavier_uniform(n_slots, s_len, &mut rng);
        let probe_e = xavier_uniform(n_slots, s_len, &mut rng);

        let loss_of = |params: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let slots = tape.constant(slots_val.clone());
            let sentence = tape.constant(sent_val.clone());
            let (start, end) = boundary_logits_on_tape(&mut tape, params, slots, sentence);
            let sp = tape.softmax_rows(start);
            let ep = tape.softmax_rows(end);
            let ws = tape.constant(probe_s.clone());
            let we = tape.constant(probe_e.clone());
            let a = tape.mul(sp, ws);
            let b = tape.mul(ep, we);
            let sa = tape.sum_all(a);
            let sb = tape.sum_all(b);
            let total = tape.add(sa, sb);
            tape.value(total).item()
        };

        let mut tape = Tape::new();
        let slots = tape.constant(slots_val.clone());
        let sentence = tape.constant(sent_val.clone());
        let (start, end) = boundary_logits_on_tape(&mut tape, &params, slots, sentence);
        let sp = tape.softmax_rows(start);
        let ep = tape.softmax_rows(end);
        let ws = tape.constant(probe_s.clone());
        let we = tape.constant(probe_e.clone());
        let a = tape.mul(sp, ws);
        let b = tape.mul(ep, we);
        let sa = tape.sum_all(a);
        let sb = tape.sum_all(b);
        let total = tape.add(sa, sb);
        let analytic = tape.backward(total).into_param_grads(&tape);

        let h = 1e-5;
        for which in ["start", "end"] {
            for part in ["slot_w", "tok_w", "b", "u"] {
                let name = format!("head.{which}.{part}");
                let len = params.get(&name).len();
                for idx in 0..len {
                    let orig = params.get(&name).data()[idx];
                    params.get_mut(&name).data_mut()[idx] = orig + h;
                    let up = loss_of(&params);
                    params.get_mut(&name).data_mut()[idx] = orig - h;
                    let down = loss_of(&params);
                    params.get_mut(&name).data_mut()[idx] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let ana = analytic[&name].data()[idx];
                    let denom = ana.abs().max(numeric.abs());
                    if denom < 1e-7 {
                        assert!((ana - numeric).abs() < 1e-8, "{name}[{idx}]");
                    } else {
                        assert!(
                            (ana - numeric).abs() / denom < 1e-4,
                            "{name}[{idx}]: analytic {ana} vs numeric {numeric}"
                        );
                    }
                }
            }
        }
    }
}
