//! Label-aware graph convolution over the dependency adjacency matrix.
//!
//! Per layer, each word aggregates its neighbors (self-loop included)
//! through a gated transform conditioned on the dependency-label and POS
//! embeddings of the neighbor:
//!
//! ```text
//! u_ij = M_ij · softmax_j( w2 · [h_j ; E_dep(i,j) ; E_pos(j)] )
//! h_i' = ReLU( Σ_j u_ij · (W1 · [h_j ; E_dep(i,j) ; E_pos(j)] + b) )
//! ```
//!
//! `M_ij` is the shifted label value from `corpus::build_adjacency`, so the
//! softmax runs over the actual neighbor set and non-edges contribute
//! nothing at all.

use crate::nn::{NodeId, ParamStore, Tape, Tensor};

pub struct GcnInputs<'a> {
    pub adjacency: &'a [Vec<usize>],
    pub pos_ids: &'a [usize],
}

pub fn gcn_on_tape(
    tape: &mut Tape,
    params: &ParamStore,
    h0: NodeId,
    inputs: &GcnInputs<'_>,
    layers: usize,
) -> NodeId {
    let n = tape.value(h0).rows();
    assert_eq!(inputs.adjacency.len(), n, "adjacency size mismatch");
    assert_eq!(inputs.pos_ids.len(), n, "pos_ids size mismatch");

    let dep_emb = tape.param("gcn.dep_emb", params.get("gcn.dep_emb"));
    let pos_emb = tape.param("gcn.pos_emb", params.get("gcn.pos_emb"));

    // Neighbor lists are fixed across layers.
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| inputs.adjacency[i][j] != 0).collect())
        .collect();

    let mut h = h0;
    for k in 0..layers {
        let w1 = tape.param(&format!("gcn.{k}.w1"), params.get(&format!("gcn.{k}.w1")));
        let b = tape.param(&format!("gcn.{k}.b"), params.get(&format!("gcn.{k}.b")));
        let w2 = tape.param(&format!("gcn.{k}.w2"), params.get(&format!("gcn.{k}.w2")));

        let mut rows = Vec::with_capacity(n);
        for (i, js) in neighbors.iter().enumerate() {
            debug_assert!(!js.is_empty(), "self-loops guarantee a neighbor");
            let label_ids: Vec<usize> = js
                .iter()
                .map(|&j| inputs.adjacency[i][j] - 1)
                .collect();
            let gate_scale: Vec<f64> = js
                .iter()
                .map(|&j| inputs.adjacency[i][j] as f64)
                .collect();
            let neigh_pos: Vec<usize> = js.iter().map(|&j| inputs.pos_ids[j]).collect();

            let h_j = tape.gather_rows(h, js);
            let e_dep = tape.gather_rows(dep_emb, &label_ids);
            let e_pos = tape.gather_rows(pos_emb, &neigh_pos);
            let feat = tape.concat_cols(&[h_j, e_dep, e_pos]); // deg × 3d

            let scores = tape.matmul(feat, w2); // deg × 1
            let scores_row = tape.reshape(scores, 1, js.len());
            let soft = tape.softmax_rows(scores_row);
            let scale = tape.constant(Tensor::new(1, js.len(), gate_scale));
            let gate = tape.mul(soft, scale); // 1 × deg

            let transformed = tape.matmul(feat, w1);
            let transformed = tape.add_row_broadcast(transformed, b); // deg × d
            let agg = tape.matmul(gate, transformed); // 1 × d
            rows.push(tape.relu(agg));
        }
        h = tape.concat_rows(&rows);
    }
    h
}
