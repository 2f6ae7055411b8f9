//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients. All arithmetic is f64 and
//! strictly sequential, so results are bit-reproducible for fixed inputs.

use std::collections::BTreeMap;

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    AddScalar(NodeId),
    /// A[m,n] + broadcast of b[1,n] to every row.
    AddRowBroadcast(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// A · Bᵀ without materializing the transpose.
    MatmulNT(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    GatherRows {
        input: NodeId,
        ids: Vec<usize>,
    },
    /// Mean over inclusive 0-based row ranges; one output row per range.
    MeanRowRanges {
        input: NodeId,
        ranges: Vec<(usize, usize)>,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// out[i*m + j, :] = a[i, :] + b[j, :]
    OuterRowSum(NodeId, NodeId),
    LayerNormRows {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// Pick single entries (r, c) into a column vector.
    SelectItems {
        input: NodeId,
        items: Vec<(usize, usize)>,
    },
    SumAll(NodeId),
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A leaf that requires no parameter gradient bookkeeping.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// A named leaf. Binding the same name twice returns the first node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(t.clone(), Op::Leaf);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.rows(), x.cols(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.rows(), x.cols(), data);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.rows(), x.cols(), data);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: f64) -> NodeId {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::ScalarMul(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(y.rows(), 1, "broadcast operand must be a single row");
        assert_eq!(x.cols(), y.cols(), "broadcast: column mismatch");
        let mut out = x.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + y.get(0, c);
                out.set(r, c, v);
            }
        }
        self.push(out, Op::AddRowBroadcast(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = matmul(self.value(a), self.value(b));
        self.push(t, Op::Matmul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = matmul_nt(self.value(a), self.value(b));
        self.push(t, Op::MatmulNT(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            log_softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn gather_rows(&mut self, input: NodeId, ids: &[usize]) -> NodeId {
        let x = self.value(input);
        let mut out = Tensor::zeros(ids.len(), x.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(x.row(id));
        }
        self.push(
            out,
            Op::GatherRows {
                input,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn mean_row_ranges(&mut self, input: NodeId, ranges: &[(usize, usize)]) -> NodeId {
        let x = self.value(input);
        let mut out = Tensor::zeros(ranges.len(), x.cols());
        for (r, &(lo, hi)) in ranges.iter().enumerate() {
            assert!(lo <= hi && hi < x.rows(), "mean_row_ranges: bad range");
            let len = (hi - lo + 1) as f64;
            for c in 0..x.cols() {
                let mut acc = 0.0;
                for i in lo..=hi {
                    acc += x.get(i, c);
                }
                out.set(r, c, acc / len);
            }
        }
        self.push(
            out,
            Op::MeanRowRanges {
                input,
                ranges: ranges.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows(), rows, "concat_cols: row mismatch");
            for r in 0..rows {
                for c in 0..x.cols() {
                    out.set(r, offset + c, x.get(r, c));
                }
            }
            offset += x.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Tensor::zeros(total, cols);
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols(), cols, "concat_rows: column mismatch");
            for r in 0..x.rows() {
                out.row_mut(offset + r).copy_from_slice(x.row(r));
            }
            offset += x.rows();
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn outer_row_sum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols(), "outer_row_sum: column mismatch");
        let (n, m, d) = (x.rows(), y.rows(), x.cols());
        let mut out = Tensor::zeros(n * m, d);
        for i in 0..n {
            for j in 0..m {
                for c in 0..d {
                    out.set(i * m + j, c, x.get(i, c) + y.get(j, c));
                }
            }
        }
        self.push(out, Op::OuterRowSum(a, b))
    }

    pub fn layer_norm_rows(&mut self, input: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let x = self.value(input);
        let g = self.value(gain);
        let b = self.value(bias);
        assert_eq!(g.rows(), 1);
        assert_eq!(b.rows(), 1);
        assert_eq!(g.cols(), x.cols());
        assert_eq!(b.cols(), x.cols());
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g.get(0, c) + b.get(0, c);
            }
        }
        self.push(out, Op::LayerNormRows { input, gain, bias })
    }

    pub fn select_items(&mut self, input: NodeId, items: &[(usize, usize)]) -> NodeId {
        let x = self.value(input);
        let data: Vec<f64> = items.iter().map(|&(r, c)| x.get(r, c)).collect();
        let t = Tensor::new(items.len(), 1, data);
        self.push(
            t,
            Op::SelectItems {
                input,
                items: items.to_vec(),
            },
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let t = self.value(a).reshaped(rows, cols);
        self.push(t, Op::Reshape(a))
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients; use
    /// [`Gradients::into_param_grads`] to pull out the named parameters.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, piece: Tensor| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, p) in existing.data_mut().iter_mut().zip(piece.data()) {
                        *e += p;
                    }
                }
                slot @ None => *slot = Some(piece),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, gout.clone());
                add_to(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, gout.clone());
                add_to(grads, *b, gout.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).clone(), self.value(*b).clone());
                let ga = Tensor::new(
                    gout.rows(),
                    gout.cols(),
                    gout.data().iter().zip(xb.data()).map(|(g, v)| g * v).collect(),
                );
                let gb = Tensor::new(
                    gout.rows(),
                    gout.cols(),
                    gout.data().iter().zip(xa.data()).map(|(g, v)| g * v).collect(),
                );
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::ScalarMul(a, s) => add_to(grads, *a, gout.map(|x| x * s)),
            Op::AddScalar(a) => add_to(grads, *a, gout.clone()),
            Op::AddRowBroadcast(a, b) => {
                add_to(grads, *a, gout.clone());
                let mut gb = Tensor::zeros(1, gout.cols());
                for r in 0..gout.rows() {
                    for c in 0..gout.cols() {
                        let v = gb.get(0, c) + gout.get(r, c);
                        gb.set(0, c, v);
                    }
                }
                add_to(grads, *b, gb);
            }
            Op::Matmul(a, b) => {
                // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                let ga = matmul_nt(gout, self.value(*b));
                let gb = matmul_tn(self.value(*a), gout);
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::MatmulNT(a, b) => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                let ga = matmul(gout, self.value(*b));
                let gb = matmul_tn(gout, self.value(*a));
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = gout
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                add_to(grads, *a, Tensor::new(x.rows(), x.cols(), data));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let data = gout
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, v)| g * (1.0 - v * v))
                    .collect();
                add_to(grads, *a, Tensor::new(y.rows(), y.cols(), data));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let data = gout
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, v)| g * v * (1.0 - v))
                    .collect();
                add_to(grads, *a, Tensor::new(y.rows(), y.cols(), data));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let data = gout
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, v)| g * sigmoid(*v))
                    .collect();
                add_to(grads, *a, Tensor::new(x.rows(), x.cols(), data));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = (0..y.cols()).map(|c| gout.get(r, c) * y.get(r, c)).sum();
                    for c in 0..y.cols() {
                        gx.set(r, c, y.get(r, c) * (gout.get(r, c) - dot));
                    }
                }
                add_to(grads, *a, gx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[idx].value; // log-probabilities
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = (0..y.cols()).map(|c| gout.get(r, c)).sum();
                    for c in 0..y.cols() {
                        gx.set(r, c, gout.get(r, c) - y.get(r, c).exp() * gsum);
                    }
                }
                add_to(grads, *a, gx);
            }
            Op::GatherRows { input, ids } => {
                let x = self.value(*input);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..x.cols() {
                        let v = gx.get(id, c) + gout.get(r, c);
                        gx.set(id, c, v);
                    }
                }
                add_to(grads, *input, gx);
            }
            Op::MeanRowRanges { input, ranges } => {
                let x = self.value(*input);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for (r, &(lo, hi)) in ranges.iter().enumerate() {
                    let w = 1.0 / (hi - lo + 1) as f64;
                    for i in lo..=hi {
                        for c in 0..x.cols() {
                            let v = gx.get(i, c) + gout.get(r, c) * w;
                            gx.set(i, c, v);
                        }
                    }
                }
                add_to(grads, *input, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let x = self.value(p);
                    let mut gp = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        for c in 0..x.cols() {
                            gp.set(r, c, gout.get(r, offset + c));
                        }
                    }
                    offset += x.cols();
                    add_to(grads, p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let x = self.value(p);
                    let mut gp = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        gp.row_mut(r).copy_from_slice(&gout.row(offset + r)[..x.cols()]);
                    }
                    offset += x.rows();
                    add_to(grads, p, gp);
                }
            }
            Op::OuterRowSum(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let (n, m, d) = (xa.rows(), xb.rows(), xa.cols());
                let mut ga = Tensor::zeros(n, d);
                let mut gb = Tensor::zeros(m, d);
                for i in 0..n {
                    for j in 0..m {
                        for c in 0..d {
                            let g = gout.get(i * m + j, c);
                            ga.set(i, c, ga.get(i, c) + g);
                            gb.set(j, c, gb.get(j, c) + g);
                        }
                    }
                }
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::LayerNormRows { input, gain, bias } => {
                let x = self.value(*input);
                let g = self.value(*gain);
                let n = x.cols() as f64;
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                let mut gg = Tensor::zeros(1, x.cols());
                let mut gb = Tensor::zeros(1, x.cols());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dy: Vec<f64> = (0..x.cols()).map(|c| gout.get(r, c)).collect();
                    let dxhat: Vec<f64> = (0..x.cols()).map(|c| dy[c] * g.get(0, c)).collect();
                    let m1 = dxhat.iter().sum::<f64>() / n;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..x.cols() {
                        gx.set(r, c, inv * (dxhat[c] - m1 - xhat[c] * m2));
                        gg.set(0, c, gg.get(0, c) + dy[c] * xhat[c]);
                        gb.set(0, c, gb.get(0, c) + dy[c]);
                    }
                }
                add_to(grads, *input, gx);
                add_to(grads, *gain, gg);
                add_to(grads, *bias, gb);
            }
            Op::SelectItems { input, items } => {
                let x = self.value(*input);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for (k, &(r, c)) in items.iter().enumerate() {
                    let v = gx.get(r, c) + gout.get(k, 0);
                    gx.set(r, c, v);
                }
                add_to(grads, *input, gx);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                add_to(grads, *a, Tensor::full(x.rows(), x.cols(), gout.item()));
            }
            Op::Reshape(a) => {
                let x = self.value(*a);
                add_to(grads, *a, gout.reshaped(x.rows(), x.cols()));
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn node_grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradients for every named parameter bound on `tape`. Parameters the
    /// loss never touched get zero gradients of the right shape.
    pub fn into_param_grads(self, tape: &Tape) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &id) in &tape.params {
            let g = self.grads[id.0]
                .clone()
                .unwrap_or_else(|| {
                    let v = tape.value(id);
                    Tensor::zeros(v.rows(), v.cols())
                });
            out.insert(name.clone(), g);
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows(), "matmul: inner dimension mismatch");
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        for p in 0..k {
            let av = a.get(i, p);
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                let v = out.get(i, j) + av * b.get(p, j);
                out.set(i, j, v);
            }
        }
    }
    out
}

fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.cols(), "matmul_nt: inner dimension mismatch");
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.get(i, p) * b.get(j, p);
            }
            out.set(i, j, acc);
        }
    }
    out
}

fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows(), b.rows(), "matmul_tn: inner dimension mismatch");
    let (m, k, n) = (a.cols(), a.rows(), b.cols());
    let mut out = Tensor::zeros(m, n);
    for p in 0..k {
        for i in 0..m {
            let av = a.get(p, i);
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                let v = out.get(i, j) + av * b.get(p, j);
                out.set(i, j, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on a scalar-valued function of one tensor.
    fn finite_diff(f: &mut dyn FnMut(&Tensor) -> f64, at: &Tensor, h: f64) -> Tensor {
        let mut g = Tensor::zeros(at.rows(), at.cols());
        for i in 0..at.len() {
            let mut plus = at.clone();
            plus.data_mut()[i] += h;
            let mut minus = at.clone();
            minus.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn check_grad(name: &str, build: &mut dyn FnMut(&mut Tape, NodeId) -> NodeId, at: Tensor) {
        let mut tape = Tape::new();
        let x = tape.param("x", &at);
        let out = build(&mut tape, x);
        let grads = tape.backward(out);
        let analytic = grads.node_grad(x).unwrap().clone();

        let numeric = finite_diff(
            &mut |t: &Tensor| {
                let mut tp = Tape::new();
                let x = tp.param("x", t);
                let out = build(&mut tp, x);
                tp.value(out).item()
            },
            &at,
            1e-6,
        );
        let diff = analytic.max_abs_diff(&numeric);
        assert!(diff < 1e-6, "{name}: grad mismatch {diff}");
    }

    #[test]
    fn grad_elementwise_chain() {
        let at = Tensor::from_rows(&[vec![0.3, -0.7], vec![1.2, 0.4]]);
        check_grad(
            "tanh-sigmoid-mul",
            &mut |t, x| {
                let a = t.tanh(x);
                let b = t.sigmoid(x);
                let c = t.mul(a, b);
                t.sum_all(c)
            },
            at,
        );
    }

    #[test]
    fn grad_matmul_paths() {
        let at = Tensor::from_rows(&[vec![0.5, -0.2, 0.1], vec![0.7, 0.3, -0.4]]);
        check_grad(
            "matmul",
            &mut |t, x| {
                let w = t.constant(Tensor::from_rows(&[
                    vec![0.2, -0.1],
                    vec![0.4, 0.3],
                    vec![-0.5, 0.6],
                ]));
                let y = t.matmul(x, w); // plain path
                let z = t.matmul_nt(x, x); // both transposed-path derivatives hit x
                let sy = t.sum_all(y);
                let sz = t.sum_all(z);
                t.add(sy, sz)
            },
            at,
        );
    }

    #[test]
    fn grad_softmax_and_logsoftmax() {
        let at = Tensor::from_rows(&[vec![0.1, 0.9, -0.3], vec![1.5, 0.2, 0.0]]);
        check_grad(
            "softmax",
            &mut |t, x| {
                let s = t.softmax_rows(x);
                let w = t.constant(Tensor::from_rows(&[
                    vec![0.3, -0.7, 0.2],
                    vec![0.1, 0.5, -0.2],
                ]));
                let p = t.mul(s, w);
                t.sum_all(p)
            },
            at.clone(),
        );
        check_grad(
            "log_softmax",
            &mut |t, x| {
                let s = t.log_softmax_rows(x);
                let picked = t.select_items(s, &[(0, 1), (1, 0)]);
                let neg = t.scalar_mul(picked, -1.0);
                t.sum_all(neg)
            },
            at,
        );
    }

    #[test]
    fn grad_structural_ops() {
        let at = Tensor::from_rows(&[vec![0.4, 0.9], vec![-0.2, 0.3], vec![0.8, -0.6]]);
        check_grad(
            "gather-mean-concat-outer",
            &mut |t, x| {
                let g = t.gather_rows(x, &[2, 0, 0]);
                let m = t.mean_row_ranges(x, &[(0, 1), (1, 2)]);
                let pad = t.gather_rows(m, &[0, 1, 1]);
                let cat = t.concat_cols(&[g, pad]);
                let o = t.outer_row_sum(cat, cat);
                let th = t.tanh(o);
                t.sum_all(th)
            },
            at,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let at = Tensor::from_rows(&[vec![0.4, -0.9, 0.1, 2.0], vec![1.0, 0.3, -0.5, 0.7]]);
        check_grad(
            "layer_norm",
            &mut |t, x| {
                let gain = t.constant(Tensor::from_rows(&[vec![1.1, 0.9, 1.3, 0.7]]));
                let bias = t.constant(Tensor::from_rows(&[vec![0.1, -0.2, 0.0, 0.3]]));
                let y = t.layer_norm_rows(x, gain, bias);
                let w = t.constant(Tensor::from_rows(&[
                    vec![0.3, -0.1, 0.2, 0.5],
                    vec![-0.4, 0.6, 0.1, -0.2],
                ]));
                let p = t.mul(y, w);
                t.sum_all(p)
            },
            at,
        );
    }

    #[test]
    fn grad_broadcast_and_softplus() {
        let at = Tensor::from_rows(&[vec![0.5, -1.2, 0.3]]);
        check_grad(
            "broadcast-softplus",
            &mut |t, x| {
                let a = t.constant(Tensor::from_rows(&[
                    vec![0.2, 0.1, -0.3],
                    vec![0.7, -0.5, 0.4],
                ]));
                let s = t.add_row_broadcast(a, x);
                let sp = t.softplus(s);
                t.sum_all(sp)
            },
            at,
        );
    }

    #[test]
    fn param_binding_accumulates_reuse() {
        // Using a parameter twice must accumulate both contributions.
        let w = Tensor::from_rows(&[vec![2.0]]);
        let mut tape = Tape::new();
        let x = tape.param("w", &w);
        let y = tape.mul(x, x); // y = w², dy/dw = 2w = 4
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        let g = grads.into_param_grads(&tape);
        assert_eq!(g["w"].item(), 4.0);
    }

    #[test]
    fn untouched_param_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param("used", &Tensor::scalar(3.0));
        let _unused = tape.param("unused", &Tensor::from_rows(&[vec![1.0, 2.0]]));
        let s = tape.sum_all(x);
        let g = tape.backward(s).into_param_grads(&tape);
        assert_eq!(g["unused"], Tensor::zeros(1, 2));
        assert_eq!(g["used"].item(), 1.0);
    }
}
