//! Reverse-mode automatic differentiation over matrices, recorded on a tape.
//!
//! The denoiser's forward pass is expressed as a small set of matrix ops
//! (matmul, broadcasts, ReLU, per-row layer norm, fused multi-head
//! attention); each op records its operands so one backward sweep yields
//! exact gradients for every parameter and, when requested, for the input.
//! Ops are batched: linear layers run on a single (batch·seq) x dim matrix,
//! and attention is a fused block-diagonal op, which keeps the node count per
//! training step small enough for single-core throughput.
//!
//! The element type is generic: f64 for the finite-difference verification
//! suites, f32 for bulk training where double precision buys nothing.

use crate::error::{Error, Result};
use ndarray::{s, Array2};

/// Floating-point scalar the numeric core is generic over.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a tape node.
pub type NodeId = usize;

enum Op<T> {
    /// Gradient-collecting leaf: the model input.
    Input,
    /// Leaf tied to parameter slot `usize` in the model's parameter list.
    Param(usize),
    /// Leaf with no gradient (e.g. time embeddings).
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// (n x d) plus a (1 x d) row broadcast over all rows.
    AddRow(NodeId, NodeId),
    /// Rows of a (B x d) matrix repeated `block` times each, multiplied
    /// elementwise into a (B*block x d) matrix.
    MulBlockRows(NodeId, NodeId, usize),
    /// Same broadcast pattern, added.
    AddBlockRows(NodeId, NodeId, usize),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Relu(NodeId),
    /// Per-row normalization to zero mean / unit variance (population
    /// variance, epsilon floor inside the sqrt). Caches each row's 1/sigma.
    LayerNormRows { x: NodeId, rstd: Vec<T> },
    /// Fused block-diagonal multi-head self-attention core:
    /// softmax(Q Kᵀ / sqrt(d_head)) V evaluated independently per batch item
    /// and head on (batch*seq x embed) inputs. Caches the softmax
    /// probabilities per (item, head) for the backward sweep.
    Attention { q: NodeId, k: NodeId, v: NodeId, batch: usize, seq: usize, heads: usize, probs: Vec<Array2<T>> },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

/// Recorded forward computation. Build nodes with the op methods, then call
/// `backward` exactly once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by a backward sweep: one slot per parameter index plus
/// optional input gradients keyed by node id.
pub struct TapeGradients<T> {
    pub by_param: Vec<Option<Array2<T>>>,
    pub by_input: Vec<(NodeId, Array2<T>)>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn value(&self, id: NodeId) -> &Array2<T> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, values: Array2<T>) -> NodeId {
        self.push(values, Op::Input)
    }

    pub fn param(&mut self, slot: usize, values: Array2<T>) -> NodeId {
        self.push(values, Op::Param(slot))
    }

    pub fn constant(&mut self, values: Array2<T>) -> NodeId {
        self.push(values, Op::Constant)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.nodes[a].value.dim();
        let (rb, cb) = self.nodes[b].value.dim();
        if ca != rb {
            return Err(Error::Config(format!("matmul shape mismatch {}x{} . {}x{}", ra, ca, rb, cb)));
        }
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.dim() != self.nodes[b].value.dim() {
            return Err(Error::Config("add shape mismatch".into()));
        }
        let v = &self.nodes[a].value + &self.nodes[b].value;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, d) = self.nodes[x].value.dim();
        let (rr, rd) = self.nodes[row].value.dim();
        if rr != 1 || rd != d {
            return Err(Error::Config("row broadcast needs a 1 x d operand".into()));
        }
        let v = &self.nodes[x].value + &self.nodes[row].value;
        Ok(self.push(v, Op::AddRow(x, row)))
    }

    fn check_block(&self, x: NodeId, rows: NodeId, block: usize) -> Result<()> {
        let (n, d) = self.nodes[x].value.dim();
        let (b, rd) = self.nodes[rows].value.dim();
        if block == 0 || rd != d || b * block != n {
            return Err(Error::Config(format!(
                "block broadcast mismatch: {}x{} against {}x{} blocks of {}",
                n, d, b, rd, block
            )));
        }
        Ok(())
    }

    pub fn mul_block_rows(&mut self, x: NodeId, rows: NodeId, block: usize) -> Result<NodeId> {
        self.check_block(x, rows, block)?;
        let (n, d) = self.nodes[x].value.dim();
        let mut v = self.nodes[x].value.clone();
        for r in 0..n {
            let src = r / block;
            for c in 0..d {
                v[[r, c]] *= self.nodes[rows].value[[src, c]];
            }
        }
        Ok(self.push(v, Op::MulBlockRows(x, rows, block)))
    }

    pub fn add_block_rows(&mut self, x: NodeId, rows: NodeId, block: usize) -> Result<NodeId> {
        self.check_block(x, rows, block)?;
        let (n, d) = self.nodes[x].value.dim();
        let mut v = self.nodes[x].value.clone();
        for r in 0..n {
            let src = r / block;
            for c in 0..d {
                v[[r, c]] += self.nodes[rows].value[[src, c]];
            }
        }
        Ok(self.push(v, Op::AddBlockRows(x, rows, block)))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let v = &self.nodes[a].value * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: T) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x + offset);
        self.push(v, Op::AddScalar(a, offset))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    /// Per-row layer normalization with epsilon floor 1e-5 inside the sqrt.
    pub fn layer_norm_rows(&mut self, x: NodeId) -> NodeId {
        let src = &self.nodes[x].value;
        let (n, d) = src.dim();
        let dt = T::of_f64(d as f64);
        let eps = T::of_f64(1e-5);
        let mut v = Array2::zeros((n, d));
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = src.row(r);
            let mut mean = T::zero();
            for c in 0..d {
                mean += row[c];
            }
            mean /= dt;
            let mut var = T::zero();
            for c in 0..d {
                let dv = row[c] - mean;
                var += dv * dv;
            }
            var /= dt;
            let r_inv = T::one() / (var + eps).sqrt();
            rstd.push(r_inv);
            for c in 0..d {
                v[[r, c]] = (row[c] - mean) * r_inv;
            }
        }
        self.push(v, Op::LayerNormRows { x, rstd })
    }

    /// Fused multi-head self-attention over block-diagonal batches: inputs
    /// are (batch*seq x embed) projections, attention never crosses batch
    /// items, heads split the embed dimension evenly.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, batch: usize, seq: usize, heads: usize) -> Result<NodeId> {
        let dim = self.nodes[q].value.dim();
        if self.nodes[k].value.dim() != dim || self.nodes[v].value.dim() != dim {
            return Err(Error::Config("attention operands must share a shape".into()));
        }
        let (n, e) = dim;
        if batch * seq != n || heads == 0 || e % heads != 0 {
            return Err(Error::Config(format!(
                "attention shape mismatch: {}x{} with batch {} seq {} heads {}",
                n, e, batch, seq, heads
            )));
        }
        let dh = e / heads;
        let scale = T::of_f64(1.0 / (dh as f64).sqrt());
        let mut out = Array2::zeros((n, e));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let rows = s![b * seq..(b + 1) * seq, ..];
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qs = self.nodes[q].value.slice(rows).slice_move(cols);
                let ks = self.nodes[k].value.slice(rows).slice_move(cols);
                let vs = self.nodes[v].value.slice(rows).slice_move(cols);
                let mut scores = qs.dot(&ks.t());
                scores.mapv_inplace(|x| x * scale);
                // Row-wise softmax with max subtraction for stability.
                for mut row in scores.rows_mut() {
                    let mut m = row[0];
                    for c in 1..seq {
                        if row[c] > m {
                            m = row[c];
                        }
                    }
                    let mut sum = T::zero();
                    for c in 0..seq {
                        let ex = (row[c] - m).exp();
                        row[c] = ex;
                        sum += ex;
                    }
                    for c in 0..seq {
                        row[c] /= sum;
                    }
                }
                let ctx = scores.dot(&vs);
                out.slice_mut(rows).slice_mut(cols).assign(&ctx);
                probs.push(scores);
            }
        }
        Ok(self.push(out, Op::Attention { q, k, v, batch, seq, heads, probs }))
    }

    /// Reverse sweep from `root`, seeded with `seed` (the loss gradient with
    /// respect to the root's value). Returns parameter gradients indexed by
    /// slot (length `n_param_slots`) and, if `want_input_grads`, gradients
    /// for every Input leaf. A tape can only be walked once.
    pub fn backward(
        &mut self,
        root: NodeId,
        seed: &Array2<T>,
        n_param_slots: usize,
        want_input_grads: bool,
    ) -> Result<TapeGradients<T>> {
        if self.consumed {
            return Err(Error::Config("tape already consumed by a previous backward pass".into()));
        }
        self.consumed = true;
        if seed.dim() != self.nodes[root].value.dim() {
            return Err(Error::Config("backward seed shape differs from root shape".into()));
        }
        let mut adjoints: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[root] = Some(seed.clone());
        let mut by_param: Vec<Option<Array2<T>>> = (0..n_param_slots).map(|_| None).collect();
        let mut by_input: Vec<(NodeId, Array2<T>)> = Vec::new();

        fn accumulate<T: Real>(slot: &mut Option<Array2<T>>, grad: Array2<T>) {
            match slot {
                None => *slot = Some(grad),
                Some(acc) => *acc += &grad,
            }
        }

        for id in (0..self.nodes.len()).rev() {
            let Some(grad) = adjoints[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Input => {
                    if want_input_grads {
                        by_input.push((id, grad));
                    }
                }
                Op::Param(slot) => {
                    let slot = *slot;
                    if slot >= n_param_slots {
                        return Err(Error::Config(format!("parameter slot {} out of range", slot)));
                    }
                    accumulate(&mut by_param[slot], grad);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = grad.dot(&self.nodes[b].value.t());
                    let gb = self.nodes[a].value.t().dot(&grad);
                    accumulate(&mut adjoints[a], ga);
                    accumulate(&mut adjoints[b], gb);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut adjoints[a], grad.clone());
                    accumulate(&mut adjoints[b], grad);
                }
                Op::AddRow(x, row) => {
                    let (x, row) = (*x, *row);
                    let mut rg = Array2::zeros((1, grad.ncols()));
                    for r in 0..grad.nrows() {
                        for c in 0..grad.ncols() {
                            rg[[0, c]] += grad[[r, c]];
                        }
                    }
                    accumulate(&mut adjoints[x], grad);
                    accumulate(&mut adjoints[row], rg);
                }
                Op::MulBlockRows(x, rows, block) => {
                    let (x, rows, block) = (*x, *rows, *block);
                    let (n, d) = grad.dim();
                    let bcount = self.nodes[rows].value.nrows();
                    let mut gx = grad.clone();
                    let mut gr = Array2::zeros((bcount, d));
                    for r in 0..n {
                        let src = r / block;
                        for c in 0..d {
                            gx[[r, c]] = grad[[r, c]] * self.nodes[rows].value[[src, c]];
                            gr[[src, c]] += grad[[r, c]] * self.nodes[x].value[[r, c]];
                        }
                    }
                    accumulate(&mut adjoints[x], gx);
                    accumulate(&mut adjoints[rows], gr);
                }
                Op::AddBlockRows(x, rows, block) => {
                    let (x, rows, block) = (*x, *rows, *block);
                    let (n, d) = grad.dim();
                    let bcount = self.nodes[rows].value.nrows();
                    let mut gr = Array2::zeros((bcount, d));
                    for r in 0..n {
                        let src = r / block;
                        for c in 0..d {
                            gr[[src, c]] += grad[[r, c]];
                        }
                    }
                    accumulate(&mut adjoints[x], grad);
                    accumulate(&mut adjoints[rows], gr);
                }
                Op::Scale(a, factor) => {
                    let (a, factor) = (*a, *factor);
                    accumulate(&mut adjoints[a], &grad * factor);
                }
                Op::AddScalar(a, _) => {
                    accumulate(&mut adjoints[*a], grad);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mut ga = grad;
                    for (g, x) in ga.iter_mut().zip(self.nodes[a].value.iter()) {
                        if *x <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    accumulate(&mut adjoints[a], ga);
                }
                Op::LayerNormRows { x, rstd } => {
                    let x = *x;
                    let (n, d) = grad.dim();
                    let dt = T::of_f64(d as f64);
                    let y = &self.nodes[id].value;
                    let mut gx = Array2::zeros((n, d));
                    for r in 0..n {
                        let mut gsum = T::zero();
                        let mut gysum = T::zero();
                        for c in 0..d {
                            gsum += grad[[r, c]];
                            gysum += grad[[r, c]] * y[[r, c]];
                        }
                        let gmean = gsum / dt;
                        let gymean = gysum / dt;
                        for c in 0..d {
                            gx[[r, c]] = rstd[r] * (grad[[r, c]] - gmean - y[[r, c]] * gymean);
                        }
                    }
                    accumulate(&mut adjoints[x], gx);
                }
                Op::Attention { q, k, v, batch, seq, heads, probs } => {
                    let (q, k, v) = (*q, *k, *v);
                    let (batch, seq, heads) = (*batch, *seq, *heads);
                    let e = grad.ncols();
                    let dh = e / heads;
                    let scale = T::of_f64(1.0 / (dh as f64).sqrt());
                    let mut gq = Array2::zeros(grad.dim());
                    let mut gk = Array2::zeros(grad.dim());
                    let mut gv = Array2::zeros(grad.dim());
                    for b in 0..batch {
                        let rows = s![b * seq..(b + 1) * seq, ..];
                        for h in 0..heads {
                            let cols = s![.., h * dh..(h + 1) * dh];
                            let p = &probs[b * heads + h];
                            let go = grad.slice(rows).slice_move(cols);
                            let qs = self.nodes[q].value.slice(rows).slice_move(cols);
                            let ks = self.nodes[k].value.slice(rows).slice_move(cols);
                            let vs = self.nodes[v].value.slice(rows).slice_move(cols);
                            // dV = Pᵀ dOut.
                            let dv = p.t().dot(&go);
                            // dP = dOut Vᵀ, then softmax backward row-wise.
                            let dp = go.dot(&vs.t());
                            let mut ds = Array2::zeros((seq, seq));
                            for r in 0..seq {
                                let mut dot = T::zero();
                                for c in 0..seq {
                                    dot += dp[[r, c]] * p[[r, c]];
                                }
                                for c in 0..seq {
                                    ds[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot) * scale;
                                }
                            }
                            let dq = ds.dot(&ks);
                            let dk = ds.t().dot(&qs);
                            gq.slice_mut(rows).slice_mut(cols).assign(&dq);
                            gk.slice_mut(rows).slice_mut(cols).assign(&dk);
                            gv.slice_mut(rows).slice_mut(cols).assign(&dv);
                        }
                    }
                    accumulate(&mut adjoints[q], gq);
                    accumulate(&mut adjoints[k], gk);
                    accumulate(&mut adjoints[v], gv);
                }
            }
        }
        Ok(TapeGradients { by_param, by_input })
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, rng_from_seed};

    fn nm(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        normal_matrix(&mut rng, rows, cols)
    }

    /// Builds a scalar-ish loss (sum of squares of the root) and checks every
    /// parameter leaf against central finite differences.
    fn check_params<F>(build: F, params: &[Array2<f64>], rtol: f64)
    where
        F: Fn(&mut Tape<f64>, &[Array2<f64>]) -> NodeId,
    {
        let mut tape = Tape::new();
        let root = build(&mut tape, params);
        let seed = tape.value(root).mapv(|v| 2.0 * v);
        let mut grads = tape.backward(root, &seed, params.len(), false).unwrap();
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let g = grads.by_param[pi].take().expect("param used");
            for r in 0..p.nrows() {
                for c in 0..p.ncols() {
                    let mut plus = params.to_vec();
                    let mut minus = params.to_vec();
                    plus[pi][[r, c]] += h;
                    minus[pi][[r, c]] -= h;
                    let mut tp = Tape::new();
                    let rp = build(&mut tp, &plus);
                    let lp: f64 = tp.value(rp).iter().map(|v| v * v).sum();
                    let mut tm = Tape::new();
                    let rm = build(&mut tm, &minus);
                    let lm: f64 = tm.value(rm).iter().map(|v| v * v).sum();
                    let fd = (lp - lm) / (2.0 * h);
                    let a = g[[r, c]];
                    assert!(
                        (a - fd).abs() <= rtol * fd.abs().max(1.0),
                        "param {} [{},{}]: analytic {} vs fd {}",
                        pi,
                        r,
                        c,
                        a,
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn linear_layer_gradients_are_exact() {
        // Least squares through a single matmul + bias: gradients have the
        // closed form 2 Xᵀ (XW + b), reproduced by the tape.
        let x = nm(6, 4, 1);
        let w = nm(4, 3, 2);
        let b = nm(1, 3, 3);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let wi = tape.param(0, w.clone());
        let bi = tape.param(1, b.clone());
        let mm = tape.matmul(xi, wi).unwrap();
        let out = tape.add_row(mm, bi).unwrap();
        let y = tape.value(out).clone();
        let seed = y.mapv(|v| 2.0 * v);
        let grads = tape.backward(out, &seed, 2, false).unwrap();
        let gw_expect = x.t().dot(&y.mapv(|v| 2.0 * v));
        let gw = grads.by_param[0].as_ref().unwrap();
        let diff = (gw - &gw_expect).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "closed-form mismatch {}", diff);
        let gb = grads.by_param[1].as_ref().unwrap();
        for c in 0..3 {
            let want: f64 = (0..6).map(|r| 2.0 * y[[r, c]]).sum();
            assert!((gb[[0, c]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let params = vec![nm(5, 4, 10), nm(4, 3, 11), nm(1, 3, 12)];
        check_params(
            |tape, p| {
                let x = tape.constant(nm(7, 5, 99));
                let w1 = tape.param(0, p[0].clone());
                let w2 = tape.param(1, p[1].clone());
                let b = tape.param(2, p[2].clone());
                let h = tape.matmul(x, w1).unwrap();
                let h = tape.relu(h);
                let h = tape.matmul(h, w2).unwrap();
                tape.add_row(h, b).unwrap()
            },
            &params,
            1e-6,
        );
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let params = vec![nm(6, 8, 20)];
        check_params(
            |tape, p| {
                let x = tape.param(0, p[0].clone());
                tape.layer_norm_rows(x)
            },
            &params,
            1e-5,
        );
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(nm(4, 16, 21));
        let y = tape.layer_norm_rows(x);
        for row in tape.value(y).rows() {
            let mean: f64 = row.sum() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "variance {}", var);
        }
    }

    #[test]
    fn block_broadcast_ops_match_finite_differences() {
        let params = vec![nm(8, 5, 30), nm(2, 5, 31), nm(2, 5, 32)];
        check_params(
            |tape, p| {
                let x = tape.param(0, p[0].clone());
                let scale = tape.param(1, p[1].clone());
                let shift = tape.param(2, p[2].clone());
                let sm = tape.mul_block_rows(x, scale, 4).unwrap();
                tape.add_block_rows(sm, shift, 4).unwrap()
            },
            &params,
            1e-6,
        );
    }

    #[test]
    fn attention_matches_finite_differences() {
        // 2 items x 3 tokens x 8 dims, 2 heads, through the fused op.
        let params = vec![nm(6, 8, 40), nm(6, 8, 41), nm(6, 8, 42)];
        check_params(
            |tape, p| {
                let q = tape.param(0, p[0].clone());
                let k = tape.param(1, p[1].clone());
                let v = tape.param(2, p[2].clone());
                tape.attention(q, k, v, 2, 3, 2).unwrap()
            },
            &params,
            1e-5,
        );
    }

    #[test]
    fn attention_is_block_diagonal_across_items() {
        // Changing item 1's rows must leave item 0's output untouched.
        let q = nm(6, 8, 50);
        let k = nm(6, 8, 51);
        let v = nm(6, 8, 52);
        let run = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            let mut tape = Tape::new();
            let qi = tape.constant(q.clone());
            let ki = tape.constant(k.clone());
            let vi = tape.constant(v.clone());
            let out = tape.attention(qi, ki, vi, 2, 3, 2).unwrap();
            tape.value(out).clone()
        };
        let base = run(&q, &k, &v);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for r in 3..6 {
            for c in 0..8 {
                k2[[r, c]] += 1.5;
                v2[[r, c]] -= 0.5;
            }
        }
        let moved = run(&q, &k2, &v2);
        for r in 0..3 {
            for c in 0..8 {
                assert_eq!(base[[r, c]], moved[[r, c]], "item 0 leaked across the block boundary");
            }
        }
        let mut differs = false;
        for r in 3..6 {
            for c in 0..8 {
                if base[[r, c]] != moved[[r, c]] {
                    differs = true;
                }
            }
        }
        assert!(differs, "item 1 should have changed");
    }

    #[test]
    fn input_gradient_is_available_on_request() {
        let x = nm(5, 4, 60);
        let w = nm(4, 4, 61);
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let wi = tape.param(0, w.clone());
        let out = tape.matmul(xi, wi).unwrap();
        let seed = Array2::ones(tape.value(out).dim());
        let grads = tape.backward(out, &seed, 1, true).unwrap();
        assert_eq!(grads.by_input.len(), 1);
        let (id, g) = &grads.by_input[0];
        assert_eq!(*id, xi);
        // d(sum(XW))/dX = 1 Wᵀ.
        let expect = Array2::ones((5, 4)).dot(&w.t());
        assert!((g - &expect).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn second_backward_pass_is_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.input(nm(2, 2, 70));
        let y = tape.relu(x);
        let seed = Array2::ones((2, 2));
        assert!(tape.backward(y, &seed, 0, false).is_ok());
        assert!(tape.backward(y, &seed, 0, false).is_err());
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(nm(2, 3, 80));
        let b = tape.constant(nm(2, 3, 81));
        assert!(tape.matmul(a, b).is_err());
        let c = tape.constant(nm(2, 2, 82));
        assert!(tape.add(a, c).is_err());
        assert!(tape.attention(a, b, c, 1, 2, 1).is_err());
    }

    #[test]
    fn f32_instantiation_agrees_with_f64_to_single_precision() {
        let x = nm(4, 6, 90);
        let w = nm(6, 6, 91);
        let run64 = {
            let mut tape = Tape::<f64>::new();
            let xi = tape.constant(x.clone());
            let wi = tape.param(0, w.clone());
            let h = tape.matmul(xi, wi).unwrap();
            let h = tape.relu(h);
            let n = tape.layer_norm_rows(h);
            tape.value(n).clone()
        };
        let run32 = {
            let mut tape = Tape::<f32>::new();
            let xi = tape.constant(x.mapv(|v| v as f32));
            let wi = tape.param(0, w.mapv(|v| v as f32));
            let h = tape.matmul(xi, wi).unwrap();
            let h = tape.relu(h);
            let n = tape.layer_norm_rows(h);
            tape.value(n).clone()
        };
        for (a, b) in run64.iter().zip(run32.iter()) {
            assert!((a - *b as f64).abs() < 1e-4, "{} vs {}", a, b);
        }
    }
}
