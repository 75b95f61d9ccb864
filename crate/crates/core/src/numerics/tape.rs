//! Tape-based reverse-mode differentiation over dense 1-D/2-D tensors.

use crate::error::Error;
use crate::Result;

use super::linalg;
use super::params::{ParamId, ParamSet};

/// Probabilities are floored at this value inside logarithms so a zero
/// probability at a reference index yields a large finite loss instead of
/// an infinity.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf { param: Option<ParamId> },
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MatVec(TensorId, TensorId),
    Tanh(TensorId),
    Sigmoid(TensorId),
    Concat(Vec<TensorId>),
    Row(TensorId, usize),
    Dot(TensorId, TensorId),
    Stack(Vec<TensorId>),
    Softmax {
        input: TensorId,
        temperature: f64,
        mask: Option<Vec<bool>>,
    },
    WeightedSum {
        weights: TensorId,
        states: Vec<TensorId>,
    },
    MaxPairs(TensorId),
    Index(TensorId, usize),
    LnClamped(TensorId, f64),
    Scale(TensorId, f64),
    SumAll(Vec<TensorId>),
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Records a computation graph for one forward pass. Nodes are appended in
/// topological order, so a single reverse sweep accumulates all gradients.
/// A tape is confined to one worker; distinct tapes may run concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes but keeps the allocation for reuse across batches.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node {
            shape,
            values,
            grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn len_of(&self, id: TensorId) -> usize {
        self.nodes[id.0].values.len()
    }

    /// A constant/input leaf; gradients accumulate but go nowhere.
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>) -> TensorId {
        self.push(shape, values, Op::Leaf { param: None })
    }

    pub fn zeros(&mut self, len: usize) -> TensorId {
        self.leaf(vec![len], vec![0.0; len])
    }

    /// Copies a parameter onto the tape; its gradient is scattered back by
    /// [`Tape::accumulate_param_grads`].
    pub fn param_leaf(&mut self, params: &ParamSet, id: ParamId) -> TensorId {
        let p = params.get(id);
        self.push(
            p.shape.clone(),
            p.values.clone(),
            Op::Leaf { param: Some(id) },
        )
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "add: operand shapes differ"
        );
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "mul: operand shapes differ"
        );
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Mul(a, b))
    }

    /// `W x` where `w` is 2-D row-major and `x` is 1-D.
    pub fn matvec(&mut self, w: TensorId, x: TensorId) -> TensorId {
        let wshape = &self.nodes[w.0].shape;
        assert_eq!(wshape.len(), 2, "matvec: first operand must be 2-D");
        let (rows, cols) = (wshape[0], wshape[1]);
        assert_eq!(
            self.len_of(x),
            cols,
            "matvec: vector length {} does not match {} columns",
            self.len_of(x),
            cols
        );
        let mut out = vec![0.0; rows];
        linalg::matvec(
            &self.nodes[w.0].values,
            rows,
            cols,
            &self.nodes[x.0].values,
            &mut out,
        );
        self.push(vec![rows], out, Op::MatVec(w, x))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.tanh()).collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| sigmoid(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Sigmoid(a))
    }

    pub fn concat(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat: no operands");
        let mut values = Vec::new();
        for &p in parts {
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        let len = values.len();
        self.push(vec![len], values, Op::Concat(parts.to_vec()))
    }

    /// Row `i` of a 2-D tensor (embedding lookup).
    pub fn row(&mut self, m: TensorId, i: usize) -> TensorId {
        let shape = &self.nodes[m.0].shape;
        assert_eq!(shape.len(), 2, "row: operand must be 2-D");
        let (rows, cols) = (shape[0], shape[1]);
        assert!(i < rows, "row {i} out of range for {rows} rows");
        let values = self.nodes[m.0].values[i * cols..(i + 1) * cols].to_vec();
        self.push(vec![cols], values, Op::Row(m, i))
    }

    pub fn dot(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.len_of(a), self.len_of(b), "dot: lengths differ");
        let v = linalg::dot(&self.nodes[a.0].values, &self.nodes[b.0].values);
        self.push(vec![1], vec![v], Op::Dot(a, b))
    }

    /// Packs scalar nodes into a vector.
    pub fn stack(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "stack: no operands");
        let values: Vec<f64> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.len_of(p), 1, "stack: operands must be scalars");
                self.nodes[p.0].values[0]
            })
            .collect();
        let len = values.len();
        self.push(vec![len], values, Op::Stack(parts.to_vec()))
    }

    /// Temperature softmax with optional masking. Masked positions receive
    /// weight exactly 0 and no gradient. Errors on non-finite input,
    /// non-positive temperature, or a fully masked vector.
    pub fn softmax(
        &mut self,
        input: TensorId,
        temperature: f64,
        mask: Option<&[bool]>,
    ) -> Result<TensorId> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::NonPositiveTemperature(temperature));
        }
        if let Some(m) = mask {
            assert_eq!(m.len(), self.len_of(input), "softmax: mask length differs");
        }
        let values = softmax_kernel(&self.nodes[input.0].values, temperature, mask)?;
        Ok(self.push(
            self.nodes[input.0].shape.clone(),
            values,
            Op::Softmax {
                input,
                temperature,
                mask: mask.map(|m| m.to_vec()),
            },
        ))
    }

    /// `sum_i weights[i] * states[i]` where all states share one length.
    pub fn weighted_sum(&mut self, weights: TensorId, states: &[TensorId]) -> TensorId {
        assert_eq!(
            self.len_of(weights),
            states.len(),
            "weighted_sum: weight count does not match state count"
        );
        assert!(!states.is_empty(), "weighted_sum: no states");
        let dim = self.len_of(states[0]);
        let mut out = vec![0.0; dim];
        for (i, &s) in states.iter().enumerate() {
            assert_eq!(self.len_of(s), dim, "weighted_sum: state lengths differ");
            let w = self.nodes[weights.0].values[i];
            linalg::axpy(w, &self.nodes[s.0].values, &mut out);
        }
        self.push(
            vec![dim],
            out,
            Op::WeightedSum {
                weights,
                states: states.to_vec(),
            },
        )
    }

    /// Maxout pooling with pool size 2: `out[j] = max(a[2j], a[2j+1])`.
    /// Ties route the gradient to the even slot.
    pub fn max_pairs(&mut self, a: TensorId) -> TensorId {
        let n = self.len_of(a);
        assert_eq!(n % 2, 0, "max_pairs: length must be even");
        let vals = &self.nodes[a.0].values;
        let out: Vec<f64> = (0..n / 2).map(|j| vals[2 * j].max(vals[2 * j + 1])).collect();
        self.push(vec![n / 2], out, Op::MaxPairs(a))
    }

    /// Selects one coordinate as a scalar node.
    pub fn index(&mut self, a: TensorId, i: usize) -> TensorId {
        assert!(i < self.len_of(a), "index out of range");
        let v = self.nodes[a.0].values[i];
        self.push(vec![1], vec![v], Op::Index(a, i))
    }

    /// Elementwise `ln(max(x, floor))`.
    pub fn ln_clamped(&mut self, a: TensorId, floor: f64) -> TensorId {
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| x.max(floor).ln())
            .collect();
        self.push(
            self.nodes[a.0].shape.clone(),
            values,
            Op::LnClamped(a, floor),
        )
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Scale(a, c))
    }

    /// Scalar sum of scalar nodes.
    pub fn sum_all(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "sum_all: no operands");
        let mut acc = 0.0;
        for &p in parts {
            assert_eq!(self.len_of(p), 1, "sum_all: operands must be scalars");
            acc += self.nodes[p.0].values[0];
        }
        self.push(vec![1], vec![acc], Op::SumAll(parts.to_vec()))
    }

    /// Reverse sweep from a scalar output. Gradients accumulate on every
    /// node; parameters are updated separately via
    /// [`Tape::accumulate_param_grads`].
    pub fn backward(&mut self, output: TensorId) {
        assert_eq!(self.len_of(output), 1, "backward: output must be scalar");
        for node in &mut self.nodes {
            for g in &mut node.grad {
                *g = 0.0;
            }
        }
        self.nodes[output.0].grad[0] = 1.0;

        for i in (0..=output.0).rev() {
            // Split off the current node so parent gradients can be
            // accumulated without aliasing.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = &node.grad;
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    linalg::axpy(1.0, g, &mut before[a.0].grad);
                    linalg::axpy(1.0, g, &mut before[b.0].grad);
                }
                Op::Mul(a, b) => {
                    let (pa, pb) = (a.0, b.0);
                    if pa == pb {
                        for j in 0..g.len() {
                            before[pa].grad[j] += 2.0 * g[j] * before[pa].values[j];
                        }
                    } else {
                        for j in 0..g.len() {
                            before[pa].grad[j] += g[j] * before[pb].values[j];
                            before[pb].grad[j] += g[j] * before[pa].values[j];
                        }
                    }
                }
                Op::MatVec(w, x) => {
                    // dW += g x^T, dx += W^T g; the two parents are always
                    // distinct nodes.
                    let (wi, xi) = (w.0, x.0);
                    let rows = before[wi].shape[0];
                    let cols = before[wi].shape[1];
                    let (lo, hi) = before.split_at_mut(wi.max(xi));
                    let (w_node, x_node) = if wi < xi {
                        (&mut lo[wi], &mut hi[0])
                    } else {
                        (&mut hi[0], &mut lo[xi])
                    };
                    outer_and_transpose(
                        &w_node.values,
                        rows,
                        cols,
                        g,
                        &x_node.values,
                        &mut w_node.grad,
                        &mut x_node.grad,
                    );
                }
                Op::Tanh(a) => {
                    for j in 0..g.len() {
                        let y = node.values[j];
                        before[a.0].grad[j] += g[j] * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    for j in 0..g.len() {
                        let y = node.values[j];
                        before[a.0].grad[j] += g[j] * y * (1.0 - y);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = before[p.0].values.len();
                        linalg::axpy(1.0, &g[offset..offset + len], &mut before[p.0].grad);
                        offset += len;
                    }
                }
                Op::Row(m, i) => {
                    let cols = before[m.0].shape[1];
                    linalg::axpy(1.0, g, &mut before[m.0].grad[i * cols..(i + 1) * cols]);
                }
                Op::Dot(a, b) => {
                    let gv = g[0];
                    if a.0 == b.0 {
                        for j in 0..before[a.0].values.len() {
                            before[a.0].grad[j] += 2.0 * gv * before[a.0].values[j];
                        }
                    } else {
                        for j in 0..before[a.0].values.len() {
                            before[a.0].grad[j] += gv * before[b.0].values[j];
                        }
                        for j in 0..before[b.0].values.len() {
                            before[b.0].grad[j] += gv * before[a.0].values[j];
                        }
                    }
                }
                Op::Stack(parts) => {
                    for (j, &p) in parts.iter().enumerate() {
                        before[p.0].grad[0] += g[j];
                    }
                }
                Op::Softmax {
                    input,
                    temperature,
                    mask,
                } => {
                    let y = &node.values;
                    let mut inner = 0.0;
                    for j in 0..y.len() {
                        inner += g[j] * y[j];
                    }
                    let ig = &mut before[input.0].grad;
                    for j in 0..y.len() {
                        if mask.as_ref().is_some_and(|m| !m[j]) {
                            continue;
                        }
                        ig[j] += (g[j] - inner) * y[j] / temperature;
                    }
                }
                Op::WeightedSum { weights, states } => {
                    for (i, &s) in states.iter().enumerate() {
                        let w = before[weights.0].values[i];
                        let gs = linalg::dot(g, &before[s.0].values);
                        before[weights.0].grad[i] += gs;
                        linalg::axpy(w, g, &mut before[s.0].grad);
                    }
                }
                Op::MaxPairs(a) => {
                    let av = &before[a.0].values;
                    let winners: Vec<usize> = (0..g.len())
                        .map(|j| {
                            if av[2 * j] >= av[2 * j + 1] {
                                2 * j
                            } else {
                                2 * j + 1
                            }
                        })
                        .collect();
                    for (j, &w) in winners.iter().enumerate() {
                        before[a.0].grad[w] += g[j];
                    }
                }
                Op::Index(a, i) => {
                    before[a.0].grad[*i] += g[0];
                }
                Op::LnClamped(a, floor) => {
                    for j in 0..g.len() {
                        let x = before[a.0].values[j];
                        if x > *floor {
                            before[a.0].grad[j] += g[j] / x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    linalg::axpy(*c, g, &mut before[a.0].grad);
                }
                Op::SumAll(parts) => {
                    for &p in parts {
                        before[p.0].grad[0] += g[0];
                    }
                }
            }
        }
    }

    /// Adds gradients of parameter leaves into the parameter set.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(id) } = node.op {
                let acc = params.grad_acc(id);
                linalg::axpy(1.0, &node.grad, acc);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fused backward for `y = W x`: `dw += g x^T`, `dx += W^T g`.
#[allow(clippy::too_many_arguments)]
fn outer_and_transpose(
    w: &[f64],
    rows: usize,
    cols: usize,
    g: &[f64],
    x: &[f64],
    dw: &mut [f64],
    dx: &mut [f64],
) {
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        let wrow = &w[r * cols..(r + 1) * cols];
        let dwrow = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dwrow[c] += gr * x[c];
            dx[c] += gr * wrow[c];
        }
    }
}

fn softmax_kernel(logits: &[f64], temperature: f64, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let live = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in logits.iter().enumerate() {
        if !live(i) {
            continue;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("softmax input at index {i}")));
        }
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (i, &x) in logits.iter().enumerate() {
        if live(i) {
            let e = ((x - max) / temperature).exp();
            out[i] = e;
            sum += e;
        }
    }
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Stabilized temperature softmax over a plain slice:
/// `out_i = exp(logits_i / T) / sum_j exp(logits_j / T)`.
pub fn softmax_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if logits.is_empty() {
        return Err(Error::ShapeMismatch("softmax over empty vector".into()));
    }
    softmax_kernel(logits, temperature, None)
}

/// Per-sentence cross-entropy: `-sum_t ln p_t[w_t]`, with [`PROB_FLOOR`]
/// guarding the logarithm. Each probability vector must sum to 1 (within
/// 1e-6) and every reference id must be in range.
pub fn cross_entropy(step_probabilities: &[Vec<f64>], references: &[usize]) -> Result<f64> {
    if step_probabilities.len() != references.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability vectors for {} references",
            step_probabilities.len(),
            references.len()
        )));
    }
    let mut loss = 0.0;
    for (t, (p, &w)) in step_probabilities.iter().zip(references).enumerate() {
        if w >= p.len() {
            return Err(Error::InvalidId {
                id: w as u32,
                vocab: p.len(),
            });
        }
        let sum: f64 = p.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::ShapeMismatch(format!(
                "step {t}: probabilities sum to {sum}, expected 1"
            )));
        }
        loss -= p[w].max(PROB_FLOOR).ln();
    }
    Ok(loss)
}

/// Batch loss: mean of per-sentence losses.
pub fn batch_mean(sentence_losses: &[f64]) -> f64 {
    if sentence_losses.is_empty() {
        return 0.0;
    }
    sentence_losses.iter().sum::<f64>() / sentence_losses.len() as f64
}

/// Parameter handles for one LSTM cell. Gate weights act on the
/// concatenation `[input, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmGates {
    pub w_input: TensorId,
    pub w_forget: TensorId,
    pub w_cell: TensorId,
    pub w_output: TensorId,
    pub b_input: TensorId,
    pub b_forget: TensorId,
    pub b_cell: TensorId,
    pub b_output: TensorId,
}

/// One LSTM step: logistic input/forget/output gates, tanh candidate,
/// `cell' = f*cell + i*g`, `hidden' = o*tanh(cell')`. Returns
/// `(hidden', cell')`.
pub fn lstm_cell(
    tape: &mut Tape,
    input: TensorId,
    hidden: TensorId,
    cell: TensorId,
    gates: &LstmGates,
) -> Result<(TensorId, TensorId)> {
    let n = tape.shape(hidden)[0];
    if tape.shape(cell)[0] != n {
        return Err(Error::ShapeMismatch(format!(
            "lstm_cell: hidden has {n} units but cell has {}",
            tape.shape(cell)[0]
        )));
    }
    let in_dim = tape.shape(input)[0] + n;
    for (name, w) in [
        ("input", gates.w_input),
        ("forget", gates.w_forget),
        ("cell", gates.w_cell),
        ("output", gates.w_output),
    ] {
        let s = tape.shape(w);
        if s != [n, in_dim].as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "lstm_cell: {name} gate weights are {s:?}, expected [{n}, {in_dim}]"
            )));
        }
    }

    let xh = tape.concat(&[input, hidden]);
    let gate = |tape: &mut Tape, w: TensorId, b: TensorId| -> TensorId {
        let a = tape.matvec(w, xh);
        tape.add(a, b)
    };
    let i_pre = gate(tape, gates.w_input, gates.b_input);
    let i = tape.sigmoid(i_pre);
    let f_pre = gate(tape, gates.w_forget, gates.b_forget);
    let f = tape.sigmoid(f_pre);
    let g_pre = gate(tape, gates.w_cell, gates.b_cell);
    let g = tape.tanh(g_pre);
    let o_pre = gate(tape, gates.w_output, gates.b_output);
    let o = tape.sigmoid(o_pre);

    let fc = tape.mul(f, cell);
    let ig = tape.mul(i, g);
    let new_cell = tape.add(fc, ig);
    let tc = tape.tanh(new_cell);
    let new_hidden = tape.mul(o, tc);
    Ok((new_hidden, new_cell))
}
