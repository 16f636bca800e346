//! Reverse-mode gradient tape.
//!
//! Ops append nodes to the tape; [`Tape::backward`] walks them in reverse and
//! accumulates gradients into the [`Params`] store. Shapes are validated at
//! op time and mismatches panic naming the op and the shapes involved.

use rand::Rng;

use super::optim::{ParamId, Params};
use super::tensor::{self, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    /// A[m×n] + b[n] broadcast over rows.
    AddRow(Var, Var),
    /// A[m×n] ∘ b[n] broadcast over rows.
    MulRow(Var, Var),
    Scale(Var, T),
    Matmul(Var, Var),
    /// A · Bᵀ.
    MatmulNt(Var, Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    /// Row-wise softmax; the additive mask was applied in forward, the node
    /// value holds the probabilities.
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Gelu(Var),
    Dropout {
        x: Var,
        keep: Tensor<T>,
    },
    SliceCols {
        x: Var,
        from: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRows {
        x: Var,
        from: usize,
    },
    /// Label-smoothed cross-entropy summed over rows, scaled by `inv_len`.
    LabelSmoothCe {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        epsilon: T,
        inv_len: T,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradient tape for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by {}",
            op_name(&op)
        );
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Enter a parameter as a leaf; its gradient accumulates on backward.
    pub fn param(&mut self, params: &Params<T>, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    /// Enter a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "shape mismatch in add: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.cols(),
            tb.len(),
            "shape mismatch in add_row: {:?} + {:?}",
            ta.shape(),
            tb.shape()
        );
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            for (d, s) in data[r * cols..(r + 1) * cols].iter_mut().zip(tb.data()) {
                *d += *s;
            }
        }
        let out = Tensor::from_vec(ta.shape(), data);
        self.push(out, Op::AddRow(a, b))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.cols(),
            tb.len(),
            "shape mismatch in mul_row: {:?} ∘ {:?}",
            ta.shape(),
            tb.shape()
        );
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            for (d, s) in data[r * cols..(r + 1) * cols].iter_mut().zip(tb.data()) {
                *d *= *s;
            }
        }
        let out = Tensor::from_vec(ta.shape(), data);
        self.push(out, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.value(a).data().iter().map(|&v| v * c).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data);
        self.push(out, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(self.value(a), self.value(b));
        self.push(out, Op::Matmul(a, b))
    }

    /// `a · bᵀ`; used for attention scores and the tied-embedding logits.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul_nt(self.value(a), self.value(b));
        self.push(out, Op::MatmulNt(a, b))
    }

    /// Gather rows of `table` (one per id).
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            assert!(
                id < t.rows(),
                "shape mismatch in embed: id {} out of {} rows",
                id,
                t.rows()
            );
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_vec(&[ids.len(), cols], data);
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Row-wise softmax of `scores + mask`. Mask entries are 0 (visible) or
    /// −∞ (hidden); rows with no visible position come out all-zero.
    pub fn masked_softmax(&mut self, scores: Var, mask: &Tensor<T>) -> Var {
        let s = self.value(scores);
        assert_eq!(
            s.shape(),
            mask.shape(),
            "shape mismatch in masked_softmax: scores {:?} vs mask {:?}",
            s.shape(),
            mask.shape()
        );
        let (rows, cols) = (s.rows(), s.cols());
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let srow = s.row(r);
            let mrow = mask.row(r);
            let mut max = T::neg_infinity();
            for j in 0..cols {
                if mrow[j].is_finite() {
                    let v = srow[j] + mrow[j];
                    if v > max {
                        max = v;
                    }
                }
            }
            if !max.is_finite() {
                continue; // fully hidden row stays zero
            }
            let dst = &mut data[r * cols..(r + 1) * cols];
            let mut z = T::zero();
            for j in 0..cols {
                if mrow[j].is_finite() {
                    let e = (srow[j] + mrow[j] - max).exp();
                    dst[j] = e;
                    z += e;
                }
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let out = Tensor::from_vec(s.shape(), data);
        self.push(out, Op::MaskedSoftmax(scores))
    }

    /// Row-wise layer normalization (no affine part); a constant row maps to
    /// zeros through the variance epsilon.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let n = T::from_usize(cols);
        let mut data = vec![T::zero(); rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            for (d, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *d = (v - mean) * is;
            }
        }
        let out = Tensor::from_vec(t.shape(), data);
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = Tensor::from_vec(self.value(x).shape(), data);
        self.push(out, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * gelu_cdf(v))
            .collect();
        let out = Tensor::from_vec(self.value(x).shape(), data);
        self.push(out, Op::Gelu(x))
    }

    /// Inverted dropout; identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Var {
        if !train || rate <= 0.0 {
            return x;
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let t = self.value(x);
        let keep_data: Vec<T> = (0..t.len())
            .map(|_| {
                if rng.gen_range(0.0..1.0) < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let keep = Tensor::from_vec(t.shape(), keep_data);
        let data = t
            .data()
            .iter()
            .zip(keep.data())
            .map(|(&v, &k)| v * k)
            .collect();
        let out = Tensor::from_vec(t.shape(), data);
        self.push(out, Op::Dropout { x, keep })
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Var {
        let t = self.value(x);
        assert!(
            from < to && to <= t.cols(),
            "shape mismatch in slice_cols: {from}..{to} of {:?}",
            t.shape()
        );
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows * (to - from));
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + from..r * cols + to]);
        }
        let out = Tensor::from_vec(&[rows, to - from], data);
        self.push(out, Op::SliceCols { x, from })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "shape mismatch in concat_cols: no parts");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(
                    t.rows(),
                    rows,
                    "shape mismatch in concat_cols: {:?} vs {rows} rows",
                    t.shape()
                );
                data.extend_from_slice(t.row(r));
            }
        }
        let out = Tensor::from_vec(&[rows, total], data);
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: Var, from: usize, to: usize) -> Var {
        let t = self.value(x);
        assert!(
            from < to && to <= t.rows(),
            "shape mismatch in select_rows: {from}..{to} of {:?}",
            t.shape()
        );
        let cols = t.cols();
        let data = t.data()[from * cols..to * cols].to_vec();
        let out = Tensor::from_vec(&[to - from, cols], data);
        self.push(out, Op::SelectRows { x, from })
    }

    /// Σ_k w_k · CE(smoothed target_k, softmax(logits_k)) · inv_len, where the
    /// true token gets probability mass `epsilon` and every other token
    /// `(1−epsilon)/(V−1)`.
    pub fn label_smooth_ce(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
        epsilon: T,
        inv_len: T,
    ) -> Var {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        assert_eq!(
            rows,
            targets.len(),
            "shape mismatch in label_smooth_ce: {rows} rows vs {} targets",
            targets.len()
        );
        assert_eq!(targets.len(), weights.len());
        let off_mass = (T::one() - epsilon) / T::from_usize(cols - 1);
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for r in 0..rows {
            let row = t.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            let ln_z = z.ln();
            for p in probs[r * cols..(r + 1) * cols].iter_mut() {
                *p /= z;
            }
            if weights[r] == T::zero() {
                continue;
            }
            // Σ_i α_i·logp_i = ε·logp_t + off·(Σ_i logp_i − logp_t)
            let mut sum_lp = T::zero();
            for &v in row {
                sum_lp += v - max - ln_z;
            }
            let lp_t = row[targets[r]] - max - ln_z;
            total -= weights[r] * (epsilon * lp_t + off_mass * (sum_lp - lp_t));
        }
        let out = Tensor::scalar(total * inv_len);
        self.push(
            out,
            Op::LabelSmoothCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                epsilon,
                inv_len,
                probs: Tensor::from_vec(&[rows, cols], probs),
            },
        )
    }

    /// Accumulate ∂`loss`/∂param into `params` for every parameter leaf.
    /// `loss` must be a single-element tensor.
    pub fn backward(&self, loss: Var, params: &mut Params<T>) {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(
            self.value(loss).shape(),
            vec![T::one()],
        ));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(id) = param {
                        params.accumulate(*id, &g);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, b) => {
                    let cols = g.cols();
                    let mut db = vec![T::zero(); cols];
                    for r in 0..g.rows() {
                        for (d, &s) in db.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *b,
                        Tensor::from_vec(self.value(*b).shape(), db),
                    );
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, b) => {
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    let (rows, cols) = (ta.rows(), ta.cols());
                    let mut da = vec![T::zero(); rows * cols];
                    let mut db = vec![T::zero(); cols];
                    for r in 0..rows {
                        let grow = g.row(r);
                        let arow = ta.row(r);
                        for j in 0..cols {
                            da[r * cols + j] = grow[j] * tb.data()[j];
                            db[j] += grow[j] * arow[j];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(ta.shape(), da));
                    accumulate(
                        &mut grads,
                        *b,
                        Tensor::from_vec(self.value(*b).shape(), db),
                    );
                }
                Op::Scale(a, c) => {
                    let data = g.data().iter().map(|&v| v * *c).collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(g.shape(), data));
                }
                Op::Matmul(a, b) => {
                    let da = tensor::matmul_nt(&g, self.value(*b));
                    let db = tensor::matmul_tn(self.value(*a), &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatmulNt(a, b) => {
                    let da = tensor::matmul(&g, self.value(*b));
                    let db = tensor::matmul_tn(&g, self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let cols = t.cols();
                    let mut dt = vec![T::zero(); t.len()];
                    for (k, &id) in ids.iter().enumerate() {
                        for (d, &s) in dt[id * cols..(id + 1) * cols].iter_mut().zip(g.row(k)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *table, Tensor::from_vec(t.shape(), dt));
                }
                Op::MaskedSoftmax(x) => {
                    let p = &self.nodes[i].value;
                    let (rows, cols) = (p.rows(), p.cols());
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let prow = p.row(r);
                        let grow = g.row(r);
                        let inner = tensor::dot(grow, prow);
                        for j in 0..cols {
                            dx[r * cols + j] = prow[j] * (grow[j] - inner);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(p.shape(), dx));
                }
                Op::LayerNorm { x, inv_std } => {
                    let xhat = &self.nodes[i].value;
                    let (rows, cols) = (xhat.rows(), xhat.cols());
                    let n = T::from_usize(cols);
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let hrow = xhat.row(r);
                        let grow = g.row(r);
                        let mean_g = grow.iter().copied().sum::<T>() / n;
                        let mean_gh = tensor::dot(grow, hrow) / n;
                        for j in 0..cols {
                            dx[r * cols + j] =
                                inv_std[r] * (grow[j] - mean_g - hrow[j] * mean_gh);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(xhat.shape(), dx));
                }
                Op::Relu(x) => {
                    let t = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(t.shape(), data));
                }
                Op::Gelu(x) => {
                    let t = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(t.shape(), data));
                }
                Op::Dropout { x, keep } => {
                    let data = g
                        .data()
                        .iter()
                        .zip(keep.data())
                        .map(|(&gv, &kv)| gv * kv)
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), data));
                }
                Op::SliceCols { x, from } => {
                    let t = self.value(*x);
                    let (rows, cols) = (t.rows(), t.cols());
                    let w = g.cols();
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        for (j, &s) in g.row(r).iter().enumerate() {
                            dx[r * cols + from + j] = s;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(t.shape(), dx));
                    let _ = w;
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        accumulate(&mut grads, p, Tensor::from_vec(&[rows, w], dp));
                        offset += w;
                    }
                }
                Op::SelectRows { x, from } => {
                    let t = self.value(*x);
                    let cols = t.cols();
                    let mut dx = vec![T::zero(); t.len()];
                    for r in 0..g.rows() {
                        dx[(from + r) * cols..(from + r + 1) * cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(t.shape(), dx));
                }
                Op::LabelSmoothCe {
                    logits,
                    targets,
                    weights,
                    epsilon,
                    inv_len,
                    probs,
                } => {
                    let gs = g.item();
                    let (rows, cols) = (probs.rows(), probs.cols());
                    let off_mass = (T::one() - *epsilon) / T::from_usize(cols - 1);
                    let mut dl = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        if weights[r] == T::zero() {
                            continue;
                        }
                        let c = gs * *inv_len * weights[r];
                        let prow = probs.row(r);
                        for j in 0..cols {
                            let alpha = if j == targets[r] { *epsilon } else { off_mass };
                            dl[r * cols + j] = c * (prow[j] - alpha);
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::from_vec(probs.shape(), dl));
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::Matmul(..) => "matmul",
        Op::MatmulNt(..) => "matmul_nt",
        Op::Embed { .. } => "embed",
        Op::MaskedSoftmax(..) => "masked_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Relu(..) => "relu",
        Op::Gelu(..) => "gelu",
        Op::Dropout { .. } => "dropout",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::SelectRows { .. } => "select_rows",
        Op::LabelSmoothCe { .. } => "label_smooth_ce",
    }
}

fn gelu_cdf<T: Real>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
