//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records each operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and returns the gradient of
//! a `1 × 1` loss with respect to every node that (transitively) depends on a
//! trainable leaf. The op set is exactly what the recommender needs: dense and
//! sparse products, row gathers, layer normalisation, GELU, segmented masked
//! attention, linear sequence filters and the two ranking losses.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fixed linear operator applied to the rows of a matrix, `Y = M X`.
///
/// `apply_adjoint` must compute `Mᵀ G`.
pub trait LinearMap: Send + Sync {
    fn apply(&self, x: &Mat) -> Mat;
    fn apply_adjoint(&self, g: &Mat) -> Mat;
}

/// Contiguous run of rows forming one sequence inside a packed matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Shape of a segmented attention call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Multiplier applied to `q·k` before the softmax.
    pub scale: f64,
    pub causal: bool,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Mat),
    Gelu(Var),
    Normalize {
        x: Var,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Var,
        map: Arc<dyn LinearMap>,
    },
    Gather {
        x: Var,
        idx: Arc<[usize]>,
    },
    VStack(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spans: Arc<[Span]>,
        spec: AttentionSpec,
        probs: Vec<Mat>,
    },
    RowDot(Var, Var),
    NegLogSigmoidSum(Var),
    CrossEntropySum {
        logits: Var,
        targets: Arc<[usize]>,
        probs: Mat,
    },
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, materialising zeros of the given shape when absent.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Mat::zeros(shape))
    }
}

const LN_EPS_DEFAULT: f64 = 1e-8;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Mat, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    /// Multiply by a `1 × 1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let factor = self.scalar(s);
        let value = self.value(a) * factor;
        let ng = self.needs(a) || self.needs(s);
        self.push(value, Op::ScaleBy(a, s), ng)
    }

    /// Add a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiply every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Mat) -> Var {
        let value = self.value(a) * &mask;
        let ng = self.needs(a);
        self.push(value, Op::MulConst(a, mask), ng)
    }

    /// GELU, exact erf form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` (no gain/bias).
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let mut out = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (i, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.row_mut(i)
                .iter_mut()
                .zip(row.iter())
                .for_each(|(o, v)| *o = (v - mean) * is);
        }
        let ng = self.needs(a);
        self.push(out, Op::Normalize { x: a, inv_std }, ng)
    }

    /// `normalize_rows` with the default epsilon, followed by gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let n = self.normalize_rows(a, LN_EPS_DEFAULT);
        let scaled = self.mul_row(n, gain);
        self.add_row(scaled, bias)
    }

    pub fn linear_map(&mut self, a: Var, map: Arc<dyn LinearMap>) -> Var {
        let value = map.apply(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::Linear { x: a, map }, ng)
    }

    /// Rows of `a` selected by `idx` (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: impl Into<Arc<[usize]>>) -> Var {
        let idx: Arc<[usize]> = idx.into();
        let value = self.value(a).select(Axis(0), &idx);
        let ng = self.needs(a);
        self.push(value, Op::Gather { x: a, idx }, ng)
    }

    pub fn vstack(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("vstack: column counts differ");
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::VStack(a, b), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.needs(a);
        self.push(value, Op::SliceRows { x: a, start }, ng)
    }

    /// Masked multi-head attention applied independently inside each span.
    ///
    /// Head `h` uses columns `h·dq..(h+1)·dq` of `q`/`k` for its logits and
    /// mixes columns `h·dv..(h+1)·dv` of `v`. `key_mask[r] == false` removes
    /// packed row `r` as a key; a query row with no admissible key gets a zero
    /// output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spans: impl Into<Arc<[Span]>>,
        spec: AttentionSpec,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let spans: Arc<[Span]> = spans.into();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.dim(), kv.dim(), "attention: q and k shapes differ");
        assert_eq!(
            qv.nrows(),
            vv.nrows(),
            "attention: q and v row counts differ"
        );
        let dq = qv.ncols() / spec.heads;
        let dv = vv.ncols() / spec.heads;
        let mut out = Mat::zeros(vv.dim());
        let mut probs = Vec::with_capacity(spans.len() * spec.heads);
        for span in spans.iter() {
            let rows = span.start..span.end();
            for h in 0..spec.heads {
                let qh = qv.slice(s![rows.clone(), h * dq..(h + 1) * dq]);
                let kh = kv.slice(s![rows.clone(), h * dq..(h + 1) * dq]);
                let vh = vv.slice(s![rows.clone(), h * dv..(h + 1) * dv]);
                let mut p = qh.dot(&kh.t()) * spec.scale;
                for (i, mut row) in p.outer_iter_mut().enumerate() {
                    for (j, x) in row.iter_mut().enumerate() {
                        let visible =
                            (!spec.causal || j <= i) && key_mask.is_none_or(|m| m[span.start + j]);
                        if !visible {
                            *x = f64::NEG_INFINITY;
                        }
                    }
                    softmax_in_place(row.as_slice_mut().expect("contiguous row"));
                }
                out.slice_mut(s![rows.clone(), h * dv..(h + 1) * dv])
                    .assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spans,
                spec,
                probs,
            },
            ng,
        )
    }

    /// Row-wise dot products, `n × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let value = (self.value(a) * self.value(b))
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::RowDot(a, b), ng)
    }

    /// `Σ −log σ(x)` over all entries, as a `1 × 1` node.
    pub fn neg_log_sigmoid_sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).iter().map(|&x| softplus(-x)).sum();
        let ng = self.needs(a);
        self.push(Mat::from_elem((1, 1), total), Op::NegLogSigmoidSum(a), ng)
    }

    /// Summed softmax cross-entropy of each logit row against its target column.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: impl Into<Arc<[usize]>>) -> Var {
        let targets: Arc<[usize]> = targets.into();
        let lv = self.value(logits);
        assert_eq!(
            lv.nrows(),
            targets.len(),
            "cross_entropy: one target per row"
        );
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (mut row, &t) in probs.outer_iter_mut().zip(targets.iter()) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            row.mapv_inplace(|x| (x - lse).exp());
        }
        let ng = self.needs(logits);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::CrossEntropySum {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Mat::from_elem((1, 1), total), Op::Sum(a), ng)
    }

    /// Gradients of the `1 × 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g * *f),
            Op::ScaleBy(a, s) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * self.scalar(*s));
                }
                if self.needs(*s) {
                    let ds = (g * self.value(*a)).sum();
                    self.accumulate(grads, *s, Mat::from_elem((1, 1), ds));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * self.value(*row));
                }
                if self.needs(*row) {
                    let d = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, d);
                }
            }
            Op::MulConst(a, mask) => self.accumulate(grads, *a, g * mask),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::Normalize { x, inv_std } => {
                let y = &node.value;
                let cols = y.ncols() as f64;
                let mut dx = Mat::zeros(y.dim());
                for (i, (yr, gr)) in y.outer_iter().zip(g.outer_iter()).enumerate() {
                    let mean_g = gr.sum() / cols;
                    let mean_gy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                    Zip::from(dx.row_mut(i))
                        .and(yr)
                        .and(gr)
                        .for_each(|d, &yv, &gv| *d = inv_std[i] * (gv - mean_g - yv * mean_gy));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, map } => self.accumulate(grads, *x, map.apply_adjoint(g)),
            Op::Gather { x, idx } => {
                if self.needs(*x) {
                    let mut d = Mat::zeros(self.shape(*x));
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = d.row_mut(src);
                        dst += &g.row(r);
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::VStack(a, b) => {
                let split = self.shape(*a).0;
                self.accumulate(grads, *a, g.slice(s![..split, ..]).to_owned());
                self.accumulate(grads, *b, g.slice(s![split.., ..]).to_owned());
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let mut d = Mat::zeros(self.shape(*x));
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                    self.accumulate(grads, *x, d);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spans, spec, probs, g, grads),
            Op::RowDot(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, self.value(*b) * g);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a) * g);
                }
            }
            Op::NegLogSigmoidSum(a) => {
                let scale = g[[0, 0]];
                let d = self.value(*a).mapv(|x| -sigmoid(-x) * scale);
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropySum {
                logits,
                targets,
                probs,
            } => {
                let mut d = probs.clone();
                for (mut row, &t) in d.outer_iter_mut().zip(targets.iter()) {
                    row[t] -= 1.0;
                }
                d *= g[[0, 0]];
                self.accumulate(grads, *logits, d);
            }
            Op::Sum(a) => {
                let d = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spans: &[Span],
        spec: &AttentionSpec,
        probs: &[Mat],
        g: &Mat,
        grads: &mut [Option<Mat>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dq_w = qv.ncols() / spec.heads;
        let dv_w = vv.ncols() / spec.heads;
        let mut dq = Mat::zeros(qv.dim());
        let mut dk = Mat::zeros(kv.dim());
        let mut dv = Mat::zeros(vv.dim());
        let mut p_iter = probs.iter();
        for span in spans {
            let rows = span.start..span.end();
            for h in 0..spec.heads {
                let p = p_iter
                    .next()
                    .expect("one probability block per span and head");
                let qc = h * dq_w..(h + 1) * dq_w;
                let vc = h * dv_w..(h + 1) * dv_w;
                let go = g.slice(s![rows.clone(), vc.clone()]);
                let vh = vv.slice(s![rows.clone(), vc.clone()]);
                let mut dvh = dv.slice_mut(s![rows.clone(), vc]);
                dvh += &p.t().dot(&go);
                let dp = go.dot(&vh.t());
                let mut dlog = p * &dp;
                for (mut row, prow) in dlog.outer_iter_mut().zip(p.outer_iter()) {
                    let inner = row.sum();
                    Zip::from(&mut row)
                        .and(prow)
                        .for_each(|d, &pv| *d -= pv * inner);
                }
                dlog *= spec.scale;
                let qh = qv.slice(s![rows.clone(), qc.clone()]);
                let kh = kv.slice(s![rows.clone(), qc.clone()]);
                let mut dqh = dq.slice_mut(s![rows.clone(), qc.clone()]);
                dqh += &dlog.dot(&kh);
                let mut dkh = dk.slice_mut(s![rows.clone(), qc]);
                dkh += &dlog.t().dot(&qh);
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

/// Softmax over a slice that may contain `-inf`; an all-`-inf` slice becomes zeros.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        xs.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    xs.iter_mut().for_each(|x| *x /= total);
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Mat) -> f64, x: &Mat, eps: f64) -> Mat {
        let mut out = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += eps;
            minus.as_slice_mut().unwrap()[idx] -= eps;
            out.as_slice_mut().unwrap()[idx] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        out
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "{x} vs {y}"
            );
        }
    }

    #[test]
    fn matmul_and_layer_norm_gradients() {
        let x0 = array![[0.3, -1.2, 0.5], [1.1, 0.4, -0.7]];
        let w = array![[0.2, 0.1], [-0.3, 0.8], [0.5, -0.6]];
        let loss_of = |x: &Mat| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let wv = t.constant(w.clone());
            let y = t.matmul(xv, wv);
            let n = t.normalize_rows(y, 1e-8);
            let gl = t.gelu(n);
            let s = t.sum(gl);
            (t.scalar(s), t, xv, s)
        };
        let (_, tape, xv, s) = loss_of(&x0);
        let analytic = tape.backward(s).get(xv).unwrap().clone();
        let numeric = numeric_grad(|x| loss_of(x).0, &x0, 1e-6);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn attention_all_masked_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let spec = AttentionSpec {
            heads: 1,
            scale: 1.0,
            causal: true,
        };
        let out = t.attention(
            x,
            x,
            x,
            vec![Span { start: 0, len: 2 }],
            spec,
            Some(&[false, true]),
        );
        assert_eq!(t.value(out).row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(t.value(out).row(1).to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn cross_entropy_and_log_sigmoid_gradients() {
        let z0 = array![[0.5, -0.25, 2.0], [1.5, 0.0, -1.0]];
        let eval = |z: &Mat| {
            let mut t = Tape::new();
            let zv = t.param(z.clone());
            let ce = t.cross_entropy_sum(zv, vec![2, 0]);
            let ls = t.neg_log_sigmoid_sum(zv);
            let tot = t.add(ce, ls);
            (t.scalar(tot), t, zv, tot)
        };
        let (_, tape, zv, tot) = eval(&z0);
        let analytic = tape.backward(tot).get(zv).unwrap().clone();
        let numeric = numeric_grad(|z| eval(z).0, &z0, 1e-6);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }
}
