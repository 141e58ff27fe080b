//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! Every op records its inputs on the tape; [`Graph::backward`] walks the tape
//! in reverse. Nodes that do not depend on a gradient-requiring leaf are never
//! visited, so constants (frozen weights, the EMA shadow, detached targets)
//! cost nothing on the way back and can never accumulate a gradient.

use crate::tensor::{c, dot, Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm(Var, Vec<T>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    L2NormalizeRows(Var, Vec<T>),
    Gather(Var, Vec<usize>),
    SoftmaxXent(Var, Vec<usize>),
    Frobenius(Var),
    Sum(Var),
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn leaf(&mut self, m: Mat<T>, requires_grad: bool) -> Var {
        self.push(m, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul shape mismatch");
        let out = va.matmul(vb);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "matmul_bt shape mismatch");
        let out = va.matmul_bt(vb);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMulBt(a, b), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Mat<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Mat::from_vec(va.rows(), va.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "add_row shape mismatch");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "mul_row shape mismatch");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o *= b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).shape(), (1, 1), "scale_by expects a scalar");
        let k = self.scalar(s);
        let out = self.value(a).scale(k);
        let ng = self.ng(&[a, s]);
        self.push(out, Op::ScaleBy(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = c::<T>(va.cols() as f64);
        let mut out = va.clone();
        let mut inv_std = Vec::with_capacity(va.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + c(LN_EPS)).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Mat::concat_rows(&mats).expect("concat_rows column mismatch");
        let ng = self.ng(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + vp.cols()].copy_from_slice(vp.row(r));
            }
            off += vp.cols();
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Column means, `n × d → 1 × d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = c::<T>(va.rows() as f64);
        let mut out = Mat::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, &x) in out.data_mut().iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        out.data_mut().iter_mut().for_each(|o| *o = *o / n);
        let ng = self.ng(&[a]);
        self.push(out, Op::MeanRows(a), ng)
    }

    /// Scales every row to unit L2 norm. All-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = dot(row, row).sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|x| *x = *x / n);
            }
            norms.push(n);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::L2NormalizeRows(a, norms), ng)
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = self.value(table).permute_rows(ids);
        let ng = self.ng(&[table]);
        self.push(out, Op::Gather(table, ids.to_vec()), ng)
    }

    /// Mean over rows of `-log softmax(row)[target]`, max-subtracted.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), targets.len(), "one target per logit row");
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            total += row_nll(vl.row(r), t);
        }
        let out = Mat::scalar(total / c(targets.len() as f64));
        let ng = self.ng(&[logits]);
        self.push(out, Op::SoftmaxXent(logits, targets.to_vec()), ng)
    }

    /// Frobenius norm as a `1 × 1` node. The gradient at the origin is taken as zero.
    pub fn frobenius(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).frobenius());
        let ng = self.ng(&[a]);
        self.push(out, Op::Frobenius(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    /// Reverse pass from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(Mat::scalar(T::one()));
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_bt(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Mat::from_vec(g.rows(), g.cols(), d).expect("shape"));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Mat::from_vec(g.rows(), g.cols(), d).expect("shape"));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    self.accumulate(grads, *row, col_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, &k) in ga.row_mut(r).iter_mut().zip(vr.data()) {
                            *x *= k;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*row) {
                    let mut gr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for ((o, &x), &y) in gr.data_mut().iter_mut().zip(g.row(r)).zip(va.row(r)) {
                            *o += x * y;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::ScaleBy(a, s) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.scale(self.scalar(*s)));
                }
                if self.wants(*s) {
                    let d = dot(g.data(), self.value(*a).data());
                    self.accumulate(grads, *s, Mat::scalar(d));
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let d = g.data().iter().zip(va.data()).map(|(&gg, &x)| gg * gelu(x).1).collect();
                self.accumulate(grads, *a, Mat::from_vec(g.rows(), g.cols(), d).expect("shape"));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let yr = y.row(r);
                    let s = dot(g.row(r), yr);
                    for (x, &yy) in ga.row_mut(r).iter_mut().zip(yr) {
                        *x = yy * (*x - s);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let n = c::<T>(y.cols() as f64);
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = dot(gr, yr) / n;
                    let is = inv_std[r];
                    for ((x, &gg), &yy) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *x = is * (gg - mg - yy * mgy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        self.accumulate(grads, p, g.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for r in 0..g.rows() {
                    ga.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.wants(p) {
                        let mut gp = Mat::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let scaled = g.scale(T::one() / c(va.rows() as f64));
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    ga.row_mut(r).copy_from_slice(scaled.data());
                }
                self.accumulate(grads, *a, ga);
            }
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let n = norms[r];
                    if n == T::zero() {
                        continue;
                    }
                    let (gr, yr) = (g.row(r), y.row(r));
                    let s = dot(gr, yr);
                    for ((x, &gg), &yy) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *x = (gg - yy * s) / n;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gather(table, ids) => {
                let vt = self.value(*table);
                let mut gt = Mat::zeros(vt.rows(), vt.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::SoftmaxXent(logits, targets) => {
                let vl = self.value(*logits);
                let k = g.data()[0] / c(targets.len() as f64);
                let mut gl = vl.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(r);
                    softmax_in_place(row);
                    row[t] -= T::one();
                    row.iter_mut().for_each(|x| *x *= k);
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::Frobenius(a) => {
                let n = node.value.data()[0];
                if n > T::zero() {
                    let k = g.data()[0] / n;
                    self.accumulate(grads, *a, self.value(*a).scale(k));
                }
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, Mat::filled(va.rows(), va.cols(), g.data()[0]));
            }
        }
    }
}

fn col_sums<T: Real>(g: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

/// `(gelu(x), gelu'(x))` for the tanh approximation.
fn gelu<T: Real>(x: T) -> (T, T) {
    let k: T = c(0.797_884_560_802_865_4);
    let a: T = c(0.044_715);
    let half: T = c(0.5);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * a * x * x);
    (y, dy)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x = *x / s);
}

/// `-log softmax(row)[target]` with max subtraction.
pub(crate) fn row_nll<T: Real>(row: &[T], target: usize) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
    lse - row[target]
}
