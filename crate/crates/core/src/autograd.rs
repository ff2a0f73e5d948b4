//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! Every operation appends a node holding its forward value and whatever
//! it needs to propagate cotangents. `backward` walks the tape in reverse.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Mat;

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("backward called on a graph built without gradient caching")]
    MissingCache,
    #[error("cotangent shape {got:?} does not match output shape {want:?}")]
    CotangentShape { got: (usize, usize), want: (usize, usize) },
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf { param: Option<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Log(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<T>, inv_std: Vec<T> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormRows { x: Var, norms: Vec<T> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    SumRows(Var),
    SumAll(Var),
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    caching: bool,
}

/// Cotangents for every node reached by a backward pass.
pub struct Grads<T> {
    node: Vec<Option<Mat<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Scalar> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&Mat<T>> {
        self.node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients keyed by parameter index. A parameter used several times
    /// on the tape has its contributions summed; unused ones are absent.
    pub fn params(&self, n_params: usize) -> Vec<Option<Mat<T>>> {
        let mut out: Vec<Option<Mat<T>>> = vec![None; n_params];
        for &(p, var) in &self.params {
            if let Some(g) = self.of(var) {
                match &mut out[p] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that keeps everything needed for `backward`.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), caching: true }
    }

    /// Forward-only graph; `backward` returns [`GradError::MissingCache`].
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), caching: false }
    }

    pub fn is_caching(&self) -> bool {
        self.caching
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

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn param(&mut self, index: usize, value: &Mat<T>) -> Var {
        self.push(value.clone(), Op::Leaf { param: Some(index) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1×cols` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let row = self.value(r);
        assert_eq!(row.rows(), 1);
        assert_eq!(row.cols(), self.value(a).cols());
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(row.row(0)) {
                *x = *x + b;
            }
        }
        self.push(v, Op::AddRow(a, r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu(x).0);
        self.push(v, Op::Gelu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::of(cols as f64);
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            inv_std.push(inv);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let out = Mat::from_fn(rows, cols, |r, c| xhat.get(r, c) * g.get(0, c) + b.get(0, c));
        let op = if self.caching {
            Op::LayerNorm { x, gamma, beta, xhat, inv_std }
        } else {
            Op::LayerNorm { x, gamma, beta, xhat: Mat::zeros(0, 0), inv_std: Vec::new() }
        };
        self.push(out, op)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&crate::tensor::softmax(av.row(r)));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let lse = crate::tensor::log_sum_exp(av.row(r));
            for (o, &v) in out.row_mut(r).iter_mut().zip(av.row(r)) {
                *o = v - lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = (xv.row(r).iter().map(|&v| v * v).sum::<T>() + T::of(L2_EPS)).sqrt();
            norms.push(n);
            for v in out.row_mut(r) {
                *v = *v / n;
            }
        }
        self.push(out, Op::L2NormRows { x, norms })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        self.push(Mat::from_vec(len, cols, data), Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let out = Mat::from_fn(xv.rows(), len, |r, c| xv.get(r, start + c));
        self.push(out, Op::SliceCols { x, start })
    }

    /// Column sums, `1×cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, &v) in out.row_mut(0).iter_mut().zip(av.row(r)) {
                *o = *o + v;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    /// Seeds `root` with `cotangent` and propagates to every ancestor.
    pub fn backward(&self, root: Var, cotangent: Mat<T>) -> Result<Grads<T>, GradError> {
        if !self.caching {
            return Err(GradError::MissingCache);
        }
        let want = self.value(root).shape();
        if cotangent.shape() != want {
            return Err(GradError::CotangentShape { got: cotangent.shape(), want });
        }
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(cotangent);
        let mut params = Vec::new();

        fn acc<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        params.push((*p, Var(idx)));
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, r) => {
                    let mut gr = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &v) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o = *o + v;
                        }
                    }
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.scale(s));
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv * gelu(x).1);
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv / x);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = self.value(*gamma);
                    let (rows, cols) = g.shape();
                    let n = T::of(cols as f64);
                    let mut ggam = Mat::zeros(1, cols);
                    let mut gbeta = Mat::zeros(1, cols);
                    let mut gx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            let gv = g.get(r, c);
                            let xh = xhat.get(r, c);
                            ggam.set(0, c, ggam.get(0, c) + gv * xh);
                            gbeta.set(0, c, gbeta.get(0, c) + gv);
                            let d = gv * gam.get(0, c);
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xh;
                        }
                        for c in 0..cols {
                            let d = g.get(r, c) * gam.get(0, c);
                            let v = inv_std[r] / n * (n * d - sum_d - xhat.get(r, c) * sum_dx);
                            gx.set(r, c, v);
                        }
                    }
                    acc(&mut grads, *gamma, ggam);
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&gv, &yv)| gv * yv).sum();
                        for ((o, &gv), &yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let total: T = g.row(r).iter().copied().sum();
                        for ((o, &gv), &yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::L2NormRows { x, norms } => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&gv, &yv)| gv * yv).sum();
                        for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (gv - yv * dot) / norms[r];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let data = g.data()[off * cols..(off + rows) * cols].to_vec();
                        acc(&mut grads, p, Mat::from_vec(rows, cols, data));
                        off += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let gp = Mat::from_fn(rows, cols, |r, c| g.get(r, off + c));
                        acc(&mut grads, p, gp);
                        off += cols;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Mat::zeros(rows, cols);
                    let s = *start;
                    gx.data_mut()[s * cols..s * cols + g.data().len()].copy_from_slice(g.data());
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Mat::zeros(rows, cols);
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SumRows(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let ga = Mat::from_fn(rows, cols, |_, c| g.get(0, c));
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    acc(&mut grads, *a, Mat::filled(rows, cols, g.get(0, 0)));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Grads { node: grads, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` around every entry of `x0`.
    fn numeric_grad(x0: &Mat<f64>, f: impl Fn(&Mat<f64>) -> f64) -> Mat<f64> {
        let h = 1e-5;
        Mat::from_fn(x0.rows(), x0.cols(), |r, c| {
            let mut p = x0.clone();
            p.set(r, c, x0.get(r, c) + h);
            let mut m = x0.clone();
            m.set(r, c, x0.get(r, c) - h);
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn check(build: impl Fn(&mut Graph<f64>, Var) -> Var, x0: Mat<f64>) {
        let mut g = Graph::new();
        let x = g.param(0, &x0);
        let y = build(&mut g, x);
        let s = g.sum_all(y);
        let grads = g.backward(s, Mat::filled(1, 1, 1.0)).unwrap();
        let analytic = grads.params(1)[0].clone().unwrap();
        let numeric = numeric_grad(&x0, |xv| {
            let mut g = Graph::no_grad();
            let x = g.param(0, xv);
            let y = build(&mut g, x);
            g.value(y).sum()
        });
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-7, "max abs gradient error {err}");
    }

    fn sample(rows: usize, cols: usize) -> Mat<f64> {
        Mat::from_fn(rows, cols, |r, c| ((r * 7 + c * 13) % 11) as f64 / 5.0 - 1.0 + 0.01 * c as f64)
    }

    #[test]
    fn elementwise_ops() {
        check(|g, x| g.gelu(x), sample(3, 4));
        check(|g, x| {
            let sq = g.mul(x, x);
            let c = g.constant(Mat::filled(3, 4, 1.0));
            let sh = g.add(sq, c);
            g.log(sh)
        }, sample(3, 4));
    }

    #[test]
    fn softmax_family() {
        let w = sample(3, 5).map(|v| v * 3.0);
        check(|g, x| {
            let s = g.softmax_rows(x);
            let c = g.constant(w.clone());
            g.mul(s, c)
        }, sample(3, 5));
        check(|g, x| {
            let s = g.log_softmax_rows(x);
            let c = g.constant(w.clone());
            g.mul(s, c)
        }, sample(3, 5));
        check(|g, x| {
            let s = g.l2_normalize_rows(x);
            let c = g.constant(w.clone());
            g.mul(s, c)
        }, sample(3, 5));
    }

    #[test]
    fn layer_norm_and_matmul() {
        let w = sample(4, 4).map(|v| v * 0.7 + 0.1);
        check(|g, x| {
            let gamma = g.constant(Mat::from_fn(1, 4, |_, c| 1.0 + 0.1 * c as f64));
            let beta = g.constant(Mat::from_fn(1, 4, |_, c| 0.05 * c as f64));
            let y = g.layer_norm(x, gamma, beta);
            let wv = g.constant(w.clone());
            let z = g.matmul(y, wv);
            let zt = g.matmul_t(z, x);
            g.mul(zt, zt)
        }, sample(3, 4));
    }

    #[test]
    fn structural_ops() {
        check(|g, x| {
            let a = g.slice_rows(x, 1, 2);
            let b = g.slice_cols(x, 0, 2);
            let bt = g.slice_rows(b, 0, 2);
            let ab = g.concat_cols(&[a, bt]);
            let r = g.sum_rows(ab);
            let rr = g.concat_rows(&[r, r]);
            let sq = g.mul(rr, rr);
            let row = g.slice_rows(x, 0, 1);
            let shifted = g.add_row(x, row);
            let s2 = g.mul(shifted, shifted);
            let t = g.sum_all(s2);
            let tt = g.scale(t, 0.5);
            let u = g.sum_all(sq);
            g.add(u, tt)
        }, sample(3, 4));
    }

    #[test]
    fn no_grad_graph_refuses_backward() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(Mat::zeros(1, 1));
        assert_eq!(g.backward(x, Mat::zeros(1, 1)).err(), Some(GradError::MissingCache));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(0, &sample(2, 3));
        let y = g.gelu(x);
        let grads = g.backward(y, Mat::zeros(2, 3)).unwrap();
        assert!(grads.params(1)[0].as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    }
}
