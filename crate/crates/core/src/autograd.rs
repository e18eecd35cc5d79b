//! A small reverse-mode tape over 2-D `f64` matrices.
//!
//! Attention blocks and the toy backbone are written once against [`Graph`];
//! plain forward evaluation just ignores the tape, and null-text optimization
//! pulls vector-Jacobian products through it with respect to the context
//! embedding. Only nodes that depend on a [`Graph::param`] leaf participate in
//! the backward pass.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `[1, n]` row to every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Silu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), tracked)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMulT(a, b), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a [1, n] row");
        let value = self.value(a) + self.value(row);
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(value, Op::AddRow(a, row), tracked)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, k), tracked)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a).view());
        let tracked = self.tracked(a);
        self.push(value, Op::SoftmaxRows(a), tracked)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        let tracked = self.tracked(a);
        self.push(value, Op::Silu(a), tracked)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), tracked)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), tracked)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        if start == 0 && end == self.shape(a).0 {
            return a;
        }
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let tracked = self.tracked(a);
        self.push(value, Op::SliceRows(a, start, end), tracked)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        if start == 0 && end == self.shape(a).1 {
            return a;
        }
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let tracked = self.tracked(a);
        self.push(value, Op::SliceCols(a, start, end), tracked)
    }

    /// Back-propagates `seed` (shape of `output`) through the tape.
    pub fn backward(&self, output: Var, seed: Array2<f64>) -> Grads {
        assert_eq!(seed.dim(), self.shape(output), "seed shape");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        if !self.tracked(output) {
            return Grads(grads);
        }
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.tracked(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.tracked(*a) {
                        let ga = g.dot(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.tracked(*b) {
                        let gb = g.t().dot(self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.tracked(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    ga.zip_mut_with(x, |gi, &xi| {
                        let sg = sigmoid(xi);
                        *gi *= sg * (1.0 + xi * (1.0 - sg));
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        if self.tracked(p) {
                            let gp = g.slice(s![offset..offset + rows, ..]).to_owned();
                            accumulate(&mut grads, p, gp);
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.shape(p).1;
                        if self.tracked(p) {
                            let gp = g.slice(s![.., offset..offset + cols]).to_owned();
                            accumulate(&mut grads, p, gp);
                        }
                        offset += cols;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*end, ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Grads(grads)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax with the per-row maximum subtracted before exponentiation.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// Central differences of `f` around `x`, elementwise.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[(r, c)] += h;
            let mut xm = x.clone();
            xm[(r, c)] -= h;
            g[(r, c)] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    /// A composite touching every op; returns sum(out ⊙ weights).
    fn composite(x: &Array2<f64>, w: &Array2<f64>, probe: &Array2<f64>) -> (f64, Array2<f64>) {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.constant(w.clone());
        let a = g.matmul(xv, wv);
        let b = g.matmul_t(a, xv);
        let c = g.softmax_rows(b);
        let d = g.matmul(c, xv);
        let e = g.silu(d);
        let row = g.slice_rows(xv, 0, 1);
        let f = g.add_row(e, row);
        let left = g.slice_cols(f, 0, 2);
        let right = g.slice_cols(f, 2, 3);
        let h = g.concat_cols(&[right, left]);
        let top = g.slice_rows(h, 0, 2);
        let j = g.concat_rows(&[h, top]);
        let k = g.scale(j, 0.7);
        let out = g.add(k, k);
        let val = (g.value(out) * probe).sum();
        let mut grads = g.backward(out, probe.clone());
        (val, grads.take(xv).unwrap())
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(11);
        let x = rng.uniform_matrix(3, 3, 1.0);
        let w = rng.uniform_matrix(3, 3, 1.0);
        let probe = rng.uniform_matrix(5, 3, 1.0);
        let (_, analytic) = composite(&x, &w, &probe);
        let numeric = numeric_grad(&x, |xx| composite(xx, &w, &probe).0);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-7 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn untracked_graph_yields_no_grads() {
        let mut g = Graph::new();
        let a = g.constant(Array2::ones((2, 2)));
        let b = g.matmul(a, a);
        let grads = g.backward(b, Array2::ones((2, 2)));
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let x = ndarray::array![[1000.0, 1000.0], [-1000.0, 0.0]];
        let y = softmax_rows(x.view());
        assert!((y[(0, 0)] - 0.5).abs() < 1e-12);
        assert!(y[(1, 1)] > 0.999_999);
    }
}
