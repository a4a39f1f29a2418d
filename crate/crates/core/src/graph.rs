//! Tape-based reverse-mode automatic differentiation over [`Mat`].
//!
//! A [`Graph`] owns an append-only tape of nodes; builder methods evaluate
//! eagerly and record the operation, and [`Graph::backward`] walks the tape
//! in reverse to accumulate gradients for every parameter leaf. Graphs are
//! built per step and dropped, so values stay resident only while needed.
//!
//! Non-smooth operations use the conventional subgradient choices: ties in
//! `max` go to the first operand, clamps pass gradient on the closed
//! interval, and piecewise shifts differentiate as the identity.

use crate::tensor::Mat;
use crate::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// `y = mul * x + add`, element-wise.
    Affine { mul: S },
    /// `x (r x c) + b (1 x c)` broadcast down rows.
    AddRowBroadcast,
    /// `x (r x c) - s (1 x 1)` broadcast everywhere.
    SubBroadcast,
    /// `x (r x c) / s (1 x 1)` broadcast everywhere.
    DivBroadcast,
    Matmul,
    Transpose,
    /// Softmax across each row.
    RowSoftmax,
    /// Sum of all entries, `1 x 1`.
    SumAll,
    /// Mean of all entries, `1 x 1`.
    MeanAll,
    /// Column-wise mean over rows, `1 x c`.
    MeanRows,
    Sqrt,
    Silu,
    /// Per-row standardization without learned affine.
    LayerNormRow { eps: S },
    /// `x (r x c) * v (1 x c)` column-wise.
    MulColsVec,
    /// `x (r x c) / v (1 x c)` column-wise.
    DivColsVec,
    /// `x (r x c) * v (r x 1)` row-wise.
    MulRowsVec,
    /// Per-column Euclidean norms floored at `eps`, `1 x c`.
    ColNorms { eps: S },
    /// Kronecker product of the two parents.
    Kron,
    /// Vertical stack of all parents.
    VStack,
    /// Row gather; duplicate indices accumulate gradient.
    GatherRows { index: Vec<usize> },
    SliceCols { start: usize },
    /// Horizontal concatenation of all parents.
    ConcatCols,
    Reshape,
    /// 2x2 mean pooling of rows laid out as an `h x w` grid.
    MeanPool2x2 { h: usize, w: usize },
    /// Nearest-neighbor 2x upsampling of rows laid out as an `h x w` grid.
    UpsampleNearest2x { h: usize, w: usize },
    /// Element-wise max of two parents; ties route gradient to the first.
    MaxElem,
    /// Global min, `1 x 1`; gradient goes to the first minimizer.
    MinAll,
    /// Global max, `1 x 1`; gradient goes to the first maximizer.
    MaxAll,
    /// `x + lambda` where `x > tau`, else `x - lambda`.
    PiecewiseShift,
    /// Clamp into `[0, 1]`; gradient passes on the closed interval.
    Clamp01,
}

struct Node<S> {
    value: Mat<S>,
    parents: Vec<Var>,
    op: Op<S>,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Mat<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Mat<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`; zeros if none flowed there.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Mat<S> {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Leaf that does not receive gradient.
    pub fn constant(&mut self, value: Mat<S>) -> Var {
        self.push(value, vec![], Op::Leaf, false)
    }

    /// Leaf that accumulates gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Mat<S>) -> Var {
        self.push(value, vec![], Op::Leaf, true)
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &Mat<S> {
        &self.nodes[v.0].value
    }

    /// Shape of a node's value.
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Mat<S>, parents: Vec<Var>, op: Op<S>, leaf_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value entering the tape");
        let needs_grad = leaf_grad || parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, parents, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, vec![a, b], Op::Add, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, vec![a, b], Op::Sub, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, vec![a, b], Op::Mul, false)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, vec![a, b], Op::Div, false)
    }

    /// `mul * x + add`, element-wise.
    pub fn affine(&mut self, x: Var, mul: S, add: S) -> Var {
        let v = self.value(x).map(|e| mul * e + add);
        self.push(v, vec![x], Op::Affine { mul }, false)
    }

    /// Scales by a constant.
    pub fn scale(&mut self, x: Var, s: S) -> Var {
        self.affine(x, s, S::zero())
    }

    /// Element-wise square.
    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    /// Adds a `1 x c` row vector to every row of `x`.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.rows(), 1, "broadcast operand must be a row vector");
        assert_eq!(xv.cols(), bv.cols(), "broadcast width mismatch");
        let mut v = xv.clone();
        for i in 0..v.rows() {
            for (o, &bj) in v.row_mut(i).iter_mut().zip(bv.row(0)) {
                *o += bj;
            }
        }
        self.push(v, vec![x, b], Op::AddRowBroadcast, false)
    }

    /// Subtracts a `1 x 1` scalar node from every entry.
    pub fn sub_broadcast(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "broadcast operand must be scalar");
        let sv = self.value(s)[(0, 0)];
        let v = self.value(x).map(|e| e - sv);
        self.push(v, vec![x, s], Op::SubBroadcast, false)
    }

    /// Divides every entry by a `1 x 1` scalar node.
    pub fn div_broadcast(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "broadcast operand must be scalar");
        let sv = self.value(s)[(0, 0)];
        let v = self.value(x).map(|e| e / sv);
        self.push(v, vec![x, s], Op::DivBroadcast, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, vec![a, b], Op::Matmul, false)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, vec![x], Op::Transpose, false)
    }

    /// Softmax over each row.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut v = xv.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e = *e / z;
            }
        }
        self.push(v, vec![x], Op::RowSoftmax, false)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Mat::filled(1, 1, self.value(x).sum());
        self.push(v, vec![x], Op::SumAll, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = S::of(self.value(x).len() as f64);
        let v = Mat::filled(1, 1, self.value(x).sum() / n);
        self.push(v, vec![x], Op::MeanAll, false)
    }

    /// Mean over rows; `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let r = S::of(xv.rows() as f64);
        let mut v = Mat::zeros(1, xv.cols());
        for i in 0..xv.rows() {
            for (o, &e) in v.row_mut(0).iter_mut().zip(xv.row(i)) {
                *o += e;
            }
        }
        let v = v.map(|e| e / r);
        self.push(v, vec![x], Op::MeanRows, false)
    }

    /// Element-wise square root; inputs must stay positive for a finite gradient.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(S::sqrt);
        self.push(v, vec![x], Op::Sqrt, false)
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * sigmoid(e));
        self.push(v, vec![x], Op::Silu, false)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no learned affine.
    pub fn layer_norm_row(&mut self, x: Var, eps: S) -> Var {
        let xv = self.value(x);
        let mut v = xv.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let (mean, var) = row_moments(row);
            let inv = (var + eps).sqrt().recip();
            for e in row.iter_mut() {
                *e = (*e - mean) * inv;
            }
        }
        self.push(v, vec![x], Op::LayerNormRow { eps }, false)
    }

    /// Multiplies column `j` of `x` by `v[j]`; `v` is `1 x c`.
    pub fn mul_cols_vec(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        assert_eq!((1, xv.cols()), vv.shape(), "column vector shape mismatch");
        let out = Mat::from_fn(xv.rows(), xv.cols(), |i, j| xv[(i, j)] * vv[(0, j)]);
        self.push(out, vec![x, v], Op::MulColsVec, false)
    }

    /// Divides column `j` of `x` by `v[j]`; `v` is `1 x c`.
    pub fn div_cols_vec(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        assert_eq!((1, xv.cols()), vv.shape(), "column vector shape mismatch");
        let out = Mat::from_fn(xv.rows(), xv.cols(), |i, j| xv[(i, j)] / vv[(0, j)]);
        self.push(out, vec![x, v], Op::DivColsVec, false)
    }

    /// Multiplies row `i` of `x` by `v[i]`; `v` is `r x 1`.
    pub fn mul_rows_vec(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        assert_eq!((xv.rows(), 1), vv.shape(), "row vector shape mismatch");
        let out = Mat::from_fn(xv.rows(), xv.cols(), |i, j| xv[(i, j)] * vv[(i, 0)]);
        self.push(out, vec![x, v], Op::MulRowsVec, false)
    }

    /// Per-column norms floored at `eps`; `r x c -> 1 x c`.
    pub fn col_norms(&mut self, x: Var, eps: S) -> Var {
        let v = self.value(x).col_norms(eps);
        self.push(v, vec![x], Op::ColNorms { eps }, false)
    }

    /// Kronecker product of two nodes.
    pub fn kron(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).kron(self.value(b));
        self.push(v, vec![a, b], Op::Kron, false)
    }

    /// Stacks nodes vertically.
    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::vstack(&mats);
        self.push(v, parts.to_vec(), Op::VStack, false)
    }

    /// Gathers rows of `x` by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let xv = self.value(x);
        assert!(index.iter().all(|&i| i < xv.rows()), "gather index out of range");
        let mut v = Mat::zeros(index.len(), xv.cols());
        for (r, &src) in index.iter().enumerate() {
            v.row_mut(r).copy_from_slice(xv.row(src));
        }
        self.push(v, vec![x], Op::GatherRows { index: index.to_vec() }, false)
    }

    /// Copies columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_cols(start, len);
        self.push(v, vec![x], Op::SliceCols { start }, false)
    }

    /// Concatenates nodes horizontally.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_cols(&mats);
        self.push(v, parts.to_vec(), Op::ConcatCols, false)
    }

    /// Reinterprets the row-major buffer under a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape size mismatch");
        let v = Mat::from_vec(rows, cols, xv.data().to_vec());
        self.push(v, vec![x], Op::Reshape, false)
    }

    /// 2x2 mean pooling; rows of `x` are an `h x w` grid, channels in columns.
    pub fn mean_pool_2x2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), h * w, "grid size mismatch");
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even grid sides");
        let quarter = S::of(0.25);
        let mut v = Mat::zeros(h / 2 * (w / 2), xv.cols());
        for py in 0..h / 2 {
            for px in 0..w / 2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let src = xv.row((2 * py + dy) * w + (2 * px + dx));
                        let dst = v.row_mut(py * (w / 2) + px);
                        for (o, &e) in dst.iter_mut().zip(src) {
                            *o += e * quarter;
                        }
                    }
                }
            }
        }
        self.push(v, vec![x], Op::MeanPool2x2 { h, w }, false)
    }

    /// Nearest-neighbor 2x upsampling; rows of `x` are an `h x w` grid.
    pub fn upsample_nearest_2x(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), h * w, "grid size mismatch");
        let mut v = Mat::zeros(4 * h * w, xv.cols());
        for y in 0..2 * h {
            for x_ in 0..2 * w {
                let src = xv.row(y / 2 * w + x_ / 2);
                v.row_mut(y * 2 * w + x_).copy_from_slice(src);
            }
        }
        self.push(v, vec![x], Op::UpsampleNearest2x { h, w }, false)
    }

    /// Element-wise maximum; ties send gradient to `a`.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), S::max);
        self.push(v, vec![a, b], Op::MaxElem, false)
    }

    /// Global minimum as `1 x 1`.
    pub fn min_all(&mut self, x: Var) -> Var {
        let m = self.value(x).data().iter().copied().fold(S::infinity(), S::min);
        self.push(Mat::filled(1, 1, m), vec![x], Op::MinAll, false)
    }

    /// Global maximum as `1 x 1`.
    pub fn max_all(&mut self, x: Var) -> Var {
        let m = self.value(x).data().iter().copied().fold(S::neg_infinity(), S::max);
        self.push(Mat::filled(1, 1, m), vec![x], Op::MaxAll, false)
    }

    /// Adds `lambda` where the entry exceeds `tau`, subtracts it elsewhere.
    pub fn piecewise_shift(&mut self, x: Var, tau: S, lambda: S) -> Var {
        let v = self.value(x).map(|e| if e > tau { e + lambda } else { e - lambda });
        self.push(v, vec![x], Op::PiecewiseShift, false)
    }

    /// Clamps into `[0, 1]`.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(S::zero()).min(S::one()));
        self.push(v, vec![x], Op::Clamp01, false)
    }

    /// Squared Frobenius norm as `1 x 1`.
    pub fn frob_sq(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        self.sum_all(sq)
    }

    /// Accumulates gradients of the scalar `loss` into every reachable leaf.
    pub fn backward(&mut self, loss: Var) -> Gradients<S> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, S::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    /// Sends `g`, the gradient at node `id`, into the node's parents.
    fn propagate(&self, id: usize, g: &Mat<S>, grads: &mut [Option<Mat<S>>]) {
        let node = &self.nodes[id];
        let parent_val = |k: usize| &self.nodes[node.parents[k].0].value;
        let mut accum = |k: usize, delta: Mat<S>| {
            let pid = node.parents[k].0;
            if !self.nodes[pid].needs_grad {
                return;
            }
            match &mut grads[pid] {
                Some(acc) => *acc = acc.add(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                accum(0, g.clone());
                accum(1, g.clone());
            }
            Op::Sub => {
                accum(0, g.clone());
                accum(1, g.scale(-S::one()));
            }
            Op::Mul => {
                accum(0, g.hadamard(parent_val(1)));
                accum(1, g.hadamard(parent_val(0)));
            }
            Op::Div => {
                let (a, b) = (parent_val(0), parent_val(1));
                accum(0, g.zip_map(b, |gi, bi| gi / bi));
                let mut db = g.hadamard(a);
                db = db.zip_map(b, |n, bi| -n / (bi * bi));
                accum(1, db);
            }
            Op::Affine { mul } => accum(0, g.scale(*mul)),
            Op::AddRowBroadcast => {
                accum(0, g.clone());
                let mut db = Mat::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &e) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += e;
                    }
                }
                accum(1, db);
            }
            Op::SubBroadcast => {
                accum(0, g.clone());
                accum(1, Mat::filled(1, 1, -g.sum()));
            }
            Op::DivBroadcast => {
                let s = parent_val(1)[(0, 0)];
                accum(0, g.map(|e| e / s));
                let num = g.dot(parent_val(0));
                accum(1, Mat::filled(1, 1, -num / (s * s)));
            }
            Op::Matmul => {
                accum(0, g.matmul(&parent_val(1).transpose()));
                accum(1, parent_val(0).transpose().matmul(g));
            }
            Op::Transpose => accum(0, g.transpose()),
            Op::RowSoftmax => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let gy: S = g.row(i).iter().zip(y.row(i)).map(|(&gi, &yi)| gi * yi).sum();
                    for ((o, &gi), &yi) in dx.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = yi * (gi - gy);
                    }
                }
                accum(0, dx);
            }
            Op::SumAll => {
                let (r, c) = parent_val(0).shape();
                accum(0, Mat::filled(r, c, g[(0, 0)]));
            }
            Op::MeanAll => {
                let (r, c) = parent_val(0).shape();
                let n = S::of((r * c) as f64);
                accum(0, Mat::filled(r, c, g[(0, 0)] / n));
            }
            Op::MeanRows => {
                let (r, c) = parent_val(0).shape();
                let inv = S::of(r as f64).recip();
                accum(0, Mat::from_fn(r, c, |_, j| g[(0, j)] * inv));
            }
            Op::Sqrt => {
                let half = S::of(0.5);
                accum(0, g.zip_map(&node.value, |gi, yi| gi * half / yi));
            }
            Op::Silu => {
                let dx = g.zip_map(parent_val(0), |gi, x| {
                    let s = sigmoid(x);
                    gi * s * (S::one() + x * (S::one() - s))
                });
                accum(0, dx);
            }
            Op::LayerNormRow { eps } => {
                let (x, y) = (parent_val(0), &node.value);
                let mut dx = Mat::zeros(x.rows(), x.cols());
                let n = S::of(x.cols() as f64);
                for i in 0..x.rows() {
                    let (_, var) = row_moments(x.row(i));
                    let inv = (var + *eps).sqrt().recip();
                    let g_mean = g.row(i).iter().copied().sum::<S>() / n;
                    let gy_mean =
                        g.row(i).iter().zip(y.row(i)).map(|(&gi, &yi)| gi * yi).sum::<S>() / n;
                    for ((o, &gi), &yi) in dx.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = (gi - g_mean - yi * gy_mean) * inv;
                    }
                }
                accum(0, dx);
            }
            Op::MulColsVec => {
                let (x, v) = (parent_val(0), parent_val(1));
                accum(0, Mat::from_fn(x.rows(), x.cols(), |i, j| g[(i, j)] * v[(0, j)]));
                let mut dv = Mat::zeros(1, x.cols());
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        dv[(0, j)] += g[(i, j)] * x[(i, j)];
                    }
                }
                accum(1, dv);
            }
            Op::DivColsVec => {
                let (x, v) = (parent_val(0), parent_val(1));
                accum(0, Mat::from_fn(x.rows(), x.cols(), |i, j| g[(i, j)] / v[(0, j)]));
                let mut dv = Mat::zeros(1, x.cols());
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        let vj = v[(0, j)];
                        dv[(0, j)] -= g[(i, j)] * x[(i, j)] / (vj * vj);
                    }
                }
                accum(1, dv);
            }
            Op::MulRowsVec => {
                let (x, v) = (parent_val(0), parent_val(1));
                accum(0, Mat::from_fn(x.rows(), x.cols(), |i, j| g[(i, j)] * v[(i, 0)]));
                let mut dv = Mat::zeros(x.rows(), 1);
                for i in 0..x.rows() {
                    dv[(i, 0)] = g.row(i).iter().zip(x.row(i)).map(|(&gi, &xi)| gi * xi).sum();
                }
                accum(1, dv);
            }
            Op::ColNorms { eps } => {
                // The floor is active when the raw norm falls below eps; there
                // the output is constant and no gradient flows.
                let x = parent_val(0);
                let n = &node.value;
                let raw = x.col_norms(S::zero());
                let dx = Mat::from_fn(x.rows(), x.cols(), |i, j| {
                    if raw[(0, j)] > *eps {
                        g[(0, j)] * x[(i, j)] / n[(0, j)]
                    } else {
                        S::zero()
                    }
                });
                accum(0, dx);
            }
            Op::Kron => {
                let (a, b) = (parent_val(0), parent_val(1));
                let (b1, b2) = b.shape();
                let mut da = Mat::zeros(a.rows(), a.cols());
                let mut db = Mat::zeros(b1, b2);
                for i in 0..a.rows() {
                    for j in 0..a.cols() {
                        for p in 0..b1 {
                            for q in 0..b2 {
                                let ge = g[(i * b1 + p, j * b2 + q)];
                                da[(i, j)] += ge * b[(p, q)];
                                db[(p, q)] += ge * a[(i, j)];
                            }
                        }
                    }
                }
                accum(0, da);
                accum(1, db);
            }
            Op::VStack => {
                let mut at = 0;
                for k in 0..node.parents.len() {
                    let rows = parent_val(k).rows();
                    let part = Mat::from_fn(rows, g.cols(), |i, j| g[(at + i, j)]);
                    accum(k, part);
                    at += rows;
                }
            }
            Op::GatherRows { index } => {
                let (r, c) = parent_val(0).shape();
                let mut dx = Mat::zeros(r, c);
                for (out_row, &src) in index.iter().enumerate() {
                    for (o, &e) in dx.row_mut(src).iter_mut().zip(g.row(out_row)) {
                        *o += e;
                    }
                }
                accum(0, dx);
            }
            Op::SliceCols { start, .. } => {
                let (r, c) = parent_val(0).shape();
                let mut dx = Mat::zeros(r, c);
                for i in 0..g.rows() {
                    dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accum(0, dx);
            }
            Op::ConcatCols => {
                let mut at = 0;
                for k in 0..node.parents.len() {
                    let cols = parent_val(k).cols();
                    accum(k, g.slice_cols(at, cols));
                    at += cols;
                }
            }
            Op::Reshape => {
                let (r, c) = parent_val(0).shape();
                accum(0, Mat::from_vec(r, c, g.data().to_vec()));
            }
            Op::MeanPool2x2 { h, w } => {
                let quarter = S::of(0.25);
                let mut dx = Mat::zeros(h * w, g.cols());
                for py in 0..h / 2 {
                    for px in 0..w / 2 {
                        let src = g.row(py * (w / 2) + px);
                        for dy in 0..2 {
                            for dx_ in 0..2 {
                                let dst = dx.row_mut((2 * py + dy) * w + (2 * px + dx_));
                                for (o, &e) in dst.iter_mut().zip(src) {
                                    *o += e * quarter;
                                }
                            }
                        }
                    }
                }
                accum(0, dx);
            }
            Op::UpsampleNearest2x { h, w } => {
                let mut dx = Mat::zeros(h * w, g.cols());
                for y in 0..2 * h {
                    for x_ in 0..2 * w {
                        let src = g.row(y * 2 * w + x_);
                        let dst = dx.row_mut(y / 2 * w + x_ / 2);
                        for (o, &e) in dst.iter_mut().zip(src) {
                            *o += e;
                        }
                    }
                }
                accum(0, dx);
            }
            Op::MaxElem => {
                let (a, b) = (parent_val(0), parent_val(1));
                accum(0, g.zip_map(a, |gi, _| gi).zip_map(&a.zip_map(b, |x, y| if x >= y { S::one() } else { S::zero() }), |gi, m| gi * m));
                accum(1, g.zip_map(&a.zip_map(b, |x, y| if x >= y { S::zero() } else { S::one() }), |gi, m| gi * m));
            }
            Op::MinAll | Op::MaxAll => {
                let x = parent_val(0);
                let target = node.value[(0, 0)];
                let mut dx = Mat::zeros(x.rows(), x.cols());
                if let Some(pos) = x.data().iter().position(|&e| e == target) {
                    dx.data_mut()[pos] = g[(0, 0)];
                }
                accum(0, dx);
            }
            Op::PiecewiseShift => accum(0, g.clone()),
            Op::Clamp01 => {
                let x = parent_val(0);
                let dx = g.zip_map(x, |gi, xi| {
                    if xi >= S::zero() && xi <= S::one() {
                        gi
                    } else {
                        S::zero()
                    }
                });
                accum(0, dx);
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn row_moments<S: Scalar>(row: &[S]) -> (S, S) {
    let n = S::of(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<S>() / n;
    (mean, var)
}

/// Central finite-difference gradient of `f` at `x0`.
///
/// This is the independent oracle the gradient tests compare the tape
/// against; it never touches [`Graph::backward`].
pub fn finite_difference<S: Scalar>(
    x0: &Mat<S>,
    step: S,
    mut f: impl FnMut(&Mat<S>) -> S,
) -> Mat<S> {
    let mut g = Mat::zeros(x0.rows(), x0.cols());
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let orig = x.data()[idx];
        x.data_mut()[idx] = orig + step;
        let fp = f(&x);
        x.data_mut()[idx] = orig - step;
        let fm = f(&x);
        x.data_mut()[idx] = orig;
        g.data_mut()[idx] = (fp - fm) / (S::of(2.0) * step);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type M = Mat<f64>;

    /// Scalarizes the op output with fixed weights and compares the tape
    /// gradient against central finite differences.
    fn check_grad(x0: &M, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&mut g, x);
        let (yr, yc) = g.shape(y);
        let weights = M::from_fn(yr, yc, |i, j| 0.3 + 0.17 * ((2 * i + 3 * j) as f64));
        let w = g.constant(weights.clone());
        let prod = g.mul(y, w);
        let loss = g.sum_all(prod);
        let analytic = g.backward(loss).wrt(x, x0.shape());

        let numeric = finite_difference(x0, 1e-5, |xm| {
            let mut g = Graph::new();
            let x = g.param(xm.clone());
            let y = build(&mut g, x);
            let w = g.constant(weights.clone());
            let prod = g.mul(y, w);
            let loss = g.sum_all(prod);
            g.value(loss)[(0, 0)]
        });

        let diff = analytic.max_abs_diff(&numeric);
        let scale = numeric.max_abs().max(1.0);
        assert!(
            diff / scale < 1e-6,
            "gradient mismatch: |analytic - numeric| = {diff:e}\nanalytic {analytic:?}\nnumeric {numeric:?}"
        );
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> M {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        M::randn(rows, cols, 0.0, 1.0, &mut rng)
    }

    #[test]
    fn grad_elementwise_ops() {
        let x = sample(3, 4, 1);
        let other = sample(3, 4, 2).map(|e| e + 3.0); // keep divisors away from zero
        check_grad(&x, |g, v| {
            let c = g.constant(sample(3, 4, 2).map(|e| e + 3.0));
            g.add(v, c)
        });
        check_grad(&x, |g, v| {
            let c = g.constant(other.clone());
            g.sub(v, c)
        });
        check_grad(&x, |g, v| {
            let c = g.constant(other.clone());
            g.mul(v, c)
        });
        check_grad(&x, |g, v| {
            let c = g.constant(other.clone());
            g.div(v, c)
        });
        // divisor side of Div
        check_grad(&x.map(|e| e + 4.0), |g, v| {
            let c = g.constant(sample(3, 4, 3));
            g.div(c, v)
        });
        check_grad(&x, |g, v| g.affine(v, -1.7, 0.4));
        check_grad(&x, |g, v| g.square(v));
    }

    #[test]
    fn grad_broadcast_ops() {
        let x = sample(4, 3, 5);
        check_grad(&x, |g, v| {
            let b = g.constant(sample(1, 3, 6));
            g.add_row_broadcast(v, b)
        });
        check_grad(&sample(1, 3, 7), |g, v| {
            let base = g.constant(sample(4, 3, 8));
            g.add_row_broadcast(base, v)
        });
        check_grad(&x, |g, v| {
            let s = g.constant(M::filled(1, 1, 0.7));
            g.sub_broadcast(v, s)
        });
        check_grad(&M::filled(1, 1, 0.7), |g, v| {
            let base = g.constant(sample(4, 3, 9));
            g.sub_broadcast(base, v)
        });
        check_grad(&x, |g, v| {
            let s = g.constant(M::filled(1, 1, 1.3));
            g.div_broadcast(v, s)
        });
        check_grad(&M::filled(1, 1, 1.3), |g, v| {
            let base = g.constant(sample(4, 3, 10));
            g.div_broadcast(base, v)
        });
    }

    #[test]
    fn grad_matmul_transpose() {
        let x = sample(3, 4, 11);
        check_grad(&x, |g, v| {
            let b = g.constant(sample(4, 2, 12));
            g.matmul(v, b)
        });
        check_grad(&sample(4, 2, 13), |g, v| {
            let a = g.constant(sample(3, 4, 14));
            g.matmul(a, v)
        });
        check_grad(&x, |g, v| g.transpose(v));
    }

    #[test]
    fn grad_softmax_and_norms() {
        check_grad(&sample(3, 5, 15), |g, v| g.row_softmax(v));
        check_grad(&sample(3, 5, 16), |g, v| g.layer_norm_row(v, 1e-5));
        // keep entries away from the eps floor so the gradient is smooth
        check_grad(&sample(3, 4, 17).map(|e| e + 2.0), |g, v| g.col_norms(v, 1e-8));
    }

    #[test]
    fn grad_reductions() {
        let x = sample(3, 4, 18);
        check_grad(&x, |g, v| g.sum_all(v));
        check_grad(&x, |g, v| g.mean_all(v));
        check_grad(&x, |g, v| g.mean_rows(v));
    }

    #[test]
    fn grad_activation_ops() {
        check_grad(&sample(3, 4, 19), |g, v| g.silu(v));
        check_grad(&sample(3, 4, 20).map(|e| e * e + 0.5), |g, v| g.sqrt(v));
    }

    #[test]
    fn grad_structural_ops() {
        let x = sample(4, 3, 21);
        check_grad(&x, |g, v| {
            let o = g.constant(sample(2, 3, 22));
            g.vstack(&[v, o, v])
        });
        check_grad(&x, |g, v| g.gather_rows(v, &[2, 0, 2, 3]));
        check_grad(&x, |g, v| g.slice_cols(v, 1, 2));
        check_grad(&x, |g, v| {
            let o = g.constant(sample(4, 2, 23));
            g.concat_cols(&[v, o])
        });
        check_grad(&x, |g, v| g.reshape(v, 2, 6));
    }

    #[test]
    fn grad_grid_ops() {
        check_grad(&sample(16, 3, 24), |g, v| g.mean_pool_2x2(v, 4, 4));
        check_grad(&sample(16, 3, 25), |g, v| g.upsample_nearest_2x(v, 4, 4));
    }

    #[test]
    fn grad_scaling_ops() {
        let x = sample(4, 3, 26);
        check_grad(&x, |g, v| {
            let c = g.constant(sample(1, 3, 27).map(|e| e + 2.5));
            g.mul_cols_vec(v, c)
        });
        check_grad(&sample(1, 3, 28).map(|e| e + 2.5), |g, v| {
            let base = g.constant(sample(4, 3, 29));
            g.mul_cols_vec(base, v)
        });
        check_grad(&x, |g, v| {
            let c = g.constant(sample(1, 3, 30).map(|e| e.abs() + 1.0));
            g.div_cols_vec(v, c)
        });
        check_grad(&sample(1, 3, 31).map(|e| e.abs() + 1.0), |g, v| {
            let base = g.constant(sample(4, 3, 32));
            g.div_cols_vec(base, v)
        });
        check_grad(&x, |g, v| {
            let c = g.constant(sample(4, 1, 33));
            g.mul_rows_vec(v, c)
        });
        check_grad(&sample(4, 1, 34), |g, v| {
            let base = g.constant(sample(4, 3, 35));
            g.mul_rows_vec(base, v)
        });
    }

    #[test]
    fn grad_kron_both_sides() {
        check_grad(&sample(2, 3, 36), |g, v| {
            let b = g.constant(sample(2, 2, 37));
            g.kron(v, b)
        });
        check_grad(&sample(2, 2, 38), |g, v| {
            let a = g.constant(sample(2, 3, 39));
            g.kron(a, v)
        });
    }

    #[test]
    fn grad_extrema_and_clamps() {
        // shift entries so no ties or boundary hits occur
        let x = sample(3, 4, 40).map(|e| 0.5 + 0.2 * e.tanh());
        check_grad(&x, |g, v| {
            let o = g.constant(sample(3, 4, 41));
            g.max_elem(v, o)
        });
        check_grad(&sample(3, 4, 42), |g, v| {
            let o = g.constant(sample(3, 4, 43).map(|e| e + 0.01));
            g.max_elem(o, v)
        });
        check_grad(&sample(3, 4, 44), |g, v| g.min_all(v));
        check_grad(&sample(3, 4, 45), |g, v| g.max_all(v));
        check_grad(&x, |g, v| g.piecewise_shift(v, 0.31, 0.1));
        check_grad(&x, |g, v| g.clamp01(v));
        // clamp zeroes gradient outside [0, 1]
        let mut g = Graph::new();
        let v = g.param(M::from_rows(&[&[-0.5, 0.5, 1.5]]));
        let c = g.clamp01(v);
        let loss = g.sum_all(c);
        let grad = g.backward(loss).wrt(v, (1, 3));
        assert_eq!(grad, M::from_rows(&[&[0.0, 1.0, 0.0]]));
    }

    #[test]
    fn grad_accumulates_through_shared_nodes() {
        // f(x) = sum(x * x) via two paths sharing the same leaf
        let x = sample(3, 3, 46);
        check_grad(&x, |g, v| {
            let t = g.transpose(v);
            let tt = g.transpose(t);
            g.mul(v, tt)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(M::filled(2, 2, 1.0));
        let p = g.param(M::filled(2, 2, 2.0));
        let y = g.mul(c, p);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(p, (2, 2)), M::filled(2, 2, 1.0));
    }

    #[test]
    fn backward_ignores_nodes_created_after_the_loss() {
        let mut g = Graph::new();
        let p = g.param(M::filled(1, 1, 3.0));
        let loss = g.square(p);
        let _later = g.scale(p, 100.0);
        let grads = g.backward(loss);
        assert_eq!(grads.wrt(p, (1, 1))[(0, 0)], 6.0);
    }
}
