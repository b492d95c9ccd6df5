//! Reverse-mode tape over batched matrices.
//!
//! Nodes are appended in evaluation order, so a node's inputs always have
//! smaller ids and a single reverse sweep from the root is a valid backward
//! pass. Derivatives of the network with respect to its *inputs* (SDF normals,
//! bending Jacobians) are not taken by a second reverse pass: they are recorded
//! as forward tangents on the same tape (see `nn::Dual`), which keeps every
//! quantity first-order from the tape's point of view.

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnKind {
    Scale(f64),
    Offset(f64),
    Softplus(f64),
    Sigmoid,
    LogSigmoid,
    Relu,
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
    Sin,
    Cos,
    Clamp(f64, f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    WeightNorm {
        v: usize,
        g: usize,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        bcast: Bcast,
    },
    Unary {
        kind: UnKind,
        a: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        a: usize,
        start: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
    },
    TileRows {
        a: usize,
        times: usize,
    },
    Reshape {
        a: usize,
    },
    GatherRows {
        a: usize,
        index: Vec<usize>,
    },
    SumAll {
        a: usize,
    },
    RowSums {
        a: usize,
    },
    CumProdExclusive {
        a: usize,
    },
    WeightedRowSum {
        w: usize,
        v: usize,
    },
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// A single-owner operation graph. Build one per batch, call
/// [`Tape::backward`], then drop it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[inline]
fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 20.0 {
        x
    } else {
        bx.exp().ln_1p() / beta
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn unary_value(kind: UnKind, x: f64) -> f64 {
    match kind {
        UnKind::Scale(c) => c * x,
        UnKind::Offset(c) => x + c,
        UnKind::Softplus(beta) => softplus(x, beta),
        UnKind::Sigmoid => sigmoid(x),
        UnKind::LogSigmoid => log_sigmoid(x),
        UnKind::Relu => x.max(0.0),
        UnKind::Exp => x.exp(),
        UnKind::Ln => x.ln(),
        UnKind::Sqrt => x.sqrt(),
        UnKind::Square => x * x,
        UnKind::Abs => x.abs(),
        UnKind::Sin => x.sin(),
        UnKind::Cos => x.cos(),
        UnKind::Clamp(lo, hi) => x.clamp(lo, hi),
    }
}

/// d(out)/d(in) given input `x` and output `y`.
fn unary_deriv(kind: UnKind, x: f64, y: f64) -> f64 {
    match kind {
        UnKind::Scale(c) => c,
        UnKind::Offset(_) => 1.0,
        UnKind::Softplus(beta) => sigmoid(beta * x),
        UnKind::Sigmoid => y * (1.0 - y),
        UnKind::LogSigmoid => sigmoid(-x),
        UnKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnKind::Exp => y,
        UnKind::Ln => 1.0 / x,
        UnKind::Sqrt => 0.5 / y,
        UnKind::Square => 2.0 * x,
        UnKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnKind::Sin => x.cos(),
        UnKind::Cos => -x.sin(),
        UnKind::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
    }
}

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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m, true)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Const, m, false)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Matrix::scalar(x))
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    /// `x * w^T (+ b)`: `x` is N x in, `w` is out x in, `b` is 1 x out.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.shape(x);
        let (out, wk) = self.shape(w);
        if k != wk {
            return Err(Error::Shape(format!(
                "linear: input width {k} but weight expects {wk}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, out) {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} for {out} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut y = Matrix::zeros(n, out);
        if let Some(b) = b {
            let bias = self.value(b).as_slice();
            for r in 0..n {
                y.row_mut(r).copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            n,
            k,
            out,
            (self.value(x).as_slice(), k as isize, 1),
            (self.value(w).as_slice(), 1, k as isize),
            y.as_mut_slice(),
            beta,
        );
        let mut ids = vec![x.0, w.0];
        if let Some(b) = b {
            ids.push(b.0);
        }
        let ng = self.ng(&ids);
        Ok(self.push(
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            y,
            ng,
        ))
    }

    /// Row-wise weight normalization `w_i = g_i * v_i / |v_i|`; `v` is out x in,
    /// `g` is out x 1.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let (out, k) = self.shape(v);
        if self.shape(g) != (out, 1) {
            return Err(Error::Shape(format!(
                "weight_norm: gain {:?} for {out} rows",
                self.shape(g)
            )));
        }
        let vm = self.value(v);
        let gm = self.value(g);
        let mut w = Matrix::zeros(out, k);
        for r in 0..out {
            let row = vm.row(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = gm.get(r, 0) / n;
            for (o, &x) in w.row_mut(r).iter_mut().zip(row) {
                *o = s * x;
            }
        }
        let ng = self.ng(&[v.0, g.0]);
        Ok(self.push(Op::WeightNorm { v: v.0, g: g.0 }, w, ng))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let bcast = if (br, bc) == (ar, ac) {
            Bcast::Same
        } else if (br, bc) == (1, 1) {
            Bcast::Scalar
        } else if br == 1 && bc == ac {
            Bcast::Row
        } else if bc == 1 && br == ar {
            Bcast::Col
        } else {
            return Err(Error::Shape(format!(
                "{kind:?}: cannot broadcast {br}x{bc} onto {ar}x{ac}"
            )));
        };
        let am = self.value(a);
        let bm = self.value(b);
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let out = Matrix::from_fn(ar, ac, |r, c| {
            let y = match bcast {
                Bcast::Same => bm.get(r, c),
                Bcast::Scalar => bm.get(0, 0),
                Bcast::Row => bm.get(0, c),
                Bcast::Col => bm.get(r, 0),
            };
            f(am.get(r, c), y)
        });
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                bcast,
            },
            out,
            ng,
        ))
    }

    /// Elementwise `a + b`; `b` may be same-shape, 1x1, a row or a column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Var {
        let out = self.value(a).map(|x| unary_value(kind, x));
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::Unary { kind, a: a.0 }, out, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnKind::Scale(c), a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnKind::Offset(c), a)
    }

    /// `ln(1 + exp(beta x)) / beta`, linear once `beta x > 20`.
    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        self.unary(UnKind::Softplus(beta), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sigmoid, a)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnKind::LogSigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnKind::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnKind::Ln, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnKind::Square, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnKind::Abs, a)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(UnKind::Cos, a)
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnKind::Clamp(lo, hi), a)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::Shape("concat of nothing".into())),
        };
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(Op::ConcatCols(ids), out, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.shape(p).1,
            None => return Err(Error::Shape("concat of nothing".into())),
        };
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).as_slice());
        }
        let rows = data.len() / cols.max(1);
        let out = Matrix::from_vec(rows, cols, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(Op::ConcatRows(ids), out, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, c) = self.shape(a);
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} of {c}",
                start + len
            )));
        }
        let out = self.value(a).slice_cols(start, len);
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(Op::SliceCols { a: a.0, start }, out, ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, _) = self.shape(a);
        if start + len > r {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} of {r}",
                start + len
            )));
        }
        let out = self.value(a).slice_rows(start, len);
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(Op::SliceRows { a: a.0, start }, out, ng))
    }

    /// Stack `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let m = self.value(a);
        let mut data = Vec::with_capacity(m.len() * times);
        for _ in 0..times {
            data.extend_from_slice(m.as_slice());
        }
        let out = Matrix::from_vec(m.rows() * times, m.cols(), data).expect("tile shape");
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::TileRows { a: a.0, times }, out, ng)
    }

    /// Row-major reinterpretation.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshaped(rows, cols)?;
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(Op::Reshape { a: a.0 }, out, ng))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= m.rows()) {
            return Err(Error::Shape(format!(
                "gather row {bad} of {}",
                m.rows()
            )));
        }
        let mut data = Vec::with_capacity(index.len() * m.cols());
        for &i in index {
            data.extend_from_slice(m.row(i));
        }
        let out = Matrix::from_vec(index.len(), m.cols(), data)?;
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(
            Op::GatherRows {
                a: a.0,
                index: index.to_vec(),
            },
            out,
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).as_slice().iter().sum();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::SumAll { a: a.0 }, Matrix::scalar(s), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// R x C -> R x 1.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out = Matrix::from_fn(m.rows(), 1, |r, _| m.row(r).iter().sum());
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::RowSums { a: a.0 }, out, ng)
    }

    /// Row-wise exclusive cumulative product: `out[r][z] = prod_{k<z} a[r][k]`.
    pub fn cumprod_exclusive(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let mut p = 1.0;
            for c in 0..m.cols() {
                out.set(r, c, p);
                p *= m.get(r, c);
            }
        }
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::CumProdExclusive { a: a.0 }, out, ng)
    }

    /// `out[r] = sum_k w[r][k] * v[r * K + k]` for `w` R x K and `v` (R*K) x C.
    pub fn weighted_row_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (r, k) = self.shape(w);
        let (vr, c) = self.shape(v);
        if vr != r * k {
            return Err(Error::Shape(format!(
                "weighted_row_sum: {r}x{k} weights for {vr} value rows"
            )));
        }
        let wm = self.value(w);
        let vm = self.value(v);
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            for j in 0..k {
                let wij = wm.get(i, j);
                let src = vm.row(i * k + j);
                for (o, x) in out.row_mut(i).iter_mut().zip(src) {
                    *o += wij * x;
                }
            }
        }
        let ng = self.ng(&[w.0, v.0]);
        Ok(self.push(Op::WeightedRowSum { w: w.0, v: v.0 }, out, ng))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|n| n.value.shape()).collect();
        if shapes[root.0] != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from non-scalar root of shape {:?}",
                shapes[root.0]
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[root.0] = Some(Matrix::scalar(1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        // Only leaves keep gradients; intermediates were consumed above.
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Matrix>],
        id: usize,
        f: impl FnOnce(&mut Matrix),
    ) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = &mut grads[id];
        if slot.is_none() {
            let (r, c) = self.nodes[id].value.shape();
            *slot = Some(Matrix::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match *op {
            Op::Leaf | Op::Const => {}
            Op::Linear { x, w, b } => {
                let xm = &self.nodes[x].value;
                let wm = &self.nodes[w].value;
                let (n, k) = xm.shape();
                let o = wm.rows();
                self.accumulate_with(grads, x, |dx| {
                    gemm(
                        n,
                        o,
                        k,
                        (g.as_slice(), o as isize, 1),
                        (wm.as_slice(), k as isize, 1),
                        dx.as_mut_slice(),
                        1.0,
                    );
                });
                self.accumulate_with(grads, w, |dw| {
                    gemm(
                        o,
                        n,
                        k,
                        (g.as_slice(), 1, o as isize),
                        (xm.as_slice(), k as isize, 1),
                        dw.as_mut_slice(),
                        1.0,
                    );
                });
                if let Some(b) = b {
                    self.accumulate_with(grads, b, |db| {
                        for r in 0..n {
                            for (d, x) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                    });
                }
            }
            Op::WeightNorm { v, g: gain } => {
                let vm = &self.nodes[v].value;
                let gm = &self.nodes[gain].value;
                let (o, k) = vm.shape();
                let mut dv = Matrix::zeros(o, k);
                let mut dg = Matrix::zeros(o, 1);
                for r in 0..o {
                    let row = vm.row(r);
                    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let gr = g.row(r);
                    let proj: f64 = gr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / n;
                    dg.set(r, 0, proj);
                    let s = gm.get(r, 0) / n;
                    for ((d, &gi), &vi) in dv.row_mut(r).iter_mut().zip(gr).zip(row) {
                        *d = s * (gi - proj * vi / n);
                    }
                }
                self.accumulate(grads, v, dv);
                self.accumulate(grads, gain, dg);
            }
            Op::Binary { kind, a, b, bcast } => {
                let am = &self.nodes[a].value;
                let bm = &self.nodes[b].value;
                let (rows, cols) = am.shape();
                let bval = |r: usize, c: usize| match bcast {
                    Bcast::Same => bm.get(r, c),
                    Bcast::Scalar => bm.get(0, 0),
                    Bcast::Row => bm.get(0, c),
                    Bcast::Col => bm.get(r, 0),
                };
                if self.nodes[a].needs_grad {
                    let da = Matrix::from_fn(rows, cols, |r, c| {
                        let gi = g.get(r, c);
                        match kind {
                            BinKind::Add | BinKind::Sub => gi,
                            BinKind::Mul => gi * bval(r, c),
                            BinKind::Div => gi / bval(r, c),
                        }
                    });
                    self.accumulate(grads, a, da);
                }
                if self.nodes[b].needs_grad {
                    let local = |r: usize, c: usize| {
                        let gi = g.get(r, c);
                        match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * am.get(r, c),
                            BinKind::Div => {
                                let y = bval(r, c);
                                -gi * am.get(r, c) / (y * y)
                            }
                        }
                    };
                    self.accumulate_with(grads, b, |db| {
                        for r in 0..rows {
                            for c in 0..cols {
                                let v = local(r, c);
                                match bcast {
                                    Bcast::Same => db.as_mut_slice()[r * cols + c] += v,
                                    Bcast::Scalar => db.as_mut_slice()[0] += v,
                                    Bcast::Row => db.as_mut_slice()[c] += v,
                                    Bcast::Col => db.as_mut_slice()[r] += v,
                                }
                            }
                        }
                    });
                }
            }
            Op::Unary { kind, a } => {
                let am = &self.nodes[a].value;
                let mut da = g.clone();
                for ((d, &x), &y) in da
                    .as_mut_slice()
                    .iter_mut()
                    .zip(am.as_slice())
                    .zip(out.as_slice())
                {
                    *d *= unary_deriv(kind, x, y);
                }
                self.accumulate(grads, a, da);
            }
            Op::ConcatCols(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if self.nodes[p].needs_grad {
                        self.accumulate(grads, p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.nodes[p].value.rows();
                    if self.nodes[p].needs_grad {
                        self.accumulate(grads, p, g.slice_rows(off, h));
                    }
                    off += h;
                }
            }
            Op::SliceCols { a, start } => {
                let w = g.cols();
                self.accumulate_with(grads, a, |da| {
                    for r in 0..g.rows() {
                        for (d, x) in da.row_mut(r)[start..start + w].iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                });
            }
            Op::SliceRows { a, start } => {
                let cols = g.cols();
                self.accumulate_with(grads, a, |da| {
                    let dst = &mut da.as_mut_slice()[start * cols..start * cols + g.len()];
                    for (d, x) in dst.iter_mut().zip(g.as_slice()) {
                        *d += x;
                    }
                });
            }
            Op::TileRows { a, times } => {
                let block = self.nodes[a].value.len();
                self.accumulate_with(grads, a, |da| {
                    for t in 0..times {
                        let src = &g.as_slice()[t * block..(t + 1) * block];
                        for (d, x) in da.as_mut_slice().iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                let (r, c) = self.nodes[a].value.shape();
                self.accumulate(grads, a, g.clone().reshaped(r, c).expect("reshape grad"));
            }
            Op::GatherRows { a, ref index } => {
                self.accumulate_with(grads, a, |da| {
                    for (r, &i) in index.iter().enumerate() {
                        for (d, x) in da.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let (r, c) = self.nodes[a].value.shape();
                self.accumulate(grads, a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::RowSums { a } => {
                let (r, c) = self.nodes[a].value.shape();
                self.accumulate(grads, a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::CumProdExclusive { a } => {
                let am = &self.nodes[a].value;
                let (rows, cols) = am.shape();
                let mut da = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    // acc_z = sum_{j>z} g_j prod_{z<k<j} a_k, built from the back.
                    let mut acc = 0.0;
                    for z in (0..cols).rev() {
                        da.set(r, z, out.get(r, z) * acc);
                        acc = g.get(r, z) + am.get(r, z) * acc;
                    }
                }
                self.accumulate(grads, a, da);
            }
            Op::WeightedRowSum { w, v } => {
                let wm = &self.nodes[w].value;
                let vm = &self.nodes[v].value;
                let (r, k) = wm.shape();
                if self.nodes[w].needs_grad {
                    let dw = Matrix::from_fn(r, k, |i, j| {
                        g.row(i)
                            .iter()
                            .zip(vm.row(i * k + j))
                            .map(|(a, b)| a * b)
                            .sum()
                    });
                    self.accumulate(grads, w, dw);
                }
                if self.nodes[v].needs_grad {
                    let c = vm.cols();
                    let dv = Matrix::from_fn(r * k, c, |row, col| {
                        let (i, j) = (row / k, row % k);
                        wm.get(i, j) * g.get(i, col)
                    });
                    self.accumulate(grads, v, dv);
                }
            }
        }
    }
}
