//! Per-evaluation Wengert tape over small dense matrices.
//!
//! Every node holds a row-major `rows x cols` value. Binary elementwise ops
//! broadcast any dimension of size 1. The tape is rebuilt for every
//! evaluation; nothing about the graph is cached between steps.

use std::sync::Arc;

use super::params::{ParamVector, SegmentId};
use super::DiffError;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse row-mixing operator: output row `r` is `sum_k w_k * src[row_k]`.
/// Rows with no taps produce zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    pub rows: Vec<Vec<(u32, f64)>>,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Exp,
    Sin,
    Cos,
    Sigmoid,
    Softplus,
    Sqrt,
    Square,
    LaplaceCdf,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::LaplaceCdf => "laplace_cdf",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::LaplaceCdf => laplace_cdf(x),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::LaplaceCdf => 0.5 * (-x.abs()).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(SegmentId),
    Affine {
        x: usize,
        w: SegmentId,
        b: Option<SegmentId>,
    },
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    SumAll(usize),
    SumCols(usize),
    SumRowGroups(usize, usize),
    CumSumCols(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Gather(usize, Arc<SparseRows>),
}

struct Node {
    value: Mat,
    op: Op,
    segment: Option<SegmentId>,
}

pub struct Tape<'p> {
    params: &'p ParamVector,
    nodes: Vec<Node>,
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Unit-scale Laplace CDF, the building block of the SDF-to-density map.
pub fn laplace_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.5 * x.exp()
    } else {
        1.0 - 0.5 * (-x).exp()
    }
}

fn broadcast_shape(a: &Mat, b: &Mat) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.rows, b.rows)?, dim(a.cols, b.cols)?))
}

#[inline]
fn bidx(m: &Mat, r: usize, c: usize) -> usize {
    let r = if m.rows == 1 { 0 } else { r };
    let c = if m.cols == 1 { 0 } else { c };
    r * m.cols + c
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamVector) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamVector {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(
        &mut self,
        value: Mat,
        op: Op,
        segment: Option<SegmentId>,
        primitive: &'static str,
    ) -> Result<Var, DiffError> {
        if let Some(bad) = value.data.iter().position(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite {
                primitive,
                segment: segment.map(|s| self.params.layout().segment(s).name.clone()),
                index: bad,
            });
        }
        self.nodes.push(Node { value, op, segment });
        Ok(Var(self.nodes.len() - 1))
    }

    fn seg_of(&self, vars: &[usize]) -> Option<SegmentId> {
        vars.iter().find_map(|&i| self.nodes[i].segment)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Result<Var, DiffError> {
        self.push(value, Op::Leaf, None, "constant")
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var, DiffError> {
        self.constant(Mat::scalar(v))
    }

    /// Whole parameter segment as a `rows x cols` node.
    pub fn param(&mut self, id: SegmentId) -> Result<Var, DiffError> {
        let seg = self.params.layout().segment(id);
        let value = Mat::new(seg.rows, seg.cols, self.params.segment(id).to_vec());
        self.push(value, Op::Param(id), Some(id), "param")
    }

    /// `x W^T + b` with `W` stored as an `out x in` segment and `b` as `1 x out`.
    pub fn affine(&mut self, x: Var, w: SegmentId, b: Option<SegmentId>) -> Result<Var, DiffError> {
        let layout = self.params.layout();
        let wseg = layout.segment(w);
        let xin = &self.nodes[x.0].value;
        if xin.cols != wseg.cols {
            return Err(DiffError::Shape(format!(
                "affine `{}` expects {} inputs, got {}",
                wseg.name, wseg.cols, xin.cols
            )));
        }
        let (n, k, m) = (xin.rows, wseg.cols, wseg.rows);
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bias = self.params.segment(b);
            if bias.len() != m {
                return Err(DiffError::Shape(format!(
                    "bias `{}` has {} entries, expected {}",
                    layout.segment(b).name,
                    bias.len(),
                    m
                )));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bias);
            }
        }
        let wv = self.params.segment(w);
        if n > 0 && k > 0 && m > 0 {
            // SAFETY: slices are sized n*k, m*k and n*m and strides describe
            // row-major x, transposed row-major W, and row-major out.
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    k,
                    m,
                    1.0,
                    xin.data.as_ptr(),
                    k as isize,
                    1,
                    wv.as_ptr(),
                    1,
                    k as isize,
                    1.0,
                    out.as_mut_ptr(),
                    m as isize,
                    1,
                );
            }
        }
        self.push(
            Mat::new(n, m, out),
            Op::Affine { x: x.0, w, b },
            Some(w),
            "affine",
        )
    }

    fn unary(&mut self, u: Unary, a: Var) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        let value = Mat::new(
            src.rows,
            src.cols,
            src.data.iter().map(|&x| u.apply(x)).collect(),
        );
        let seg = self.seg_of(&[a.0]);
        self.push(value, Op::Unary(u, a.0), seg, u.name())
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Exp, a)
    }
    pub fn sin(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Cos, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Softplus, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Square, a)
    }
    pub fn laplace_cdf(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Unary::LaplaceCdf, a)
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var, DiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (rows, cols) = broadcast_shape(va, vb).ok_or_else(|| {
            DiffError::Shape(format!(
                "{}: cannot broadcast {}x{} with {}x{}",
                op.name(),
                va.rows,
                va.cols,
                vb.rows,
                vb.cols
            ))
        })?;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = va.data[bidx(va, r, c)];
                let y = vb.data[bidx(vb, r, c)];
                out.push(match op {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        let seg = self.seg_of(&[a.0, b.0]);
        self.push(
            Mat::new(rows, cols, out),
            Op::Binary(op, a.0, b.0),
            seg,
            op.name(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        let value = Mat::new(src.rows, src.cols, src.data.iter().map(|x| x * k).collect());
        let seg = self.seg_of(&[a.0]);
        self.push(value, Op::Scale(a.0, k), seg, "scale")
    }

    /// `k - a`, elementwise.
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Result<Var, DiffError> {
        let c = self.scalar(k)?;
        self.sub(c, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.nodes[a.0].value.data.iter().sum();
        let seg = self.seg_of(&[a.0]);
        self.push(Mat::scalar(s), Op::SumAll(a.0), seg, "sum")
    }

    /// Sum across columns: `rows x cols -> rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        let out = (0..src.rows).map(|r| src.row(r).iter().sum()).collect();
        let value = Mat::new(src.rows, 1, out);
        let seg = self.seg_of(&[a.0]);
        self.push(value, Op::SumCols(a.0), seg, "sum_cols")
    }

    /// Sum consecutive groups of `group` rows: `(n*group) x c -> n x c`.
    pub fn sum_row_groups(&mut self, a: Var, group: usize) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        if group == 0 || src.rows % group != 0 {
            return Err(DiffError::Shape(format!(
                "sum_row_groups: {} rows not divisible by {}",
                src.rows, group
            )));
        }
        let n = src.rows / group;
        let mut out = vec![0.0; n * src.cols];
        for r in 0..src.rows {
            let dst = &mut out[(r / group) * src.cols..(r / group + 1) * src.cols];
            for (d, s) in dst.iter_mut().zip(src.row(r)) {
                *d += s;
            }
        }
        let value = Mat::new(n, src.cols, out);
        let seg = self.seg_of(&[a.0]);
        self.push(value, Op::SumRowGroups(a.0, group), seg, "sum_row_groups")
    }

    /// Inclusive running sum along each row.
    pub fn cumsum_cols(&mut self, a: Var) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        let mut out = src.data.clone();
        for row in out.chunks_mut(src.cols.max(1)) {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                acc += *v;
                *v = acc;
            }
        }
        let value = Mat::new(src.rows, src.cols, out);
        let seg = self.seg_of(&[a.0]);
        self.push(value, Op::CumSumCols(a.0), seg, "cumsum_cols")
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        if rows * cols != src.len() {
            return Err(DiffError::Shape(format!(
                "reshape {}x{} -> {}x{}",
                src.rows, src.cols, rows, cols
            )));
        }
        let value = Mat::new(rows, cols, src.data.clone());
        let seg = self.seg_of(&[a.0]);
        self.push(value, Op::Reshape(a.0), seg, "reshape")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = self.nodes[parts[0].0].value.rows;
        if parts.iter().any(|p| self.nodes[p.0].value.rows != rows) {
            return Err(DiffError::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let seg = self.seg_of(&idx);
        self.push(
            Mat::new(rows, cols, out),
            Op::ConcatCols(idx),
            seg,
            "concat_cols",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        if start + len > src.cols {
            return Err(DiffError::Shape(format!(
                "slice_cols {}..{} of {} columns",
                start,
                start + len,
                src.cols
            )));
        }
        let mut out = Vec::with_capacity(src.rows * len);
        for r in 0..src.rows {
            out.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let value = Mat::new(src.rows, len, out);
        let seg = self.seg_of(&[a.0]);
        self.push(value, Op::SliceCols(a.0, start), seg, "slice_cols")
    }

    /// Weighted row gather (e.g. bilinear texture lookups).
    pub fn gather_rows(&mut self, src: Var, taps: Arc<SparseRows>) -> Result<Var, DiffError> {
        let s = &self.nodes[src.0].value;
        let cols = s.cols;
        let mut out = vec![0.0; taps.rows.len() * cols];
        for (r, row_taps) in taps.rows.iter().enumerate() {
            let dst = &mut out[r * cols..(r + 1) * cols];
            for &(i, w) in row_taps {
                let i = i as usize;
                if i >= s.rows {
                    return Err(DiffError::Shape(format!(
                        "gather index {} out of {} rows",
                        i, s.rows
                    )));
                }
                for (d, v) in dst.iter_mut().zip(s.row(i)) {
                    *d += w * v;
                }
            }
        }
        let value = Mat::new(taps.rows.len(), cols, out);
        let seg = self.seg_of(&[src.0]);
        self.push(value, Op::Gather(src.0, taps), seg, "gather_rows")
    }

    /// Reverse sweep from `out` seeded with `seed`; returns the gradient with
    /// respect to every parameter (zeros for untouched segments).
    pub fn backward(&self, out: Var, seed: &Mat) -> Result<Vec<f64>, DiffError> {
        let outv = &self.nodes[out.0].value;
        if seed.rows != outv.rows || seed.cols != outv.cols {
            return Err(DiffError::Shape(format!(
                "seed {}x{} does not match output {}x{}",
                seed.rows, seed.cols, outv.rows, outv.cols
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        adj[out.0] = Some(seed.data.clone());

        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let range = self.params.layout().segment(*id).range();
                    for (d, v) in grad[range].iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wseg = self.params.layout().segment(*w);
                    let (n, k, m) = (xv.rows, wseg.cols, wseg.rows);
                    let wv = self.params.segment(*w);
                    if let Some(b) = b {
                        let range = self.params.layout().segment(*b).range();
                        let gb = &mut grad[range];
                        for row in g.chunks(m) {
                            for (d, v) in gb.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    if n > 0 && k > 0 && m > 0 {
                        let wrange = wseg.range();
                        // SAFETY: g is n*m, x is n*k, W grad slice is m*k.
                        unsafe {
                            matrixmultiply::dgemm(
                                m,
                                n,
                                k,
                                1.0,
                                g.as_ptr(),
                                1,
                                m as isize,
                                xv.data.as_ptr(),
                                k as isize,
                                1,
                                1.0,
                                grad[wrange].as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                        let mut dx = vec![0.0; n * k];
                        // SAFETY: g is n*m, W is m*k, dx is n*k.
                        unsafe {
                            matrixmultiply::dgemm(
                                n,
                                m,
                                k,
                                1.0,
                                g.as_ptr(),
                                m as isize,
                                1,
                                wv.as_ptr(),
                                k as isize,
                                1,
                                0.0,
                                dx.as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::Unary(u, a) => {
                    let xv = &self.nodes[*a].value.data;
                    let yv = &node.value.data;
                    let d = g
                        .iter()
                        .zip(xv.iter().zip(yv))
                        .map(|(g, (&x, &y))| g * u.derivative(x, y))
                        .collect();
                    accumulate(&mut adj, *a, d);
                }
                Op::Binary(op, a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let mut da = vec![0.0; va.len()];
                    let mut db = vec![0.0; vb.len()];
                    let (rows, cols) = (node.value.rows, node.value.cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = g[r * cols + c];
                            let (ia, ib) = (bidx(va, r, c), bidx(vb, r, c));
                            let (x, y) = (va.data[ia], vb.data[ib]);
                            match op {
                                Binary::Add => {
                                    da[ia] += gv;
                                    db[ib] += gv;
                                }
                                Binary::Sub => {
                                    da[ia] += gv;
                                    db[ib] -= gv;
                                }
                                Binary::Mul => {
                                    da[ia] += gv * y;
                                    db[ib] += gv * x;
                                }
                                Binary::Div => {
                                    da[ia] += gv / y;
                                    db[ib] -= gv * x / (y * y);
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(a, k) => {
                    accumulate(&mut adj, *a, g.iter().map(|v| v * k).collect());
                }
                Op::SumAll(a) => {
                    let n = self.nodes[*a].value.len();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::SumCols(a) => {
                    let src = &self.nodes[*a].value;
                    let mut d = Vec::with_capacity(src.len());
                    for gv in &g {
                        d.extend(std::iter::repeat_n(*gv, src.cols));
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::SumRowGroups(a, group) => {
                    let src = &self.nodes[*a].value;
                    let cols = src.cols;
                    let mut d = Vec::with_capacity(src.len());
                    for r in 0..src.rows {
                        let q = r / group;
                        d.extend_from_slice(&g[q * cols..(q + 1) * cols]);
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::CumSumCols(a) => {
                    let cols = node.value.cols.max(1);
                    let mut d = g.clone();
                    for row in d.chunks_mut(cols) {
                        let mut acc = 0.0;
                        for v in row.iter_mut().rev() {
                            acc += *v;
                            *v = acc;
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Reshape(a) => accumulate(&mut adj, *a, g),
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows;
                    let total = node.value.cols;
                    let mut start = 0;
                    for &p in parts {
                        let pc = self.nodes[p].value.cols;
                        let mut d = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + start..r * total + start + pc]);
                        }
                        accumulate(&mut adj, p, d);
                        start += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = &self.nodes[*a].value;
                    let len = node.value.cols;
                    let mut d = vec![0.0; src.len()];
                    for r in 0..src.rows {
                        d[r * src.cols + start..r * src.cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Gather(src, taps) => {
                    let s = &self.nodes[*src].value;
                    let cols = s.cols;
                    let mut d = vec![0.0; s.len()];
                    for (r, row_taps) in taps.rows.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        for &(i, w) in row_taps {
                            let dst = &mut d[i as usize * cols..(i as usize + 1) * cols];
                            for (dd, gv) in dst.iter_mut().zip(gr) {
                                *dd += w * gv;
                            }
                        }
                    }
                    accumulate(&mut adj, *src, d);
                }
            }
        }

        if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
            let layout = self.params.layout();
            return Err(DiffError::NonFinite {
                primitive: "backward",
                segment: layout.segment_of(bad).map(|s| layout.segment(s).name.clone()),
                index: bad,
            });
        }
        Ok(grad)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], i: usize, d: Vec<f64>) {
    match &mut adj[i] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(d) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(d),
    }
}
