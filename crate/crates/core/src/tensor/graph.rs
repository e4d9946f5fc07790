use std::collections::HashMap;

use rand::Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{BmgfError, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Primitive kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    MulCol,
    Scale,
    Relu,
    Sigmoid,
    Maximum,
    Softmax,
    LayerNorm,
    ConcatCols,
    ConcatRows,
    SliceRows,
    SliceCols,
    GatherRows,
    Reshape,
    MaxAxis,
    MultiCos,
    PairwiseCos,
    NormalizeRows,
    Unfold,
    SumAll,
    CrossEntropy,
    MaskApply,
    GateMix,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<OpKind> {
        use OpKind::*;
        let all = [
            Input, Param, MatMul, Transpose, Add, Sub, Mul, AddRow, MulCol, Scale, Relu, Sigmoid,
            Maximum, Softmax, LayerNorm, ConcatCols, ConcatRows, SliceRows, SliceCols, GatherRows,
            Reshape, MaxAxis, MultiCos, PairwiseCos, NormalizeRows, Unfold, SumAll, CrossEntropy,
            MaskApply, GateMix,
        ];
        all.into_iter().find(|k| format!("{k:?}").eq_ignore_ascii_case(name))
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Maximum(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    MaxAxis { x: Var, src: Vec<usize> },
    MultiCos { a: Var, b: Var, w: Var },
    PairwiseCos { a: Var, b: Var },
    NormalizeRows { x: Var, denom: Vec<Option<f64>>, valid: Vec<bool> },
    Unfold { x: Var, k: usize },
    SumAll(Var),
    CrossEntropy { logits: Var, target: Vec<f64>, probs: Vec<f64> },
    MaskApply { x: Var, mask: Vec<f64> },
    GateMix { x: Var, y: Var, gate: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulCol(..) => OpKind::MulCol,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Maximum(..) => OpKind::Maximum,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Reshape(_) => OpKind::Reshape,
            Op::MaxAxis { .. } => OpKind::MaxAxis,
            Op::MultiCos { .. } => OpKind::MultiCos,
            Op::PairwiseCos { .. } => OpKind::PairwiseCos,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::Unfold { .. } => OpKind::Unfold,
            Op::SumAll(_) => OpKind::SumAll,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::MaskApply { .. } => OpKind::MaskApply,
            Op::GateMix { .. } => OpKind::GateMix,
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    /// Empty for parameter nodes, whose values live in the store.
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<Option<Vec<f64>>>,
    inputs: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to an input created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.inputs.get(&v).map(Vec::as_slice)
    }
}

/// Records primitive operations in topological order and replays them
/// backwards. Parameter values are read from the borrowed store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        _ => Err(BmgfError::dim(op, format!("expected a matrix, got shape {shape:?}"))),
    }
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        0.0
    } else {
        uv / (uu.sqrt() * vv.sqrt())
    }
}

/// Accumulates d(cos(u, v))/du and /dv scaled by `g` into `du`, `dv`.
fn cosine_backward(u: &[f64], v: &[f64], g: f64, du: &mut [f64], dv: &mut [f64]) {
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return;
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    let cos = uv / (nu * nv);
    let inv = 1.0 / (nu * nv);
    for t in 0..u.len() {
        du[t] += g * (v[t] * inv - cos * u[t] / uu);
        dv[t] += g * (u[t] * inv - cos * v[t] / vv);
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::new(), fault: None }
    }

    /// Test fixture: every backward rule of `kind` is deliberately scaled wrong.
    pub fn with_fault(mut self, kind: Option<OpKind>) -> Self {
        self.fault = kind;
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            data.iter().all(|x| x.is_finite()),
            "non-finite output from {:?}",
            op.kind()
        );
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        node_value(&self.nodes, self.params, v)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("valid node")
    }

    /// Number of rows of a 2-D node (1 for vectors).
    pub fn rows(&self, v: Var) -> usize {
        dims2("rows", self.shape(v)).map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self, v: Var) -> usize {
        *self.shape(v).last().unwrap()
    }

    pub fn input(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.input(t, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.tensor(id);
        let rg = t.requires_grad();
        self.push(t.shape().to_vec(), Vec::new(), Op::Param(id), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(BmgfError::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(a))?;
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(BmgfError::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rec, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    /// Adds a length-`n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = dims2("add_row", self.shape(x))?;
        if self.value(row).len() != n {
            return Err(BmgfError::dim("add_row", format!("{:?} + row {:?}", self.shape(x), self.shape(row))));
        }
        let b = self.value(row);
        let xv = self.value(x);
        let out: Vec<f64> = (0..m * n).map(|i| xv[i] + b[i % n]).collect();
        let rg = self.rg(&[x, row]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, row), rg))
    }

    /// Scales row `i` of an `m x n` matrix by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = dims2("mul_col", self.shape(x))?;
        if self.value(col).len() != m {
            return Err(BmgfError::dim("mul_col", format!("{:?} * col {:?}", self.shape(x), self.shape(col))));
        }
        let c = self.value(col);
        let xv = self.value(x);
        let out: Vec<f64> = (0..m * n).map(|i| xv[i] * c[i / n]).collect();
        let rg = self.rg(&[x, col]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulCol(x, col), rg))
    }

    /// Row-gated convex mix `gate[i] * y + (1 - gate[i]) * x` of two equally
    /// shaped `m x n` matrices. Results are clamped to the interval spanned
    /// by the two mixands so rounding never leaves it.
    pub fn gate_mix(&mut self, x: Var, y: Var, gate: Var) -> Result<Var> {
        let (m, n) = dims2("gate_mix", self.shape(x))?;
        if self.shape(y) != self.shape(x) || self.value(gate).len() != m {
            return Err(BmgfError::dim(
                "gate_mix",
                format!("{:?} / {:?} with gate {:?}", self.shape(x), self.shape(y), self.shape(gate)),
            ));
        }
        let (xv, yv, a) = (self.value(x), self.value(y), self.value(gate));
        let out = (0..m * n)
            .map(|i| {
                let (lo, hi) = if xv[i] <= yv[i] { (xv[i], yv[i]) } else { (yv[i], xv[i]) };
                let ai = a[i / n];
                (ai * yv[i] + (1.0 - ai) * xv[i]).clamp(lo, hi)
            })
            .collect();
        let rg = self.rg(&[x, y, gate]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::GateMix { x, y, gate }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg)
    }

    /// Row-wise softmax. `valid` masks columns (keys); masked entries get
    /// exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let (m, n) = dims2("softmax", self.shape(x))?;
        if let Some(mask) = valid {
            if mask.len() != n {
                return Err(BmgfError::dim("softmax", format!("mask of {} for {n} columns", mask.len())));
            }
            if !mask.iter().any(|&b| b) {
                return Err(BmgfError::Contract("softmax over an empty valid set".into()));
            }
        }
        let ok = |j: usize| valid.map_or(true, |mk| mk[j]);
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mx = (0..n).filter(|&j| ok(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in (0..n).filter(|&j| ok(j)) {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = dims2("layer_norm", self.shape(x))?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(BmgfError::dim("layer_norm", format!("gain/bias length must be {n}")));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(BmgfError::dim("concat_cols", "no inputs"));
        }
        let m = dims2("concat_cols", self.shape(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat_cols", self.shape(p))?;
            if r != m {
                return Err(BmgfError::dim("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(BmgfError::dim("concat_rows", "no inputs"));
        }
        let n = dims2("concat_rows", self.shape(parts[0]))?.1;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.shape(p))?;
            if c != n {
                return Err(BmgfError::dim("concat_rows", format!("column counts {n} vs {c}")));
            }
            m += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_rows", self.shape(x))?;
        if len == 0 || start + len > m {
            return Err(BmgfError::dim("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, n], out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_cols", self.shape(x))?;
        if len == 0 || start + len > n {
            return Err(BmgfError::dim("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, rg))
    }

    /// Row lookup (embedding tables, broadcasting a row, argmax selection).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims2("gather_rows", self.shape(x))?;
        if idx.is_empty() {
            return Err(BmgfError::dim("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(BmgfError::dim("gather_rows", format!("row {bad} out of {m}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![idx.len(), n], out, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(BmgfError::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Maximum over `axis` (0 or 1) of an `[a, b, c]` tensor, restricted to
    /// positions where `valid` is true. Ties pick the smallest index.
    pub fn max_axis(&mut self, x: Var, axis: usize, valid: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [a, b, c] = shape[..] else {
            return Err(BmgfError::dim("max_axis", format!("expected 3-D input, got {shape:?}")));
        };
        let (reduced, kept) = match axis {
            0 => (a, b),
            1 => (b, a),
            _ => return Err(BmgfError::dim("max_axis", format!("axis {axis} not supported"))),
        };
        if let Some(mask) = valid {
            if mask.len() != reduced {
                return Err(BmgfError::dim("max_axis", format!("mask of {} for extent {reduced}", mask.len())));
            }
        }
        let ok = |r: usize| valid.map_or(true, |mk| mk[r]);
        if !(0..reduced).any(ok) {
            return Err(BmgfError::Contract("max over an empty valid set".into()));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; kept * c];
        let mut src = vec![0; kept * c];
        for k in 0..kept {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut arg = usize::MAX;
                for r in (0..reduced).filter(|&r| ok(r)) {
                    let flat = if axis == 0 { (r * b + k) * c + ch } else { (k * b + r) * c + ch };
                    if xv[flat] > best || arg == usize::MAX {
                        best = xv[flat];
                        arg = flat;
                    }
                }
                out[k * c + ch] = best;
                src[k * c + ch] = arg;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![kept, c], out, Op::MaxAxis { x, src }, rg))
    }

    /// Row-aligned multi-perspective cosine: `out[r, k] = cos(w_k * a_r, w_k * b_r)`.
    pub fn multi_cos(&mut self, a: Var, b: Var, w: Var) -> Result<Var> {
        let (n, d) = dims2("multi_cos", self.shape(a))?;
        let (n2, d2) = dims2("multi_cos", self.shape(b))?;
        let (l, d3) = dims2("multi_cos", self.shape(w))?;
        if n != n2 || d != d2 || d != d3 {
            return Err(BmgfError::dim(
                "multi_cos",
                format!("a {:?}, b {:?}, w {:?}", self.shape(a), self.shape(b), self.shape(w)),
            ));
        }
        let (av, bv, wv) = (self.value(a), self.value(b), self.value(w));
        let mut out = vec![0.0; n * l];
        let mut u = vec![0.0; d];
        let mut v = vec![0.0; d];
        for r in 0..n {
            for k in 0..l {
                let wk = &wv[k * d..(k + 1) * d];
                for t in 0..d {
                    u[t] = wk[t] * av[r * d + t];
                    v[t] = wk[t] * bv[r * d + t];
                }
                out[r * l + k] = cosine(&u, &v);
            }
        }
        let rg = self.rg(&[a, b, w]);
        Ok(self.push(vec![n, l], out, Op::MultiCos { a, b, w }, rg))
    }

    /// All-pairs plain cosine: `out[i, j] = cos(a_i, b_j)`.
    pub fn pairwise_cos(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n1, d) = dims2("pairwise_cos", self.shape(a))?;
        let (n2, d2) = dims2("pairwise_cos", self.shape(b))?;
        if d != d2 {
            return Err(BmgfError::dim("pairwise_cos", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n1 * n2];
        for i in 0..n1 {
            for j in 0..n2 {
                out[i * n2 + j] = cosine(&av[i * d..(i + 1) * d], &bv[j * d..(j + 1) * d]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![n1, n2], out, Op::PairwiseCos { a, b }, rg))
    }

    /// Divides each row by its sum over valid columns. Rows whose sum has
    /// magnitude below `eps` become the uniform distribution over valid columns.
    pub fn normalize_rows(&mut self, x: Var, valid: Option<&[bool]>, eps: f64) -> Result<Var> {
        let (m, n) = dims2("normalize_rows", self.shape(x))?;
        if let Some(mask) = valid {
            if mask.len() != n {
                return Err(BmgfError::dim("normalize_rows", format!("mask of {} for {n} columns", mask.len())));
            }
        }
        let ok = |j: usize| valid.map_or(true, |mk| mk[j]);
        let count = (0..n).filter(|&j| ok(j)).count();
        if count == 0 {
            return Err(BmgfError::Contract("normalization over an empty valid set".into()));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        let mut denom = Vec::with_capacity(m);
        for i in 0..m {
            let s: f64 = (0..n).filter(|&j| ok(j)).map(|j| xv[i * n + j]).sum();
            if s.abs() < eps {
                for j in (0..n).filter(|&j| ok(j)) {
                    out[i * n + j] = 1.0 / count as f64;
                }
                denom.push(None);
            } else {
                for j in (0..n).filter(|&j| ok(j)) {
                    out[i * n + j] = xv[i * n + j] / s;
                }
                denom.push(Some(s));
            }
        }
        let valid = (0..n).map(ok).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![m, n], out, Op::NormalizeRows { x, denom, valid }, rg))
    }

    /// Sliding windows of `k` consecutive rows, flattened: `[L, C] -> [L-k+1, k*C]`.
    pub fn unfold(&mut self, x: Var, k: usize) -> Result<Var> {
        let (l, c) = dims2("unfold", self.shape(x))?;
        if k == 0 || k > l {
            return Err(BmgfError::dim("unfold", format!("window {k} over {l} rows")));
        }
        let windows = l - k + 1;
        let out = self.value(x)[..].windows(k * c).step_by(c).take(windows).flatten().copied().collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![windows, k * c], out, Op::Unfold { x, k }, rg))
    }

    /// 1-D convolution (stride 1, no padding) over the rows of `x` with a
    /// `[k * C, filters]` kernel and a bias of length `filters`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, k: usize) -> Result<Var> {
        let cols = self.unfold(x, k)?;
        let y = self.matmul(cols, kernel)?;
        self.add_row(y, bias)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Cross-entropy of `softmax(logits)` against a target distribution.
    pub fn cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != target.len() {
            return Err(BmgfError::dim("cross_entropy", format!("{} logits vs {} targets", z.len(), target.len())));
        }
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let loss: f64 = target.iter().zip(z).filter(|(t, _)| **t != 0.0).map(|(t, v)| -t * (v - lse)).sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, target: target.to_vec(), probs },
            rg,
        ))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_apply(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(BmgfError::dim("mask_apply", format!("mask of {} for {:?}", mask.len(), self.shape(x))));
        }
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MaskApply { x, mask }, rg))
    }

    /// Zeroes the rows where `keep` is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = dims2("mask_rows", self.shape(x))?;
        if keep.len() != m {
            return Err(BmgfError::dim("mask_rows", format!("mask of {} for {m} rows", keep.len())));
        }
        let mask = (0..m * n).map(|i| if keep[i / n] { 1.0 } else { 0.0 }).collect();
        self.mask_apply(x, mask)
    }

    /// Inverted dropout: surviving units are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(BmgfError::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mask_apply(x, mask)
    }

    /// Replays the tape from `loss` (a single-element node).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(BmgfError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients { params: vec![None; self.params.len()], inputs: HashMap::new() };

        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.25);
            }
            self.backward_node(node, &g, &mut grads, &mut out);
            if matches!(node.op, Op::Input) {
                out.inputs.insert(Var(idx), g);
            }
        }
        Ok(out)
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let nodes = &self.nodes;
        let val = |v: Var| node_value(nodes, self.params, v);
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let len = node_value(nodes, self.params, v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let buf = out.params[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
                for (b, gv) in buf.iter_mut().zip(g) {
                    *b += gv;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2("matmul", &nodes[a.0].shape).unwrap();
                let n = nodes[b.0].shape[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += a_ip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = dims2("transpose", &nodes[a.0].shape).unwrap();
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |dx| add_into(dx, g));
                let n = val(*row).len();
                acc(*row, &mut |dr| {
                    for (i, gv) in g.iter().enumerate() {
                        dr[i % n] += gv;
                    }
                });
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (val(*x), val(*col));
                let n = g.len() / cv.len();
                acc(*x, &mut |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * cv[i / n];
                    }
                });
                acc(*col, &mut |dc| {
                    for i in 0..g.len() {
                        dc[i / n] += g[i] * xv[i];
                    }
                });
            }
            Op::GateMix { x, y, gate } => {
                let (xv, yv, av) = (val(*x), val(*y), val(*gate));
                let n = g.len() / av.len();
                acc(*x, &mut |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * (1.0 - av[i / n]);
                    }
                });
                acc(*y, &mut |dy| {
                    for i in 0..g.len() {
                        dy[i] += g[i] * av[i / n];
                    }
                });
                acc(*gate, &mut |da| {
                    for i in 0..g.len() {
                        da[i / n] += g[i] * (yv[i] - xv[i]);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += s * v)),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.data;
                acc(*x, &mut |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for i in 0..g.len() {
                        if av[i] >= bv[i] {
                            da[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..g.len() {
                        if av[i] < bv[i] {
                            db[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (m, n) = dims2("softmax", &node.shape).unwrap();
                let y = &node.data;
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            dx[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (m, n) = dims2("layer_norm", &node.shape).unwrap();
                let gv = val(*gain);
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dxhat: Vec<f64> = r.clone().map(|t| g[t] * gv[t - i * n]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, t) in r.enumerate() {
                            dx[t] += rstd[i] * (dxhat[j] - mean_d - xhat[t] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for t in 0..m * n {
                        dg[t % n] += g[t] * xhat[t];
                    }
                });
                acc(*bias, &mut |db| {
                    for t in 0..m * n {
                        db[t % n] += g[t];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2("concat_cols", &node.shape).unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape.last().copied().unwrap();
                    acc(p, &mut |dp| {
                        for i in 0..m {
                            for j in 0..w {
                                dp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.shape[1];
                acc(*x, &mut |dx| add_into(&mut dx[start * n..start * n + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let (m, len) = (node.shape[0], node.shape[1]);
                let n = nodes[x.0].shape.last().copied().unwrap();
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        add_into(&mut dx[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let n = node.shape[1];
                acc(*x, &mut |dx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, g)),
            Op::MaxAxis { x, src } => acc(*x, &mut |dx| {
                for (o, &s) in src.iter().enumerate() {
                    dx[s] += g[o];
                }
            }),
            Op::MultiCos { a, b, w } => {
                let (n, d) = dims2("multi_cos", &nodes[a.0].shape).unwrap();
                let l = nodes[w.0].shape[0];
                let (av, bv, wv) = (val(*a), val(*b), val(*w));
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; n * d];
                let mut dw = vec![0.0; l * d];
                let mut u = vec![0.0; d];
                let mut v = vec![0.0; d];
                let mut du = vec![0.0; d];
                let mut dv = vec![0.0; d];
                for r in 0..n {
                    for k in 0..l {
                        let gk = g[r * l + k];
                        if gk == 0.0 {
                            continue;
                        }
                        let wk = &wv[k * d..(k + 1) * d];
                        for t in 0..d {
                            u[t] = wk[t] * av[r * d + t];
                            v[t] = wk[t] * bv[r * d + t];
                        }
                        du.iter_mut().for_each(|x| *x = 0.0);
                        dv.iter_mut().for_each(|x| *x = 0.0);
                        cosine_backward(&u, &v, gk, &mut du, &mut dv);
                        for t in 0..d {
                            da[r * d + t] += wk[t] * du[t];
                            db[r * d + t] += wk[t] * dv[t];
                            dw[k * d + t] += av[r * d + t] * du[t] + bv[r * d + t] * dv[t];
                        }
                    }
                }
                acc(*a, &mut |x| add_into(x, &da));
                acc(*b, &mut |x| add_into(x, &db));
                acc(*w, &mut |x| add_into(x, &dw));
            }
            Op::PairwiseCos { a, b } => {
                let (n1, d) = dims2("pairwise_cos", &nodes[a.0].shape).unwrap();
                let n2 = node.shape[1];
                let (av, bv) = (val(*a), val(*b));
                let mut da = vec![0.0; n1 * d];
                let mut db = vec![0.0; n2 * d];
                for i in 0..n1 {
                    for j in 0..n2 {
                        let gij = g[i * n2 + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let (da_i, db_j) = (i * d..(i + 1) * d, j * d..(j + 1) * d);
                        let mut du = vec![0.0; d];
                        let mut dv = vec![0.0; d];
                        cosine_backward(&av[da_i.clone()], &bv[db_j.clone()], gij, &mut du, &mut dv);
                        add_into(&mut da[da_i], &du);
                        add_into(&mut db[db_j], &dv);
                    }
                }
                acc(*a, &mut |x| add_into(x, &da));
                acc(*b, &mut |x| add_into(x, &db));
            }
            Op::NormalizeRows { x, denom, valid } => {
                let (m, n) = dims2("normalize_rows", &node.shape).unwrap();
                let y = &node.data;
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        let Some(s) = denom[i] else { continue };
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                        for (j, t) in r.enumerate() {
                            if valid[j] {
                                dx[t] += (g[t] - dot) / s;
                            }
                        }
                    }
                });
            }
            Op::Unfold { x, k } => {
                let c = nodes[x.0].shape[1];
                let windows = node.shape[0];
                acc(*x, &mut |dx| {
                    for w in 0..windows {
                        let row = &g[w * k * c..(w + 1) * k * c];
                        add_into(&mut dx[w * c..(w + k) * c], row);
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::CrossEntropy { logits, target, probs } => {
                let mass: f64 = target.iter().sum();
                acc(*logits, &mut |dz| {
                    for k in 0..probs.len() {
                        dz[k] += g[0] * (probs[k] * mass - target[k]);
                    }
                });
            }
            Op::MaskApply { x, mask } => acc(*x, &mut |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] * mask[i];
                }
            }),
        }
    }
}

fn node_value<'a>(nodes: &'a [Node], params: &'a ParamStore, v: Var) -> &'a [f64] {
    match nodes[v.0].op {
        Op::Param(id) => params.tensor(id).data(),
        _ => &nodes[v.0].data,
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry per row over valid columns; ties pick the smallest index.
pub fn argmax_rows(values: &[f64], rows: usize, cols: usize, valid: Option<&[bool]>) -> Vec<usize> {
    (0..rows)
        .map(|i| {
            let mut best = usize::MAX;
            for j in 0..cols {
                if valid.is_some_and(|mk| !mk[j]) {
                    continue;
                }
                if best == usize::MAX || values[i * cols + j] > values[i * cols + best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
