//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward sweep. Parents always precede children, so the
//! backward pass is a single reverse scan. Leaf gradients accumulate (`+=`)
//! across `backward` calls until `zero_grad`.

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Transpose(Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, rows: Vec<usize> },
    GatherElems { src: Var, index: Vec<usize> },
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<f64> },
    Sum(Var),
    Reset { v: Var, theta_row: Var, theta_col: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Single-owner record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `c = op(a) @ op(b)` (+ `c` when `accumulate`), where `a` is logically
/// `m×k` and `b` is `k×n`; `a_t` / `b_t` mean the buffer stores the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const SQRT_2_OVER_PI_INV: f64 = 0.398_942_280_401_432_7; // 1/sqrt(2π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    cdf + x * SQRT_2_OVER_PI_INV * (-0.5 * x * x).exp()
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(op, format!("expected a matrix, got {other:?}"))),
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf. Its gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.leaf_raw(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// A leaf whose gradient is always tracked, whatever `t` says.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf_raw(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf_raw(t.shape().to_vec(), t.data().to_vec(), false)
    }

    fn leaf_raw(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes keep valid shapes")
    }

    pub fn is_finite(&self, v: Var) -> bool {
        self.nodes[v.0].value.iter().all(|x| x.is_finite())
    }

    /// Accumulated gradient of a leaf recorded with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.fill(0.0);
            }
        }
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, s) = dims2(self.shape(a), "matmul")?;
        let (s2, t) = dims2(self.shape(b), "matmul")?;
        if s != s2 {
            return Err(shape_err("matmul", format!("[{r},{s}] @ [{s2},{t}]")));
        }
        let mut out = vec![0.0; r * t];
        gemm(r, s, t, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.push(vec![r, t], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a @ bᵀ` for `a: [r,s]`, `b: [t,s]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, s) = dims2(self.shape(a), "matmul_nt")?;
        let (t, s2) = dims2(self.shape(b), "matmul_nt")?;
        if s != s2 {
            return Err(shape_err("matmul_nt", format!("[{r},{s}] @ [{t},{s2}]ᵀ")));
        }
        let mut out = vec![0.0; r * t];
        gemm(r, s, t, self.value(a), false, self.value(b), true, &mut out, false);
        Ok(self.push(vec![r, t], out, Op::MatMulNT(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c), &[a])
    }

    /// Adds a length-`c` bias to every row of `a: [r,c]`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "add_row_bias")?;
        if self.value(bias).len() != c {
            return Err(shape_err(
                "add_row_bias",
                format!("bias {:?} for rows of width {c}", self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(vec![r, c], out, Op::AddRowBias(a, bias), &[a, bias]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(shape_err(
                "slice_cols",
                format!("columns {start}..{} of {c}", start + width),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        debug_assert_eq!(out.len(), r * width);
        Ok(self.push(vec![r, width], out, Op::SliceCols { src: a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let (r, _) = dims2(self.shape(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.shape(p), "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", format!("{pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Embedding lookup: row `rows[t]` of `table` becomes output row `t`.
    /// Backward scatter-adds, so duplicated indices accumulate.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.shape(table), "gather_rows")?;
        if rows.is_empty() {
            return Err(shape_err("gather_rows", "empty index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let src = self.value(table);
        let out: Vec<f64> = rows
            .iter()
            .flat_map(|&i| src[i * c..(i + 1) * c].iter().copied())
            .collect();
        Ok(self.push(
            vec![rows.len(), c],
            out,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    /// `out.flat[t] = src.flat[index[t]]`, reshaped to `shape`.
    pub fn gather_elems(&mut self, src: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        let len = self.value(src).len();
        if shape.iter().product::<usize>() != index.len() || index.is_empty() {
            return Err(shape_err(
                "gather_elems",
                format!("{} indices for shape {shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return Err(shape_err("gather_elems", format!("element {bad} of {len}")));
        }
        let s = self.value(src);
        let out = index.iter().map(|&i| s[i]).collect();
        Ok(self.push(
            shape.to_vec(),
            out,
            Op::GatherElems {
                src,
                index: index.to_vec(),
            },
            &[src],
        ))
    }

    /// Row-wise softmax. `mask[i*c+j] == false` excludes entry `(i,j)`, which
    /// then comes out exactly 0. A row with nothing left is an error.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(shape_err("softmax_rows", format!("mask of {} for [{r},{c}]", m.len())));
            }
        }
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let row = &x[i * c..(i + 1) * c];
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Input(format!(
                    "softmax row {i} is fully masked: no valid attention target"
                )));
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for j in (0..c).filter(|&j| keep(j)) {
                o[j] = (row[j] - max).exp();
                total += o[j];
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(vec![r, c], out, Op::SoftmaxRows(a), &[a]))
    }

    /// Per-row layer normalization with learnable `gain` and `bias` of width `c`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "layer_norm")?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", format!("gain/bias must have width {c}")));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            vec![r, c],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Gelu(a), &[a])
    }

    /// Mean cross-entropy of `logits: [r,c]` over `(row, class)` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = dims2(self.shape(logits), "cross_entropy")?;
        if targets.is_empty() {
            return Err(Error::Input("cross_entropy needs at least one target".into()));
        }
        if let Some(&(row, class)) = targets.iter().find(|&&(row, class)| row >= r || class >= c) {
            return Err(shape_err(
                "cross_entropy",
                format!("target ({row},{class}) outside [{r},{c}]"),
            ));
        }
        let x = self.value(logits);
        let mut probs = Vec::with_capacity(targets.len() * c);
        let mut loss = 0.0;
        for &(row, class) in targets {
            let z = &x[row * c..(row + 1) * c];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + total.ln();
            loss += log_norm - z[class];
            probs.extend(z.iter().map(|v| (v - log_norm).exp()));
        }
        loss /= targets.len() as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Overwrites row 0 with `theta_row` and the rest of column 0 with
    /// `theta_col`; every other entry passes through untouched.
    pub fn reset_first(&mut self, v: Var, theta_row: Var, theta_col: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(v), "reset")?;
        if r < 2 || c < 2 {
            return Err(Error::Input(format!(
                "reset needs at least a 2x2 matrix, got [{r},{c}]"
            )));
        }
        if self.value(theta_row).len() != 1 || self.value(theta_col).len() != 1 {
            return Err(shape_err("reset", "theta parameters must be scalars"));
        }
        let t1 = self.value(theta_row)[0];
        let t2 = self.value(theta_col)[0];
        let mut out = self.value(v).to_vec();
        out[..c].fill(t1);
        for i in 1..r {
            out[i * c] = t2;
        }
        Ok(self.push(
            vec![r, c],
            out,
            Op::Reset {
                v,
                theta_row,
                theta_col,
            },
            &[v, theta_row, theta_col],
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d(root)/d(leaf) into every gradient-tracking leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar root of shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(acc) = &mut self.nodes[idx].grad {
                    for (a, d) in acc.iter_mut().zip(&g) {
                        *a += d;
                    }
                }
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, s) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let t = nodes[b.0].shape[1];
                if wants(*a) {
                    // dA = dC Bᵀ
                    gemm(r, t, s, g, false, &nodes[b.0].value, true, slot(adj, nodes, *a), true);
                }
                if wants(*b) {
                    // dB = Aᵀ dC
                    gemm(s, r, t, &nodes[a.0].value, true, g, false, slot(adj, nodes, *b), true);
                }
            }
            Op::MatMulNT(a, b) => {
                let (r, s) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let t = nodes[b.0].shape[0];
                if wants(*a) {
                    // dA = dC B
                    gemm(r, t, s, g, false, &nodes[b.0].value, false, slot(adj, nodes, *a), true);
                }
                if wants(*b) {
                    // dB = dCᵀ A
                    gemm(t, r, s, g, true, &nodes[a.0].value, false, slot(adj, nodes, *b), true);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        axpy(slot(adj, nodes, v), g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        axpy(slot(adj, nodes, v), g, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = &nodes[b.0].value;
                    for ((s, d), o) in slot(adj, nodes, *a).iter_mut().zip(g).zip(other) {
                        *s += d * o;
                    }
                }
                if wants(*b) {
                    let other = &nodes[a.0].value;
                    for ((s, d), o) in slot(adj, nodes, *b).iter_mut().zip(g).zip(other) {
                        *s += d * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    axpy(slot(adj, nodes, *a), g, *c);
                }
            }
            Op::AddRowBias(a, bias) => {
                if wants(*a) {
                    axpy(slot(adj, nodes, *a), g, 1.0);
                }
                if wants(*bias) {
                    let s = slot(adj, nodes, *bias);
                    let c = s.len();
                    for row in g.chunks(c) {
                        axpy(s, row, 1.0);
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let s = slot(adj, nodes, *a);
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SliceCols { src, start } => {
                if wants(*src) {
                    let c = nodes[src.0].shape[1];
                    let w = node.shape[1];
                    let s = slot(adj, nodes, *src);
                    for (i, row) in g.chunks(w).enumerate() {
                        axpy(&mut s[i * c + start..i * c + start + w], row, 1.0);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    if wants(p) {
                        let s = slot(adj, nodes, p);
                        for (i, row) in g.chunks(total).enumerate() {
                            axpy(&mut s[i * w..(i + 1) * w], &row[offset..offset + w], 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, rows } => {
                if wants(*table) {
                    let c = nodes[table.0].shape[1];
                    let s = slot(adj, nodes, *table);
                    for (t, &i) in rows.iter().enumerate() {
                        axpy(&mut s[i * c..(i + 1) * c], &g[t * c..(t + 1) * c], 1.0);
                    }
                }
            }
            Op::GatherElems { src, index } => {
                if wants(*src) {
                    let s = slot(adj, nodes, *src);
                    for (&i, d) in index.iter().zip(g) {
                        s[i] += d;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let c = node.shape[1];
                    let y = &node.value;
                    let s = slot(adj, nodes, *a);
                    for i in 0..node.shape[0] {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            s[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                if wants(*gain) {
                    let s = slot(adj, nodes, *gain);
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if wants(*bias) {
                    let s = slot(adj, nodes, *bias);
                    for row in g.chunks(c) {
                        axpy(s, row, 1.0);
                    }
                }
                if wants(*x) {
                    let gv = &nodes[gain.0].value;
                    let s = slot(adj, nodes, *x);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let xh = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            s[i * c + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let x = &nodes[a.0].value;
                    for ((s, d), &xv) in slot(adj, nodes, *a).iter_mut().zip(g).zip(x) {
                        *s += d * gelu_grad(xv);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let c = nodes[logits.0].shape[1];
                    let scale = g[0] / targets.len() as f64;
                    let s = slot(adj, nodes, *logits);
                    for (t, &(row, class)) in targets.iter().enumerate() {
                        let p = &probs[t * c..(t + 1) * c];
                        let out = &mut s[row * c..(row + 1) * c];
                        for j in 0..c {
                            out[j] += scale * p[j];
                        }
                        out[class] -= scale;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    for s in slot(adj, nodes, *a).iter_mut() {
                        *s += g[0];
                    }
                }
            }
            Op::Reset {
                v,
                theta_row,
                theta_col,
            } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                if wants(*v) {
                    let s = slot(adj, nodes, *v);
                    for i in 1..r {
                        for j in 1..c {
                            s[i * c + j] += g[i * c + j];
                        }
                    }
                }
                if wants(*theta_row) {
                    slot(adj, nodes, *theta_row)[0] += g[..c].iter().sum::<f64>();
                }
                if wants(*theta_col) {
                    slot(adj, nodes, *theta_col)[0] += (1..r).map(|i| g[i * c]).sum::<f64>();
                }
            }
        }
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
}

fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (s, v) in acc.iter_mut().zip(x) {
        *s += a * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(&mat(&[&[0.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_identity() {
        let m = Tensor::from_fn(&[3, 3], |t| t as f64 * 0.5 - 1.0);
        let mut tape = Tape::new();
        let i = tape.leaf(&Tensor::eye(3));
        let mv = tape.leaf(&m);
        let out = tape.matmul(i, mv).unwrap();
        assert_eq!(tape.value(out), m.data());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        assert!(tape.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn softmax_basic_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, -1000.0]]));
        let y = tape.softmax_rows(x, None).unwrap();
        let v = tape.value(y);
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v[3], 1.0);
        assert!(v[4] < 1e-300 && v[4] >= 0.0);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmax_masked_entries_are_zero_and_full_mask_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]));
        let mask = [true, false, true, false, false, false];
        assert!(matches!(tape.softmax_rows(x, Some(&mask)), Err(Error::Input(_))));
        let mask = [true, false, true, false, false, true];
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        let v = tape.value(y);
        assert_eq!(v[1], 0.0);
        assert_eq!(&v[3..], &[0.0, 0.0, 1.0]);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::zeros(&[2, 2]).with_grad());
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gives_ones_and_double_backward_doubles() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::from_fn(&[2, 3], |t| t as f64).with_grad());
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0; 6]);
        tape.zero_grad();
        assert_eq!(tape.grad(w).unwrap(), &[0.0; 6]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_fn(&[3, 4], |t| (t as f64 * 0.37).sin()).with_grad());
        let y = tape.softmax_rows(x, None).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn gather_rows_scatter_adds_duplicates() {
        let mut tape = Tape::new();
        let table = tape.leaf(&Tensor::zeros(&[4, 2]).with_grad());
        let g = tape.gather_rows(table, &[1, 3, 1, 1]).unwrap();
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 3.0, 3.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn reset_overwrites_first_row_and_column() {
        let mut tape = Tape::new();
        let v = tape.leaf(&Tensor::zeros(&[3, 3]));
        let t1 = tape.leaf(&Tensor::scalar(5.0));
        let t2 = tape.leaf(&Tensor::scalar(7.0));
        let out = tape.reset_first(v, t1, t2).unwrap();
        assert_eq!(tape.value(out), &[5.0, 5.0, 5.0, 7.0, 0.0, 0.0, 7.0, 0.0, 0.0]);
        let tiny = tape.leaf(&Tensor::zeros(&[1, 1]));
        assert!(tape.reset_first(tiny, t1, t2).is_err());
    }

    #[test]
    fn cross_entropy_rejects_empty_targets() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 3]));
        assert!(tape.cross_entropy(x, &[]).is_err());
        let l = tape.cross_entropy(x, &[(0, 1), (1, 2)]).unwrap();
        assert!((tape.value(l)[0] - 3f64.ln()).abs() < 1e-15);
    }
}
