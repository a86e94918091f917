//! Tape-based reverse-mode autodiff over 2-D tensors.
//!
//! A [`Tape`] records one forward graph; [`Tape::backward`] walks it in
//! reverse, accumulating gradients only through nodes that require them.
//! Multiply-accumulate counts from every matmul kernel invocation are kept on
//! the tape so analytic FLOP formulas can be checked against an instrumented
//! forward pass.

use super::rng::Rng;
use super::tensor::{mm_nn, mm_nt, mm_tn, Scalar, Tensor};
use crate::error::{AptError, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E> {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    ScaleConst { a: usize, c: f64 },
    SoftmaxRows { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<E>, rstd: Vec<E> },
    Gelu { a: usize },
    Dropout { a: usize, mask: Vec<bool>, keep_scale: f64 },
    ConcatRows { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    RowScaleMax1 { p: usize, s: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor<E> },
}

struct Node<E> {
    value: Tensor<E>,
    requires_grad: bool,
    op: Op<E>,
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    macs: u64,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), macs: 0 }
    }

    /// Multiply-accumulate operations executed by matmul kernels so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        if k != k2 {
            return Err(AptError::invariant(format!(
                "matmul shape mismatch: {m}x{k} * {k2}x{n}"
            )));
        }
        let mut out = Tensor::zeros(m, n);
        mm_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out);
        self.macs += (m * k * n) as u64;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// a * b^T with b stored row-major [n x k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).shape();
        let (n, k2) = self.value(b).shape();
        if k != k2 {
            return Err(AptError::invariant(format!(
                "matmul_nt shape mismatch: {m}x{k} * ({n}x{k2})^T"
            )));
        }
        let mut out = Tensor::zeros(m, n);
        mm_nt(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out);
        self.macs += (m * k * n) as u64;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, Op::MatMulNT { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AptError::invariant(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.nodes[a.0].value.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o + v;
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Broadcast-add a [1 x c] row onto every row of a.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.value(a).shape();
        if self.value(row).shape() != (1, c) {
            return Err(AptError::invariant(format!(
                "add_row expects [1x{c}], got {:?}",
                self.value(row).shape()
            )));
        }
        let mut out = self.nodes[a.0].value.clone();
        let r = self.nodes[row.0].value.data().to_vec();
        for i in 0..out.rows() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(&r) {
                *o = *o + v;
            }
        }
        let rg = self.requires(a) || self.requires(row);
        Ok(self.push(out, rg, Op::AddRow { a: a.0, row: row.0 }))
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let ce = E::from_f64c(c);
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            *o = *o * ce;
        }
        let rg = self.requires(a);
        Ok(self.push(out, rg, Op::ScaleConst { a: a.0, c }))
    }

    /// Numerically-stable softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if c == 0 {
            return Err(AptError::invariant("softmax over empty rows".to_string()));
        }
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = self.nodes[a.0].value.row(i);
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let orow = out.row_mut(i);
            let mut sum = E::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum = sum + *o;
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(out, rg, Op::SoftmaxRows { a: a.0 }))
    }

    /// Per-row layer norm with population variance and affine (gamma, beta).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).shape();
        if self.value(gamma).shape() != (1, c) || self.value(beta).shape() != (1, c) {
            return Err(AptError::invariant(format!(
                "layer_norm affine must be [1x{c}], got {:?} and {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let epse = E::from_f64c(eps);
        let inv_c = E::from_f64c(1.0 / c as f64);
        let mut out = Tensor::zeros(r, c);
        let mut mean = vec![E::zero(); r];
        let mut rstd = vec![E::zero(); r];
        {
            let xv = &self.nodes[x.0].value;
            let g = self.nodes[gamma.0].value.data().to_vec();
            let b = self.nodes[beta.0].value.data().to_vec();
            for i in 0..r {
                let row = xv.row(i);
                let mut mu = E::zero();
                for &v in row {
                    mu = mu + v;
                }
                mu = mu * inv_c;
                let mut var = E::zero();
                for &v in row {
                    let d = v - mu;
                    var = var + d * d;
                }
                var = var * inv_c;
                let rs = E::one() / (var + epse).sqrt();
                mean[i] = mu;
                rstd[i] = rs;
                let orow = out.row_mut(i);
                for j in 0..c {
                    orow[j] = (row[j] - mu) * rs * g[j] + b[j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean, rstd },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            *o = gelu_val(*o);
        }
        let rg = self.requires(a);
        Ok(self.push(out, rg, Op::Gelu { a: a.0 }))
    }

    /// Inverted dropout. Identity when not training or rate is zero; the mask
    /// consumes one uniform draw per element otherwise.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AptError::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let ks = E::from_f64c(keep_scale);
        let mut out = self.nodes[a.0].value.clone();
        let mut mask = Vec::with_capacity(out.numel());
        for o in out.data_mut() {
            let keep = rng.next_f64() >= rate;
            mask.push(keep);
            *o = if keep { *o * ks } else { E::zero() };
        }
        let rg = self.requires(a);
        Ok(self.push(out, rg, Op::Dropout { a: a.0, mask, keep_scale }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AptError::invariant("concat_rows of zero parts".to_string()));
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != c {
                return Err(AptError::invariant(format!(
                    "concat_rows column mismatch: {} vs {c}",
                    self.value(p).cols()
                )));
            }
            rows += self.value(p).rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(rows, c, data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, rg, Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if start + len > r {
            return Err(AptError::invariant(format!(
                "slice_rows [{start}, {}) out of {r} rows",
                start + len
            )));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_vec(len, c, data)?;
        let rg = self.requires(a);
        Ok(self.push(out, rg, Op::SliceRows { a: a.0, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AptError::invariant("concat_cols of zero parts".to_string()));
        }
        let r = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(AptError::invariant(format!(
                    "concat_cols row mismatch: {} vs {r}",
                    self.value(p).rows()
                )));
            }
            cols += self.value(p).cols();
        }
        let mut out = Tensor::zeros(r, cols);
        for i in 0..r {
            let orow = out.row_mut(i);
            let mut off = 0;
            for &p in parts {
                let prow = &self.nodes[p.0].value;
                let w = prow.cols();
                orow[off..off + w].copy_from_slice(prow.row(i));
                off += w;
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, rg, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if start + len > c {
            return Err(AptError::invariant(format!(
                "slice_cols [{start}, {}) out of {c} cols",
                start + len
            )));
        }
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.row_mut(i)
                .copy_from_slice(&self.nodes[a.0].value.row(i)[start..start + len]);
        }
        let rg = self.requires(a);
        Ok(self.push(out, rg, Op::SliceCols { a: a.0, start }))
    }

    /// Row-wise clamped scaling: out_i = max(s_i, 1) * p_i with s an
    /// [n x 1] column. The subgradient of max(s, 1) at s == 1 is taken as 1.
    pub fn row_scale_max1(&mut self, p: Var, s: Var) -> Result<Var> {
        let (r, _) = self.value(p).shape();
        if self.value(s).shape() != (r, 1) {
            return Err(AptError::invariant(format!(
                "row_scale_max1 expects s as [{r}x1], got {:?}",
                self.value(s).shape()
            )));
        }
        let mut out = self.nodes[p.0].value.clone();
        let one = E::one();
        for i in 0..r {
            let m = self.nodes[s.0].value.at(i, 0).max(one);
            for o in out.row_mut(i) {
                *o = *o * m;
            }
        }
        let rg = self.requires(p) || self.requires(s);
        Ok(self.push(out, rg, Op::RowScaleMax1 { p: p.0, s: s.0 }))
    }

    /// Mean over rows, expressed as a matmul with a constant [1 x n] weight
    /// row so pooling shows up in the instrumented MAC count.
    pub fn mean_pool_rows(&mut self, x: Var) -> Result<Var> {
        let (r, _) = self.value(x).shape();
        if r == 0 {
            return Err(AptError::invariant("mean pool over zero rows".to_string()));
        }
        let w = Tensor::full(1, r, E::from_f64c(1.0 / r as f64));
        let wv = self.constant(w);
        self.matmul(wv, x)
    }

    /// Mean cross-entropy of logits [b x c] against integer labels, computed
    /// via log-softmax with max subtraction. Output is [1 x 1].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).shape();
        if labels.len() != b {
            return Err(AptError::invariant(format!(
                "cross_entropy: {} labels for {b} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(AptError::invariant(format!(
                "cross_entropy: label {bad} out of {c} classes"
            )));
        }
        let mut probs = Tensor::zeros(b, c);
        let mut loss = E::zero();
        for i in 0..b {
            let row = self.nodes[logits.0].value.row(i);
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = E::zero();
            let prow = probs.row_mut(i);
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - mx).exp();
                sum = sum + *p;
            }
            let log_sum = sum.ln();
            for p in prow.iter_mut() {
                *p = *p / sum;
            }
            // -log softmax[y] = log_sum - (x[y] - mx)
            loss = loss + log_sum - (row[labels[i]] - mx);
        }
        loss = loss / E::from_f64c(b as f64);
        let out = Tensor::from_vec(1, 1, vec![loss])?;
        let rg = self.requires(logits);
        Ok(self.push(
            out,
            rg,
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
        ))
    }

    /// Reverse pass from a [1 x 1] loss. Gradients land on every reachable
    /// node with `requires_grad`; earlier gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(AptError::invariant(format!(
                "backward target must be [1x1], got {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![E::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            self.backprop_node(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: usize) -> &mut [E] {
        let n = self.nodes[id].value.numel();
        self.grads[id].get_or_insert_with(|| vec![E::zero(); n])
    }

    fn backprop_node(&mut self, id: usize, g: &[E]) -> Result<()> {
        let (rows, cols) = self.nodes[id].value.shape();
        // The op is moved out and back to keep the borrow checker happy with
        // simultaneous reads of node values and writes to input grads.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let gt = Tensor::from_vec(rows, cols, g.to_vec())?;
                if self.nodes[*a].requires_grad {
                    let bv = self.nodes[*b].value.clone();
                    let (m, k) = self.nodes[*a].value.shape();
                    let mut da = Tensor::zeros(m, k);
                    mm_nt(&gt, &bv, &mut da);
                    self.macs += (m * k * cols) as u64;
                    accumulate(self.ensure_grad(*a), da.data());
                }
                if self.nodes[*b].requires_grad {
                    let av = self.nodes[*a].value.clone();
                    let (k, n) = self.nodes[*b].value.shape();
                    let mut db = Tensor::zeros(k, n);
                    mm_tn(&av, &gt, &mut db);
                    self.macs += (rows * k * n) as u64;
                    accumulate(self.ensure_grad(*b), db.data());
                }
            }
            Op::MatMulNT { a, b } => {
                let gt = Tensor::from_vec(rows, cols, g.to_vec())?;
                if self.nodes[*a].requires_grad {
                    let bv = self.nodes[*b].value.clone();
                    let (m, k) = self.nodes[*a].value.shape();
                    let mut da = Tensor::zeros(m, k);
                    mm_nn(&gt, &bv, &mut da);
                    self.macs += (m * k * cols) as u64;
                    accumulate(self.ensure_grad(*a), da.data());
                }
                if self.nodes[*b].requires_grad {
                    let av = self.nodes[*a].value.clone();
                    let (n, k) = self.nodes[*b].value.shape();
                    let mut db = Tensor::zeros(n, k);
                    mm_tn(&gt, &av, &mut db);
                    self.macs += (rows * n * k) as u64;
                    accumulate(self.ensure_grad(*b), db.data());
                }
            }
            Op::Add { a, b } => {
                if self.nodes[*a].requires_grad {
                    accumulate(self.ensure_grad(*a), g);
                }
                if self.nodes[*b].requires_grad {
                    accumulate(self.ensure_grad(*b), g);
                }
            }
            Op::AddRow { a, row } => {
                if self.nodes[*a].requires_grad {
                    accumulate(self.ensure_grad(*a), g);
                }
                if self.nodes[*row].requires_grad {
                    let dr = self.ensure_grad(*row);
                    for i in 0..rows {
                        for j in 0..cols {
                            dr[j] = dr[j] + g[i * cols + j];
                        }
                    }
                }
            }
            Op::ScaleConst { a, c } => {
                if self.nodes[*a].requires_grad {
                    let ce = E::from_f64c(*c);
                    let da = self.ensure_grad(*a);
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d = *d + ce * gv;
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if self.nodes[*a].requires_grad {
                    let y = self.nodes[id].value.clone();
                    let da = self.ensure_grad(*a);
                    for i in 0..rows {
                        let yrow = y.row(i);
                        let grow = &g[i * cols..(i + 1) * cols];
                        let mut dot = E::zero();
                        for j in 0..cols {
                            dot = dot + yrow[j] * grow[j];
                        }
                        for j in 0..cols {
                            da[i * cols + j] = da[i * cols + j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = self.nodes[*x].value.clone();
                let gv = self.nodes[*gamma].value.clone();
                let inv_c = E::from_f64c(1.0 / cols as f64);
                if self.nodes[*beta].requires_grad {
                    let db = self.ensure_grad(*beta);
                    for i in 0..rows {
                        for j in 0..cols {
                            db[j] = db[j] + g[i * cols + j];
                        }
                    }
                }
                if self.nodes[*gamma].requires_grad {
                    let dg = self.ensure_grad(*gamma);
                    for i in 0..rows {
                        for j in 0..cols {
                            let xhat = (xv.at(i, j) - mean[i]) * rstd[i];
                            dg[j] = dg[j] + g[i * cols + j] * xhat;
                        }
                    }
                }
                if self.nodes[*x].requires_grad {
                    let dx = self.ensure_grad(*x);
                    for i in 0..rows {
                        let mut sum_dxhat = E::zero();
                        let mut sum_dxhat_xhat = E::zero();
                        for j in 0..cols {
                            let xhat = (xv.at(i, j) - mean[i]) * rstd[i];
                            let dxhat = g[i * cols + j] * gv.data()[j];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        let m1 = sum_dxhat * inv_c;
                        let m2 = sum_dxhat_xhat * inv_c;
                        for j in 0..cols {
                            let xhat = (xv.at(i, j) - mean[i]) * rstd[i];
                            let dxhat = g[i * cols + j] * gv.data()[j];
                            dx[i * cols + j] =
                                dx[i * cols + j] + rstd[i] * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if self.nodes[*a].requires_grad {
                    let xv = self.nodes[*a].value.clone();
                    let da = self.ensure_grad(*a);
                    for (e, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                        *d = *d + gv * gelu_grad(xv.data()[e]);
                    }
                }
            }
            Op::Dropout { a, mask, keep_scale } => {
                if self.nodes[*a].requires_grad {
                    let ks = E::from_f64c(*keep_scale);
                    let da = self.ensure_grad(*a);
                    for (e, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                        if mask[e] {
                            *d = *d + gv * ks;
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let (pr, _) = self.nodes[p].value.shape();
                    if self.nodes[p].requires_grad {
                        let dp = self.ensure_grad(p);
                        accumulate(dp, &g[start * cols..(start + pr) * cols]);
                    }
                    start += pr;
                }
            }
            Op::SliceRows { a, start } => {
                if self.nodes[*a].requires_grad {
                    let ac = self.nodes[*a].value.cols();
                    let da = self.ensure_grad(*a);
                    accumulate(&mut da[start * ac..(start + rows) * ac], g);
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let (pr, pc) = self.nodes[p].value.shape();
                    if self.nodes[p].requires_grad {
                        let dp = self.ensure_grad(p);
                        for i in 0..pr {
                            for j in 0..pc {
                                dp[i * pc + j] = dp[i * pc + j] + g[i * cols + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceCols { a, start } => {
                if self.nodes[*a].requires_grad {
                    let ac = self.nodes[*a].value.cols();
                    let da = self.ensure_grad(*a);
                    for i in 0..rows {
                        for j in 0..cols {
                            da[i * ac + start + j] = da[i * ac + start + j] + g[i * cols + j];
                        }
                    }
                }
            }
            Op::RowScaleMax1 { p, s } => {
                let one = E::one();
                let sv = self.nodes[*s].value.clone();
                if self.nodes[*p].requires_grad {
                    let dp = self.ensure_grad(*p);
                    for i in 0..rows {
                        let m = sv.at(i, 0).max(one);
                        for j in 0..cols {
                            dp[i * cols + j] = dp[i * cols + j] + g[i * cols + j] * m;
                        }
                    }
                }
                if self.nodes[*s].requires_grad {
                    let pv = self.nodes[*p].value.clone();
                    let ds = self.ensure_grad(*s);
                    for i in 0..rows {
                        // Clamp is active below 1; at exactly 1 the chosen
                        // subgradient is 1, so s >= 1 routes the gradient.
                        if sv.at(i, 0) >= one {
                            let mut dot = E::zero();
                            for j in 0..cols {
                                dot = dot + g[i * cols + j] * pv.at(i, j);
                            }
                            ds[i] = ds[i] + dot;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.nodes[*logits].requires_grad {
                    let b = probs.rows();
                    let c = probs.cols();
                    let scale = g[0] / E::from_f64c(b as f64);
                    let dl = self.ensure_grad(*logits);
                    for i in 0..b {
                        for j in 0..c {
                            let indicator = if labels[i] == j { E::one() } else { E::zero() };
                            dl[i * c + j] = dl[i * c + j] + scale * (probs.at(i, j) - indicator);
                        }
                    }
                }
            }
        }
        self.nodes[id].op = op;
        Ok(())
    }
}

fn accumulate<E: Scalar>(dst: &mut [E], src: &[E]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn gelu_val<E: Scalar>(x: E) -> E {
    let c = E::from_f64c(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = E::from_f64c(0.044_715);
    let half = E::from_f64c(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * x * (E::one() + t)
}

fn gelu_grad<E: Scalar>(x: E) -> E {
    let c = E::from_f64c(0.797_884_560_802_865_4);
    let a = E::from_f64c(0.044_715);
    let half = E::from_f64c(0.5);
    let three = E::from_f64c(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (E::one() + three * a * x * x);
    half * (E::one() + t) + half * x * (E::one() - t * t) * dinner
}
