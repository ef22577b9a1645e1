//! Forward kernels and backward rules for every registered op.
//!
//! All ops are rank-2 (scalars are `[1,1]`, vectors `[1,n]`), reject
//! non-finite inputs, and run as fixed sequential loops so identical
//! inputs produce bit-identical outputs.

use crate::error::{Error, Result};

use super::tape::{Node, OpKind, Tape};
use super::Tensor;

/// Norm floor guarding l2 normalization of near-zero rows.
pub const NORM_FLOOR: f64 = 1e-9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn check_finite(op: &'static str, tensors: &[&Tensor]) -> Result<()> {
    for t in tensors {
        if t.inner().borrow().data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { op });
        }
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: s,
            msg: "expected a rank-2 tensor".into(),
        });
    }
    Ok((s[0], s[1]))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (m, n) = dims2(op, a)?;
    let (m2, n2) = dims2(op, b)?;
    if (m, n) != (m2, n2) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok((m, n))
}

/// out[m,n] = a[m,k] . b[k,n], accumulated k-outer so the inner loop
/// vectorizes.
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn tr(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

impl Tape {
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_finite("matmul", &[a, b])?;
        let (m, k) = dims2("matmul", a)?;
        let (k2, n) = dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let out = mm(&a.data(), m, k, &b.data(), n);
        Ok(self.record(OpKind::MatMul, vec![a.clone(), b.clone()], vec![m, n], out))
    }

    /// Elementwise sum. Also accepts a `[1,n]` right operand against a
    /// `[m,n]` left operand (row broadcast, used for biases).
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_finite("add", &[a, b])?;
        let (m, n) = dims2("add", a)?;
        let (mb, nb) = dims2("add", b)?;
        let data = if (mb, nb) == (m, n) {
            a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect()
        } else if mb == 1 && nb == n {
            let bd = b.data();
            let mut out = a.to_vec();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += bd[j];
                }
            }
            out
        } else {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        };
        Ok(self.record(OpKind::Add, vec![a.clone(), b.clone()], vec![m, n], data))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_finite("sub", &[a, b])?;
        let (m, n) = same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
        Ok(self.record(OpKind::Sub, vec![a.clone(), b.clone()], vec![m, n], data))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_finite("mul", &[a, b])?;
        let (m, n) = same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        Ok(self.record(OpKind::Mul, vec![a.clone(), b.clone()], vec![m, n], data))
    }

    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        check_finite("transpose", &[x])?;
        let (m, n) = dims2("transpose", x)?;
        let data = tr(&x.data(), m, n);
        Ok(self.record(OpKind::Transpose, vec![x.clone()], vec![n, m], data))
    }

    /// Gathers rows of `table` at `ids`; gradient scatter-adds back.
    pub fn embed_lookup(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        check_finite("embed_lookup", &[table])?;
        let (v, d) = dims2("embed_lookup", table)?;
        if ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "embed_lookup",
                shape: vec![0],
                msg: "empty id list".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let td = table.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        drop(td);
        Ok(self.record(
            OpKind::EmbedLookup { ids: ids.to_vec() },
            vec![table.clone()],
            vec![ids.len(), d],
            out,
        ))
    }

    pub fn softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        check_finite("softmax_rows", &[x])?;
        let (m, n) = dims2("softmax_rows", x)?;
        let xd = x.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&xd[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        drop(xd);
        Ok(self.record(OpKind::SoftmaxRows, vec![x.clone()], vec![m, n], out))
    }

    /// Per-row normalization with learned gain and shift (`gamma`,
    /// `beta` are `[1,n]`).
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        check_finite("layer_norm", &[x, gamma, beta])?;
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let (m, n) = dims2("layer_norm", x)?;
        for t in [gamma, beta] {
            let (gm, gn) = dims2("layer_norm", t)?;
            if (gm, gn) != (1, n) {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape(),
                    rhs: t.shape(),
                });
            }
        }
        let xd = x.data();
        let g = gamma.data();
        let b = beta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        drop((xd, g, b));
        Ok(self.record(
            OpKind::LayerNorm { eps },
            vec![x.clone(), gamma.clone(), beta.clone()],
            vec![m, n],
            out,
        ))
    }

    pub fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        check_finite("gelu", &[x])?;
        let (m, n) = dims2("gelu", x)?;
        let data = x
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        Ok(self.record(OpKind::Gelu, vec![x.clone()], vec![m, n], data))
    }

    pub fn slice_rows(&self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        check_finite("slice_rows", &[x])?;
        let (m, n) = dims2("slice_rows", x)?;
        if len == 0 || start + len > m {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                shape: x.shape(),
                msg: format!("rows [{start}, {}) out of range", start + len),
            });
        }
        let data = x.data()[start * n..(start + len) * n].to_vec();
        Ok(self.record(
            OpKind::SliceRows { start },
            vec![x.clone()],
            vec![len, n],
            data,
        ))
    }

    pub fn concat_rows(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_finite("concat_rows", &[a, b])?;
        let (ma, n) = dims2("concat_rows", a)?;
        let (mb, nb) = dims2("concat_rows", b)?;
        if n != nb {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut data = a.to_vec();
        data.extend_from_slice(&b.data());
        Ok(self.record(
            OpKind::ConcatRows,
            vec![a.clone(), b.clone()],
            vec![ma + mb, n],
            data,
        ))
    }

    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        check_finite("scale", &[x])?;
        if !c.is_finite() {
            return Err(Error::NonFiniteInput { op: "scale" });
        }
        let (m, n) = dims2("scale", x)?;
        let data = x.data().iter().map(|v| v * c).collect();
        Ok(self.record(OpKind::Scale { c }, vec![x.clone()], vec![m, n], data))
    }

    pub fn add_scalar(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        check_finite("add_scalar", &[x])?;
        if !c.is_finite() {
            return Err(Error::NonFiniteInput { op: "add_scalar" });
        }
        let (m, n) = dims2("add_scalar", x)?;
        let data = x.data().iter().map(|v| v + c).collect();
        Ok(self.record(OpKind::AddScalar { c }, vec![x.clone()], vec![m, n], data))
    }

    /// Replaces masked positions with `value`; gradient is blocked there.
    pub fn mask_fill(&self, x: &Tensor, mask: &[bool], value: f64) -> Result<Tensor> {
        check_finite("mask_fill", &[x])?;
        let (m, n) = dims2("mask_fill", x)?;
        if mask.len() != m * n {
            return Err(Error::InvalidShape {
                op: "mask_fill",
                shape: x.shape(),
                msg: format!("mask length {} does not match {}", mask.len(), m * n),
            });
        }
        let data = x
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &masked)| if masked { value } else { v })
            .collect();
        Ok(self.record(
            OpKind::MaskFill {
                mask: mask.to_vec(),
                value,
            },
            vec![x.clone()],
            vec![m, n],
            data,
        ))
    }

    /// Per-row negative log softmax probability of the target class:
    /// `out[i] = logsumexp(row_i) - row_i[target_i]`, shape `[m,1]`.
    pub fn cross_entropy_rows(&self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        check_finite("cross_entropy_rows", &[logits])?;
        let (m, n) = dims2("cross_entropy_rows", logits)?;
        if targets.len() != m {
            return Err(Error::InvalidShape {
                op: "cross_entropy_rows",
                shape: logits.shape(),
                msg: format!("{} targets for {m} rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: n });
        }
        let xd = logits.data();
        let mut out = Vec::with_capacity(m);
        for (i, &t) in targets.iter().enumerate() {
            let row = &xd[i * n..(i + 1) * n];
            out.push(log_sum_exp(row) - row[t]);
        }
        drop(xd);
        Ok(self.record(
            OpKind::CrossEntropyRows {
                targets: targets.to_vec(),
            },
            vec![logits.clone()],
            vec![m, 1],
            out,
        ))
    }

    /// Rows scaled to unit l2 norm; rows with norm below [`NORM_FLOOR`]
    /// are divided by the floor instead.
    pub fn l2_normalize_rows(&self, x: &Tensor) -> Result<Tensor> {
        check_finite("l2_normalize_rows", &[x])?;
        let (m, n) = dims2("l2_normalize_rows", x)?;
        let xd = x.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        drop(xd);
        Ok(self.record(OpKind::L2NormalizeRows, vec![x.clone()], vec![m, n], out))
    }

    /// Row-wise dot products of two same-shape matrices, shape `[m,1]`.
    pub fn dot_rows(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_finite("dot_rows", &[a, b])?;
        let (m, n) = same_shape("dot_rows", a, b)?;
        let ad = a.data();
        let bd = b.data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..n {
                s += ad[i * n + j] * bd[i * n + j];
            }
            out.push(s);
        }
        drop((ad, bd));
        Ok(self.record(OpKind::DotRows, vec![a.clone(), b.clone()], vec![m, 1], out))
    }

    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        check_finite("exp", &[x])?;
        let (m, n) = dims2("exp", x)?;
        let data = x.data().iter().map(|v| v.exp()).collect();
        Ok(self.record(OpKind::Exp, vec![x.clone()], vec![m, n], data))
    }

    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        check_finite("sum", &[x])?;
        dims2("sum", x)?;
        let s = x.data().iter().sum();
        Ok(self.record(OpKind::Sum, vec![x.clone()], vec![1, 1], vec![s]))
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        check_finite("mean", &[x])?;
        dims2("mean", x)?;
        let s: f64 = x.data().iter().sum();
        let n = x.numel() as f64;
        Ok(self.record(OpKind::Mean, vec![x.clone()], vec![1, 1], vec![s / n]))
    }

    /// Elementwise minimum; at ties the gradient follows the left input.
    pub fn min_elem(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_finite("min_elem", &[a, b])?;
        let (m, n) = same_shape("min_elem", a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        Ok(self.record(OpKind::MinElem, vec![a.clone(), b.clone()], vec![m, n], data))
    }

    pub fn clamp(&self, x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        check_finite("clamp", &[x])?;
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let (m, n) = dims2("clamp", x)?;
        let data = x.data().iter().map(|v| v.clamp(lo, hi)).collect();
        Ok(self.record(OpKind::Clamp { lo, hi }, vec![x.clone()], vec![m, n], data))
    }
}

fn tracked(node: &Node, idx: usize) -> bool {
    node.inputs[idx].inner().borrow().track
}

/// Gradient contributions of one node: `(input index, gradient)` pairs
/// for every tracked input.
pub(crate) fn backprop(node: &Node, gout: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let mut grads = Vec::new();
    match &node.op {
        OpKind::MatMul => {
            let a = node.inputs[0].to_vec();
            let b = node.inputs[1].to_vec();
            let (m, k) = {
                let s = node.inputs[0].shape();
                (s[0], s[1])
            };
            let n = node.inputs[1].shape()[1];
            if tracked(node, 0) {
                // dA = dC . B^T
                let bt = tr(&b, k, n);
                grads.push((0, mm(gout, m, n, &bt, k)));
            }
            if tracked(node, 1) {
                // dB = A^T . dC
                let at = tr(&a, m, k);
                grads.push((1, mm(&at, k, m, gout, n)));
            }
        }
        OpKind::Add => {
            if tracked(node, 0) {
                grads.push((0, gout.to_vec()));
            }
            if tracked(node, 1) {
                let bshape = node.inputs[1].shape();
                if bshape[0] == 1 && gout.len() != bshape[1] {
                    // broadcast bias: sum over rows
                    let n = bshape[1];
                    let m = gout.len() / n;
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += gout[i * n + j];
                        }
                    }
                    grads.push((1, gb));
                } else {
                    grads.push((1, gout.to_vec()));
                }
            }
        }
        OpKind::Sub => {
            if tracked(node, 0) {
                grads.push((0, gout.to_vec()));
            }
            if tracked(node, 1) {
                grads.push((1, gout.iter().map(|g| -g).collect()));
            }
        }
        OpKind::Mul => {
            if tracked(node, 0) {
                let b = node.inputs[1].data();
                grads.push((0, gout.iter().zip(b.iter()).map(|(g, v)| g * v).collect()));
            }
            if tracked(node, 1) {
                let a = node.inputs[0].data();
                grads.push((1, gout.iter().zip(a.iter()).map(|(g, v)| g * v).collect()));
            }
        }
        OpKind::Transpose => {
            if tracked(node, 0) {
                let s = node.output.shape(); // [n, m]
                grads.push((0, tr(gout, s[0], s[1])));
            }
        }
        OpKind::EmbedLookup { ids } => {
            if tracked(node, 0) {
                let s = node.inputs[0].shape();
                let (v, d) = (s[0], s[1]);
                let mut gt = vec![0.0; v * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gout[row * d + j];
                    }
                }
                grads.push((0, gt));
            }
        }
        OpKind::SoftmaxRows => {
            if tracked(node, 0) {
                let y = node.output.data();
                let s = node.output.shape();
                let (m, n) = (s[0], s[1]);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gout[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                drop(y);
                grads.push((0, gx));
            }
        }
        OpKind::LayerNorm { eps } => {
            let x = node.inputs[0].data();
            let g = node.inputs[1].data();
            let s = node.inputs[0].shape();
            let (m, n) = (s[0], s[1]);
            let nf = n as f64;
            let mut gx = vec![0.0; m * n];
            let mut gg = vec![0.0; n];
            let mut gb = vec![0.0; n];
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let gr = &gout[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / nf;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                let inv = 1.0 / (var + eps).sqrt();
                // xhat and the two row means the backward rule needs
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in 0..n {
                    let xhat = (row[j] - mean) * inv;
                    let dxhat = gr[j] * g[j];
                    gg[j] += gr[j] * xhat;
                    gb[j] += gr[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat /= nf;
                mean_dxhat_xhat /= nf;
                for j in 0..n {
                    let xhat = (row[j] - mean) * inv;
                    let dxhat = gr[j] * g[j];
                    gx[i * n + j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
            drop((x, g));
            if tracked(node, 0) {
                grads.push((0, gx));
            }
            if tracked(node, 1) {
                grads.push((1, gg));
            }
            if tracked(node, 2) {
                grads.push((2, gb));
            }
        }
        OpKind::Gelu => {
            if tracked(node, 0) {
                let x = node.inputs[0].data();
                let gx = x
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                drop(x);
                grads.push((0, gx));
            }
        }
        OpKind::SliceRows { start } => {
            if tracked(node, 0) {
                let s = node.inputs[0].shape();
                let (m, n) = (s[0], s[1]);
                let len = node.output.shape()[0];
                let mut gx = vec![0.0; m * n];
                gx[start * n..(start + len) * n].copy_from_slice(gout);
                grads.push((0, gx));
            }
        }
        OpKind::ConcatRows => {
            let split = node.inputs[0].numel();
            if tracked(node, 0) {
                grads.push((0, gout[..split].to_vec()));
            }
            if tracked(node, 1) {
                grads.push((1, gout[split..].to_vec()));
            }
        }
        OpKind::Scale { c } => {
            if tracked(node, 0) {
                grads.push((0, gout.iter().map(|g| g * c).collect()));
            }
        }
        OpKind::AddScalar { .. } => {
            if tracked(node, 0) {
                grads.push((0, gout.to_vec()));
            }
        }
        OpKind::MaskFill { mask, .. } => {
            if tracked(node, 0) {
                let gx = gout
                    .iter()
                    .zip(mask)
                    .map(|(&g, &masked)| if masked { 0.0 } else { g })
                    .collect();
                grads.push((0, gx));
            }
        }
        OpKind::CrossEntropyRows { targets } => {
            if tracked(node, 0) {
                let x = node.inputs[0].data();
                let s = node.inputs[0].shape();
                let (m, n) = (s[0], s[1]);
                let mut gx = vec![0.0; m * n];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &x[i * n..(i + 1) * n];
                    softmax_row(row, &mut gx[i * n..(i + 1) * n]);
                    gx[i * n + t] -= 1.0;
                    for j in 0..n {
                        gx[i * n + j] *= gout[i];
                    }
                }
                drop(x);
                grads.push((0, gx));
            }
        }
        OpKind::L2NormalizeRows => {
            if tracked(node, 0) {
                let x = node.inputs[0].data();
                let y = node.output.data();
                let s = node.inputs[0].shape();
                let (m, n) = (s[0], s[1]);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let row = &x[i * n..(i + 1) * n];
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gout[i * n..(i + 1) * n];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > NORM_FLOOR {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        // floored branch is plain scaling
                        for j in 0..n {
                            gx[i * n + j] = gr[j] / NORM_FLOOR;
                        }
                    }
                }
                drop((x, y));
                grads.push((0, gx));
            }
        }
        OpKind::DotRows => {
            let s = node.inputs[0].shape();
            let (m, n) = (s[0], s[1]);
            if tracked(node, 0) {
                let b = node.inputs[1].data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = gout[i] * b[i * n + j];
                    }
                }
                drop(b);
                grads.push((0, ga));
            }
            if tracked(node, 1) {
                let a = node.inputs[0].data();
                let mut gb = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gb[i * n + j] = gout[i] * a[i * n + j];
                    }
                }
                drop(a);
                grads.push((1, gb));
            }
        }
        OpKind::Exp => {
            if tracked(node, 0) {
                let y = node.output.data();
                grads.push((0, gout.iter().zip(y.iter()).map(|(g, v)| g * v).collect()));
            }
        }
        OpKind::Sum => {
            if tracked(node, 0) {
                grads.push((0, vec![gout[0]; node.inputs[0].numel()]));
            }
        }
        OpKind::Mean => {
            if tracked(node, 0) {
                let n = node.inputs[0].numel();
                grads.push((0, vec![gout[0] / n as f64; n]));
            }
        }
        OpKind::MinElem => {
            let a = node.inputs[0].data();
            let b = node.inputs[1].data();
            if tracked(node, 0) {
                let ga = gout
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&g, (&x, &y))| if x <= y { g } else { 0.0 })
                    .collect();
                grads.push((0, ga));
            }
            if tracked(node, 1) {
                let gb = gout
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&g, (&x, &y))| if x <= y { 0.0 } else { g })
                    .collect();
                grads.push((1, gb));
            }
        }
        OpKind::Clamp { lo, hi } => {
            if tracked(node, 0) {
                let x = node.inputs[0].data();
                let gx = gout
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| if v > *lo && v < *hi { g } else { 0.0 })
                    .collect();
                drop(x);
                grads.push((0, gx));
            }
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let i = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = tape.matmul(&a, &i).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = tape.matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn softmax_symmetry() {
        let tape = Tape::new();
        let x = Tensor::from_rows(&[vec![0.0, 0.0]]);
        let y = tape.softmax_rows(&x).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = Tensor::from_rows(&[vec![3.0, -2.0, 0.5], vec![100.0, 100.0, 100.0]]);
        let y = tape.softmax_rows(&x).unwrap();
        let d = y.to_vec();
        for i in 0..2 {
            let s: f64 = d[i * 3..(i + 1) * 3].iter().sum();
            approx(s, 1.0, 1e-12);
            assert!(d[i * 3..(i + 1) * 3].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn l2_normalize_hand_case() {
        let tape = Tape::new();
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]);
        let y = tape.l2_normalize_rows(&x).unwrap();
        let d = y.to_vec();
        approx(d[0], 0.6, 1e-15);
        approx(d[1], 0.8, 1e-15);
    }

    #[test]
    fn l2_normalize_unit_norms() {
        let tape = Tape::new();
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 8.0], vec![1e-4, 2e-4, -1e-4]]);
        let y = tape.l2_normalize_rows(&x).unwrap();
        let d = y.to_vec();
        for i in 0..2 {
            let n: f64 = d[i * 3..(i + 1) * 3].iter().map(|v| v * v).sum::<f64>().sqrt();
            approx(n, 1.0, 1e-12);
        }
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let tape = Tape::new();
        let logits = Tensor::param(&[1, 2], vec![0.0, 0.0]).unwrap();
        let ce = tape.cross_entropy_rows(&logits, &[0]).unwrap();
        let loss = tape.sum(&ce).unwrap();
        tape.backward(&loss).unwrap();
        let g = logits.grad().unwrap();
        approx(g[0], -0.5, 1e-15);
        approx(g[1], 0.5, 1e-15);
    }

    #[test]
    fn non_finite_input_rejected() {
        let tape = Tape::new();
        let x = Tensor::new(&[1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            tape.scale(&x, 2.0),
            Err(Error::NonFiniteInput { .. })
        ));
    }

    #[test]
    fn embed_lookup_gathers_and_scatters() {
        let tape = Tape::new();
        let table = Tensor::param(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = tape.embed_lookup(&table, &[2, 0, 2]).unwrap();
        assert_eq!(out.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(&out).unwrap();
        tape.backward(&loss).unwrap();
        // row 2 used twice, row 1 unused
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = Tensor::from_rows(&[vec![0.123, -4.56, 7.89], vec![0.5, 0.25, -0.125]]);
            let w = Tensor::from_rows(&[vec![1.5, -0.5], vec![2.0, 0.75], vec![-1.25, 0.1]]);
            let h = tape.matmul(&x, &w).unwrap();
            let s = tape.softmax_rows(&h).unwrap();
            let n = tape.l2_normalize_rows(&s).unwrap();
            n.to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
