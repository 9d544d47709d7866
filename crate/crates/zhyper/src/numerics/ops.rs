//! Differentiable operations on [`Tensor`], plus the raw matmul kernels
//! they share with non-differentiating code paths.
//!
//! Conventions: matrices are row-major `[rows × cols]`; rank-1 tensors
//! are treated as a single row by the rowwise ops (softmax, layer norm)
//! and as a broadcastable row by `add`/`mul`. Each op validates shapes
//! up front and returns `Error::Shape` naming both operands, so a
//! mis-wired model fails loudly at the faulty call instead of three ops
//! later.
//!
//! Every VJP closure skips cotangents for parents that do not require
//! grad (frozen weights never pay for their own gradient).

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Additive mask value: large enough that softmax underflows it to
/// exactly zero, small enough to stay well inside f64 range.
pub const MASK_VALUE: f64 = -1e30;

// ── Raw kernels ─────────────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n].
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
    out
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ (B given untransposed).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a_row[kk] * b_row[kk];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C[k×n] = A[m×k]ᵀ · B[m×n] (A given untransposed).
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
    out
}

/// Rows/cols view of a rank-1 (single row) or rank-2 tensor.
fn rows_cols(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [m, n] => Ok((*m, *n)),
        other => Err(Error::contract(format!(
            "{op}: expected rank 1 or 2, got shape {other:?}"
        ))),
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::contract(format!(
            "{op}: expected a matrix, got shape {other:?}"
        ))),
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl Tensor {
    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(rhs, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self, rhs));
        }
        let out = matmul_raw(self.data(), rhs.data(), m, k, n);
        let (a, b) = (self.clone(), rhs.clone());
        let needs = [self.requires_grad(), rhs.requires_grad()];
        Ok(Tensor::from_op(vec![m, n], out, &[self, rhs], move |up| {
            vec![
                needs[0].then(|| matmul_nt(up, b.data(), m, n, k)),
                needs[1].then(|| matmul_tn(a.data(), up, m, k, n)),
            ]
        }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data()[i * n + j];
            }
        }
        Ok(Tensor::from_op(vec![n, m], out, &[self], move |up| {
            let mut back = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    back[i * n + j] = up[j * m + i];
                }
            }
            vec![Some(back)]
        }))
    }

    // ── Pointwise arithmetic ─────────────────────────────────────────

    /// Elementwise sum; a rank-1 `rhs` whose length matches the column
    /// count is broadcast across rows (bias addition).
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() == rhs.shape() {
            let out: Vec<f64> = self
                .data()
                .iter()
                .zip(rhs.data())
                .map(|(a, b)| a + b)
                .collect();
            let needs = [self.requires_grad(), rhs.requires_grad()];
            return Ok(Tensor::from_op(
                self.shape().to_vec(),
                out,
                &[self, rhs],
                move |up| {
                    vec![
                        needs[0].then(|| up.to_vec()),
                        needs[1].then(|| up.to_vec()),
                    ]
                },
            ));
        }
        let (rows, cols) = rows_cols(self, "add")?;
        if rhs.rank() != 1 || rhs.numel() != cols {
            return Err(shape_err("add", self, rhs));
        }
        let mut out = self.data().to_vec();
        for r in 0..rows {
            for (j, &b) in rhs.data().iter().enumerate() {
                out[r * cols + j] += b;
            }
        }
        let needs = [self.requires_grad(), rhs.requires_grad()];
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self, rhs],
            move |up| {
                let d_rhs = needs[1].then(|| {
                    let mut col_sums = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            col_sums[j] += up[r * cols + j];
                        }
                    }
                    col_sums
                });
                vec![needs[0].then(|| up.to_vec()), d_rhs]
            },
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(shape_err("sub", self, rhs));
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a - b)
            .collect();
        let needs = [self.requires_grad(), rhs.requires_grad()];
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self, rhs],
            move |up| {
                vec![
                    needs[0].then(|| up.to_vec()),
                    needs[1].then(|| up.iter().map(|g| -g).collect()),
                ]
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |up| {
            vec![Some(up.iter().map(|g| g * c).collect())]
        })
    }

    /// Elementwise product; a rank-1 `rhs` matching the column count is
    /// broadcast across rows, i.e. it scales columns — this is how a
    /// diagonal modulation signal is applied to the columns of a factor.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() == rhs.shape() {
            let out: Vec<f64> = self
                .data()
                .iter()
                .zip(rhs.data())
                .map(|(a, b)| a * b)
                .collect();
            let (a, b) = (self.clone(), rhs.clone());
            let needs = [self.requires_grad(), rhs.requires_grad()];
            return Ok(Tensor::from_op(
                self.shape().to_vec(),
                out,
                &[self, rhs],
                move |up| {
                    vec![
                        needs[0]
                            .then(|| up.iter().zip(b.data()).map(|(g, v)| g * v).collect()),
                        needs[1]
                            .then(|| up.iter().zip(a.data()).map(|(g, v)| g * v).collect()),
                    ]
                },
            ));
        }
        let (rows, cols) = rows_cols(self, "mul")?;
        if rhs.rank() != 1 || rhs.numel() != cols {
            return Err(shape_err("mul", self, rhs));
        }
        let mut out = self.data().to_vec();
        for r in 0..rows {
            for (j, &b) in rhs.data().iter().enumerate() {
                out[r * cols + j] *= b;
            }
        }
        let (a, b) = (self.clone(), rhs.clone());
        let needs = [self.requires_grad(), rhs.requires_grad()];
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self, rhs],
            move |up| {
                let d_a = needs[0].then(|| {
                    let mut d = up.to_vec();
                    for r in 0..rows {
                        for (j, &bv) in b.data().iter().enumerate() {
                            d[r * cols + j] *= bv;
                        }
                    }
                    d
                });
                let d_b = needs[1].then(|| {
                    let mut d = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            d[j] += up[r * cols + j] * a.data()[r * cols + j];
                        }
                    }
                    d
                });
                vec![d_a, d_b]
            },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let numel = self.numel();
        Ok(Tensor::from_op(vec![], vec![total], &[self], move |up| {
            vec![Some(vec![up[0]; numel])]
        }))
    }

    // ── Shape surgery ────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::contract(format!(
                "reshape: {:?} has {} elements, target {:?} wants {}",
                self.shape(),
                self.numel(),
                shape,
                numel
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            &[self],
            move |up| vec![Some(up.to_vec())],
        ))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = dims2(self, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::contract(format!(
                "slice_cols: range {start}..{end} out of bounds for {n} columns"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&self.data()[r * n + start..r * n + end]);
        }
        Ok(Tensor::from_op(vec![m, w], out, &[self], move |up| {
            let mut back = vec![0.0; m * n];
            for r in 0..m {
                back[r * n + start..r * n + end].copy_from_slice(&up[r * w..(r + 1) * w]);
            }
            vec![Some(back)]
        }))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = dims2(self, "slice_rows")?;
        if start >= end || end > m {
            return Err(Error::contract(format!(
                "slice_rows: range {start}..{end} out of bounds for {m} rows"
            )));
        }
        let h = end - start;
        let out = self.data()[start * n..end * n].to_vec();
        Ok(Tensor::from_op(vec![h, n], out, &[self], move |up| {
            let mut back = vec![0.0; m * n];
            back[start * n..end * n].copy_from_slice(up);
            vec![Some(back)]
        }))
    }

    /// Single row of a matrix, as a rank-1 tensor.
    pub fn row(&self, index: usize) -> Result<Tensor> {
        let (_, n) = dims2(self, "row")?;
        self.slice_rows(index, index + 1)?.reshape(&[n])
    }

    // ── Rowwise nonlinearities ───────────────────────────────────────

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (rows, cols) = rows_cols(self, "softmax_rows")?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = &self.data()[r * cols..(r + 1) * cols];
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (d, &v) in dst.iter_mut().zip(x) {
                *d = (v - max).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self],
            move |up| {
                let mut back = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let ur = &up[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        back[r * cols + j] = yr[j] * (ur[j] - dot);
                    }
                }
                vec![Some(back)]
            },
        ))
    }

    /// Layer normalization over each row with learned elementwise
    /// `gamma`/`beta` (both rank-1, length = column count).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = rows_cols(self, "layer_norm")?;
        if gamma.rank() != 1 || gamma.numel() != cols {
            return Err(shape_err("layer_norm", self, gamma));
        }
        if beta.rank() != 1 || beta.numel() != cols {
            return Err(shape_err("layer_norm", self, beta));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = &self.data()[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..cols {
                let h = (x[j] - mean) * inv;
                xhat[r * cols + j] = h;
                out[r * cols + j] = gamma.data()[j] * h + beta.data()[j];
            }
        }
        let g = gamma.clone();
        let needs = [
            self.requires_grad(),
            gamma.requires_grad(),
            beta.requires_grad(),
        ];
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self, gamma, beta],
            move |up| {
                let d_x = needs[0].then(|| {
                    let mut back = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let ur = &up[r * cols..(r + 1) * cols];
                        // Gradient through the row's own mean and variance.
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..cols {
                            let dh = ur[j] * g.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= cols as f64;
                        mean_dh_h /= cols as f64;
                        for j in 0..cols {
                            let dh = ur[j] * g.data()[j];
                            back[r * cols + j] =
                                inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    back
                });
                let d_gamma = needs[1].then(|| {
                    let mut d = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            d[j] += up[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                    d
                });
                let d_beta = needs[2].then(|| {
                    let mut d = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            d[j] += up[r * cols + j];
                        }
                    }
                    d
                });
                vec![d_x, d_gamma, d_beta]
            },
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const CUBIC: f64 = 0.044715;
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (c * (x + CUBIC * x * x * x)).tanh()))
            .collect();
        let x_saved = self.clone();
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |up| {
            let back = x_saved
                .data()
                .iter()
                .zip(up)
                .map(|(&x, &g)| {
                    let t = (c * (x + CUBIC * x * x * x)).tanh();
                    let du = c * (1.0 + 3.0 * CUBIC * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })
                .collect();
            vec![Some(back)]
        })
    }

    // ── Sequence-model specifics ─────────────────────────────────────

    /// Gather rows of an embedding table; the backward pass scatter-adds
    /// into the table, so repeated ids accumulate.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let (vocab, dim) = dims2(self, "embedding_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::input(format!(
                "embedding_lookup: id {bad} out of range for table with {vocab} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&self.data()[id * dim..(id + 1) * dim]);
        }
        let ids_saved = ids.to_vec();
        let len = ids.len();
        Ok(Tensor::from_op(
            vec![len, dim],
            out,
            &[self],
            move |up| {
                let mut back = vec![0.0; vocab * dim];
                for (pos, &id) in ids_saved.iter().enumerate() {
                    for j in 0..dim {
                        back[id * dim + j] += up[pos * dim + j];
                    }
                }
                vec![Some(back)]
            },
        ))
    }

    /// Add the causal mask to a square score matrix: entries above the
    /// diagonal (future positions) get [`MASK_VALUE`].
    pub fn causal_mask_add(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "causal_mask_add")?;
        if m != n {
            return Err(Error::contract(format!(
                "causal_mask_add: scores must be square, got [{m}, {n}]"
            )));
        }
        let mut out = self.data().to_vec();
        for i in 0..m {
            for j in i + 1..n {
                out[i * n + j] += MASK_VALUE;
            }
        }
        Ok(Tensor::from_op(vec![m, n], out, &[self], |up| {
            vec![Some(up.to_vec())]
        }))
    }

    /// Summed label-smoothed cross-entropy over the rows of a logit
    /// matrix `[positions × vocab]` from row `score_from` on, against
    /// `targets[p]` per row. Returns the scalar sum and the number of
    /// scored positions; callers divide to get a mean.
    ///
    /// With smoothing `s` the per-row target distribution is
    /// `q = (1-s)·onehot(t) + s/V`, giving `d logits = softmax − q`.
    pub fn cross_entropy_sum(
        &self,
        targets: &[usize],
        smoothing: f64,
        score_from: usize,
    ) -> Result<(Tensor, usize)> {
        let (rows, vocab) = dims2(self, "cross_entropy_sum")?;
        if targets.len() != rows {
            return Err(Error::contract(format!(
                "cross_entropy_sum: {rows} logit rows but {} targets",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::contract(format!(
                "cross_entropy_sum: smoothing {smoothing} outside [0, 1)"
            )));
        }
        if score_from >= rows {
            return Err(Error::contract(format!(
                "cross_entropy_sum: score_from {score_from} leaves no scored rows of {rows}"
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::input(format!(
                "cross_entropy_sum: target {bad} out of range for vocab {vocab}"
            )));
        }
        let count = rows - score_from;
        let uniform = smoothing / vocab as f64;
        let mut total = 0.0;
        for p in score_from..rows {
            let x = &self.data()[p * vocab..(p + 1) * vocab];
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mean_x: f64 = x.iter().sum::<f64>() / vocab as f64;
            total += log_z - (1.0 - smoothing) * x[targets[p]] - smoothing * mean_x;
        }
        let logits = self.clone();
        let targets_saved = targets.to_vec();
        let loss = Tensor::from_op(vec![], vec![total], &[self], move |up| {
            let mut back = vec![0.0; rows * vocab];
            for p in score_from..rows {
                let x = &logits.data()[p * vocab..(p + 1) * vocab];
                let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut probs: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = probs.iter().sum();
                for (j, prob) in probs.iter_mut().enumerate() {
                    *prob /= z;
                    let mut q = uniform;
                    if j == targets_saved[p] {
                        q += 1.0 - smoothing;
                    }
                    back[p * vocab + j] = up[0] * (*prob - q);
                }
            }
            vec![Some(back)]
        });
        Ok((loss, count))
    }

    /// Index of the largest value in each row (first on ties).
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (rows, cols) = rows_cols(self, "argmax_rows")?;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &self.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (j, &v) in x.iter().enumerate() {
                if v > x[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }
}

/// Concatenate along columns: rank-1 inputs join into one long vector,
/// rank-2 inputs with equal row counts join side by side.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::contract("concat_cols: no inputs".to_string()));
    };
    if parts.iter().all(|p| p.rank() == 1) {
        let widths: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        let mut out = Vec::with_capacity(widths.iter().sum());
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let total = out.len();
        return Ok(Tensor::from_op(vec![total], out, parts, move |up| {
            let mut offset = 0;
            widths
                .iter()
                .map(|&w| {
                    let piece = up[offset..offset + w].to_vec();
                    offset += w;
                    Some(piece)
                })
                .collect()
        }));
    }
    let (rows, _) = dims2(first, "concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = dims2(p, "concat_cols")?;
        if r != rows {
            return Err(shape_err("concat_cols", first, p));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    Ok(Tensor::from_op(
        vec![rows, total],
        out,
        parts,
        move |up| {
            let mut pieces: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; rows * w]).collect();
            for r in 0..rows {
                let mut offset = 0;
                for (piece, &w) in pieces.iter_mut().zip(&widths) {
                    piece[r * w..(r + 1) * w]
                        .copy_from_slice(&up[r * total + offset..r * total + offset + w]);
                    offset += w;
                }
            }
            pieces.into_iter().map(Some).collect()
        },
    ))
}

/// Stack equal-length rank-1 tensors into the rows of a matrix.
pub fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::contract("stack_rows: no inputs".to_string()));
    };
    let n = first.numel();
    let mut out = Vec::with_capacity(parts.len() * n);
    for p in parts {
        if p.rank() != 1 || p.numel() != n {
            return Err(shape_err("stack_rows", first, p));
        }
        out.extend_from_slice(p.data());
    }
    let rows = parts.len();
    Ok(Tensor::from_op(vec![rows, n], out, parts, move |up| {
        (0..rows)
            .map(|r| Some(up[r * n..(r + 1) * n].to_vec()))
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_known_product() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn transposed_kernels_match_explicit_transposes() {
        let a = t2(2, 3, &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]);
        let b = t2(4, 3, &[0.2, 1.0, -0.7, 2.0, 0.0, 1.5, -1.0, 0.3, 0.9, 0.4, -0.6, 2.2]);
        let via_kernel = matmul_nt(a.data(), b.data(), 2, 3, 4);
        let via_transpose = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(via_kernel, via_transpose.data());

        let c = t2(2, 4, &[1.0, 0.0, -1.0, 2.0, 0.5, 0.5, 3.0, -2.0]);
        let via_kernel = matmul_tn(a.data(), c.data(), 2, 3, 4);
        let via_transpose = a.transpose().unwrap().matmul(&c).unwrap();
        assert_eq!(via_kernel, via_transpose.data());
    }

    #[test]
    fn row_broadcast_add_and_mul() {
        let x = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = Tensor::from_vec(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        assert_eq!(
            x.add(&v).unwrap().data(),
            &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]
        );
        assert_eq!(
            x.mul(&v).unwrap().data(),
            &[10.0, 40.0, 90.0, 40.0, 100.0, 180.0]
        );
    }

    #[test]
    fn column_scaling_grad_sums_over_rows() {
        let x = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = Tensor::param(&[2], vec![5.0, 6.0]).unwrap();
        let loss = x.mul(&z).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(z.grad().unwrap(), vec![1.0 + 3.0, 2.0 + 4.0]);
        assert_eq!(x.grad().unwrap(), vec![5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn slices_deposit_gradient_in_place() {
        let x = Tensor::param(&[2, 4], vec![0.0; 8]).unwrap();
        let loss = x.slice_cols(1, 3).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(
            x.grad().unwrap(),
            vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]
        );
        x.zero_grad();
        let loss = x.slice_rows(1, 2).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(
            x.grad().unwrap(),
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn concat_and_stack_route_gradients_to_sources() {
        let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::param(&[3], vec![3.0, 4.0, 5.0]).unwrap();
        let joined = concat_cols(&[&a, &b]).unwrap();
        assert_eq!(joined.shape(), &[5]);
        assert_eq!(joined.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        joined.sum().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0, 1.0]);

        let r0 = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let r1 = Tensor::param(&[2], vec![3.0, 4.0]).unwrap();
        let stacked = stack_rows(&[&r0, &r1]).unwrap();
        assert_eq!(stacked.shape(), &[2, 2]);
        stacked.slice_rows(1, 2).unwrap().sum().unwrap().backward().unwrap();
        assert!(r0.grad().is_none() || r0.grad().unwrap() == vec![0.0, 0.0]);
        assert_eq!(r1.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let x = t2(2, 3, &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let y = x.softmax_rows().unwrap();
        for r in 0..2 {
            let row_sum: f64 = y.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
        assert!(y.data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn softmax_survives_mask_magnitude_inputs() {
        let x = t2(1, 3, &[0.3, MASK_VALUE, MASK_VALUE]);
        let y = x.softmax_rows().unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        assert_eq!(&y.data()[1..], &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = t2(2, 4, &[1.0, 2.0, 3.0, 4.0, -10.0, 0.0, 10.0, 20.0]);
        let gamma = Tensor::ones(&[4]);
        let beta = Tensor::zeros(&[4]);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        for r in 0..2 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "row {r} var {var}");
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        let x = Tensor::from_vec(&[3], vec![0.0, 100.0, -100.0]).unwrap();
        let y = x.gelu();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 100.0).abs() < 1e-9);
        assert!(y.data()[2].abs() < 1e-9);
        // Precomputed from the tanh form at x = 1: 0.5·(1 + tanh(√(2/π)·1.044715)).
        let one = Tensor::from_vec(&[1], vec![1.0]).unwrap().gelu();
        assert!((one.data()[0] - 0.8411919906082768).abs() < 1e-12);
    }

    #[test]
    fn embedding_rows_and_scatter_add() {
        let table = Tensor::param(&[3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();
        let picked = table.embedding_lookup(&[2, 0, 2]).unwrap();
        assert_eq!(picked.data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        picked.sum().unwrap().backward().unwrap();
        // Row 2 was gathered twice, so its gradient doubles.
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(table.embedding_lookup(&[3]).is_err());
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let scores = Tensor::zeros(&[3, 3]);
        let masked = scores.causal_mask_add().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v = masked.data()[i * 3 + j];
                if j > i {
                    assert_eq!(v, MASK_VALUE);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        let probs = masked.softmax_rows().unwrap();
        assert_eq!(probs.data()[1], 0.0, "future attention must be exactly zero");
        assert!((probs.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smoothed_cross_entropy_matches_hand_value() {
        // One row, vocab 4, logits [2,0,0,0], target 0, smoothing 0.1:
        // loss = ln(e² + 3) − 0.9·2 − 0.025·2 = 0.49075295391313123.
        let logits = t2(1, 4, &[2.0, 0.0, 0.0, 0.0]);
        let (loss, count) = logits.cross_entropy_sum(&[0], 0.1, 0).unwrap();
        assert_eq!(count, 1);
        assert!((loss.item().unwrap() - 0.490_752_953_913_131_23).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_skips_rows_before_score_from() {
        let logits = Tensor::param(&[3, 4], vec![0.0; 12]).unwrap();
        let (loss, count) = logits.cross_entropy_sum(&[1, 2, 3], 0.0, 1).unwrap();
        assert_eq!(count, 2);
        // Uniform logits: each scored row costs ln 4.
        assert!((loss.item().unwrap() - 2.0 * 4.0_f64.ln()).abs() < 1e-12);
        loss.backward().unwrap();
        let g = logits.grad().unwrap();
        assert!(g[..4].iter().all(|&v| v == 0.0), "unscored row must not leak");
        // Scored rows: p − onehot = 0.25 everywhere except 0.25 − 1 at the target.
        assert!((g[4 + 2] - (0.25 - 1.0)).abs() < 1e-12);
        assert!((g[4] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_degenerate_calls() {
        let logits = t2(2, 4, &[0.0; 8]);
        assert!(logits.cross_entropy_sum(&[0], 0.1, 0).is_err(), "target count");
        assert!(logits.cross_entropy_sum(&[0, 1], 1.0, 0).is_err(), "smoothing 1");
        assert!(logits.cross_entropy_sum(&[0, 1], 0.1, 2).is_err(), "empty score range");
        assert!(logits.cross_entropy_sum(&[0, 9], 0.1, 0).is_err(), "target vs vocab");
    }

    #[test]
    fn argmax_rows_first_on_ties() {
        let x = t2(2, 3, &[1.0, 3.0, 3.0, -1.0, -5.0, -2.0]);
        assert_eq!(x.argmax_rows().unwrap(), vec![1, 0]);
    }

    #[test]
    fn frozen_operand_receives_no_gradient() {
        let frozen = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let trained = Tensor::param(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = frozen.matmul(&trained).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert!(frozen.grad().is_none());
        assert!(trained.grad().is_some());
    }
}
