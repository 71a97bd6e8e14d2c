//! Differentiable operations.
//!
//! Each op validates shapes, computes its value eagerly, and registers a
//! backward closure that accumulates vector-Jacobian products into its
//! parents. Backward work is skipped per-parent when the parent does not
//! need a gradient (e.g. the whole momentum/target branch).

use super::{Tensor, TokenMatrix};
use crate::error::{Error, Result};

// ---- raw row-major matmul kernels (shared by forward and backward) ----

/// a [m,k] @ b [k,n] -> [m,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// a [m,p] @ b^T where b is [n,p] -> [m,n] (dot products of rows)
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = 0.0;
            for t in 0..p {
                acc += arow[t] * brow[t];
            }
            *o = acc;
        }
    }
    out
}

/// a^T @ b where a is [p,m], b is [p,n] -> [m,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], p: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for t in 0..p {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &c) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += c * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tensor {
    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected a 2-d tensor, got shape {other:?}"),
            }),
        }
    }

    fn expect_len(&self, len: usize, op: &'static str) -> Result<()> {
        if self.shape() == [len] {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                detail: format!("expected shape [{len}], got {:?}", self.shape()),
            })
        }
    }

    fn expect_same_shape(&self, rhs: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() == rhs.shape() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(), rhs.shape()),
            })
        }
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = rhs.expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("[{m},{k}] x [{k2},{n}]"),
            });
        }
        let values = mm_nn(self.values(), rhs.values(), m, k, n);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            values,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                if a.needs_grad() {
                    a.accumulate_grad(&mm_nt(g, b.values(), m, n, k));
                }
                if b.needs_grad() {
                    b.accumulate_grad(&mm_tn(a.values(), g, m, k, n));
                }
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("transpose")?;
        let values = transpose_raw(self.values(), r, c);
        let a = self.clone();
        Ok(Tensor::from_op(vec![c, r], values, vec![self.clone()], move |g, _| {
            a.accumulate_grad(&transpose_raw(g, c, r));
        }))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(rhs, "add")?;
        let values = self.values().iter().zip(rhs.values()).map(|(x, y)| x + y).collect();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                a.accumulate_grad(g);
                b.accumulate_grad(g);
            },
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(rhs, "sub")?;
        let values = self.values().iter().zip(rhs.values()).map(|(x, y)| x - y).collect();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                a.accumulate_grad(g);
                if b.needs_grad() {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    b.accumulate_grad(&neg);
                }
            },
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(rhs, "mul")?;
        let values = self.values().iter().zip(rhs.values()).map(|(x, y)| x * y).collect();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                if a.needs_grad() {
                    let da: Vec<f64> = g.iter().zip(b.values()).map(|(gi, bi)| gi * bi).collect();
                    a.accumulate_grad(&da);
                }
                if b.needs_grad() {
                    let db: Vec<f64> = g.iter().zip(a.values()).map(|(gi, ai)| gi * ai).collect();
                    b.accumulate_grad(&db);
                }
            },
        ))
    }

    /// Broadcast add of a length-m row vector to every row of an [n,m] tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, m) = self.expect_2d("add_row")?;
        bias.expect_len(m, "add_row")?;
        let bv = bias.values();
        let values = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % m])
            .collect();
        let (a, b) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![n, m],
            values,
            vec![self.clone(), bias.clone()],
            move |g, _| {
                a.accumulate_grad(g);
                if b.needs_grad() {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += g[i * m + j];
                        }
                    }
                    b.accumulate_grad(&db);
                }
            },
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let values = self.values().iter().map(|x| x * c).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), values, vec![self.clone()], move |g, _| {
            let da: Vec<f64> = g.iter().map(|x| x * c).collect();
            a.accumulate_grad(&da);
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Add a constant to every element.
    pub fn add_const(&self, c: f64) -> Tensor {
        let values = self.values().iter().map(|x| x + c).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), values, vec![self.clone()], move |g, _| {
            a.accumulate_grad(g);
        })
    }

    pub fn relu(&self) -> Tensor {
        let values = self.values().iter().map(|x| x.max(0.0)).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), values, vec![self.clone()], move |g, out| {
            let da: Vec<f64> = g
                .iter()
                .zip(out)
                .map(|(gi, oi)| if *oi > 0.0 { *gi } else { 0.0 })
                .collect();
            a.accumulate_grad(&da);
        })
    }

    pub fn exp(&self) -> Tensor {
        let values = self.values().iter().map(|x| x.exp()).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), values, vec![self.clone()], move |g, out| {
            let da: Vec<f64> = g.iter().zip(out).map(|(gi, oi)| gi * oi).collect();
            a.accumulate_grad(&da);
        })
    }

    /// Multiply every element by a one-element tensor (used for learnable
    /// loss weights and learnable inverse temperature).
    pub fn mul_scalar_t(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar_t",
                detail: format!("scalar operand has shape {:?}", s.shape()),
            });
        }
        let sv = s.values()[0];
        let values = self.values().iter().map(|x| x * sv).collect();
        let (a, b) = (self.clone(), s.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), s.clone()],
            move |g, _| {
                if a.needs_grad() {
                    let da: Vec<f64> = g.iter().map(|x| x * sv).collect();
                    a.accumulate_grad(&da);
                }
                if b.needs_grad() {
                    let ds: f64 = g.iter().zip(a.values()).map(|(gi, ai)| gi * ai).sum();
                    b.accumulate_grad(&[ds]);
                }
            },
        ))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, m) = self.expect_2d("layer_norm")?;
        gain.expect_len(m, "layer_norm")?;
        bias.expect_len(m, "layer_norm")?;
        let xv = self.values();
        let gv = gain.values();
        let bv = bias.values();
        let mut out = vec![0.0; n * m];
        let mut xhat = vec![0.0; n * m];
        let mut inv_s = vec![0.0; n];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_s[i] = inv;
            for j in 0..m {
                let h = (row[j] - mu) * inv;
                xhat[i * m + j] = h;
                out[i * m + j] = gv[j] * h + bv[j];
            }
        }
        let (x, gn, bs) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g, _| {
                if gn.needs_grad() {
                    let mut dg = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            dg[j] += g[i * m + j] * xhat[i * m + j];
                        }
                    }
                    gn.accumulate_grad(&dg);
                }
                if bs.needs_grad() {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += g[i * m + j];
                        }
                    }
                    bs.accumulate_grad(&db);
                }
                if x.needs_grad() {
                    let gv = gn.values();
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        // w = gain .* g_row; dx = inv_s * (w - mean(w) - xhat * mean(w .* xhat))
                        let mut w_mean = 0.0;
                        let mut wx_mean = 0.0;
                        for j in 0..m {
                            let w = gv[j] * g[i * m + j];
                            w_mean += w;
                            wx_mean += w * xhat[i * m + j];
                        }
                        w_mean /= m as f64;
                        wx_mean /= m as f64;
                        for j in 0..m {
                            let w = gv[j] * g[i * m + j];
                            dx[i * m + j] =
                                inv_s[i] * (w - w_mean - xhat[i * m + j] * wx_mean);
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            },
        ))
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (n, m) = self.expect_2d("softmax_rows")?;
        let xv = self.values();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            softmax_row(&xv[i * m..(i + 1) * m], &mut out[i * m..(i + 1) * m]);
        }
        let a = self.clone();
        Ok(Tensor::from_op(vec![n, m], out, vec![self.clone()], move |g, y| {
            // dx = y .* (g - <g, y>) per row
            let mut dx = vec![0.0; n * m];
            for i in 0..n {
                let gi = &g[i * m..(i + 1) * m];
                let yi = &y[i * m..(i + 1) * m];
                let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    dx[i * m + j] = yi[j] * (gi[j] - dot);
                }
            }
            a.accumulate_grad(&dx);
        }))
    }

    /// Row-wise log(sum(exp(x))) with the max-subtraction trick: [n,m] -> [n].
    pub fn logsumexp_rows(&self) -> Result<Tensor> {
        let (n, m) = self.expect_2d("logsumexp_rows")?;
        let xv = self.values();
        let mut out = vec![0.0; n];
        let mut probs = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                probs[i * m + j] = e;
                sum += e;
            }
            out[i] = mx + sum.ln();
            for j in 0..m {
                probs[i * m + j] /= sum;
            }
        }
        let a = self.clone();
        Ok(Tensor::from_op(vec![n], out, vec![self.clone()], move |g, _| {
            let mut dx = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    dx[i * m + j] = g[i] * probs[i * m + j];
                }
            }
            a.accumulate_grad(&dx);
        }))
    }

    /// Row-wise l2 normalization onto the unit sphere. Accepts a vector
    /// (treated as one row) or an [n,m] tensor. Near-zero rows are an error.
    pub fn l2_normalize(&self) -> Result<Tensor> {
        let (n, m) = match self.shape() {
            [m] => (1, *m),
            [n, m] => (*n, *m),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "l2_normalize",
                    detail: format!("expected 1-d or 2-d, got {other:?}"),
                })
            }
        };
        let xv = self.values();
        let mut out = vec![0.0; n * m];
        let mut inv_norm = vec![0.0; n];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::ZeroNormRow { row: i, norm });
            }
            inv_norm[i] = 1.0 / norm;
            for j in 0..m {
                out[i * m + j] = row[j] * inv_norm[i];
            }
        }
        let a = self.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g, y| {
            // dx = (g - y <g, y>) / ||x|| per row
            let mut dx = vec![0.0; n * m];
            for i in 0..n {
                let gi = &g[i * m..(i + 1) * m];
                let yi = &y[i * m..(i + 1) * m];
                let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    dx[i * m + j] = (gi[j] - yi[j] * dot) * inv_norm[i];
                }
            }
            a.accumulate_grad(&dx);
        }))
    }

    /// Main diagonal of a square matrix: [n,n] -> [n].
    pub fn diag(&self) -> Result<Tensor> {
        let (n, m) = self.expect_2d("diag")?;
        if n != m {
            return Err(Error::ShapeMismatch {
                op: "diag",
                detail: format!("expected square, got [{n},{m}]"),
            });
        }
        let values = (0..n).map(|i| self.values()[i * n + i]).collect();
        let a = self.clone();
        Ok(Tensor::from_op(vec![n], values, vec![self.clone()], move |g, _| {
            let mut dx = vec![0.0; n * n];
            for i in 0..n {
                dx[i * n + i] = g[i];
            }
            a.accumulate_grad(&dx);
        }))
    }

    /// Row sums: [n,m] -> [n].
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (n, m) = self.expect_2d("sum_rows")?;
        let xv = self.values();
        let values = (0..n).map(|i| xv[i * m..(i + 1) * m].iter().sum()).collect();
        let a = self.clone();
        Ok(Tensor::from_op(vec![n], values, vec![self.clone()], move |g, _| {
            let mut dx = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    dx[i * m + j] = g[i];
                }
            }
            a.accumulate_grad(&dx);
        }))
    }

    /// Sum of all elements -> rank-0 scalar.
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.values().iter().sum();
        let numel = self.numel();
        let a = self.clone();
        Tensor::from_op(Vec::new(), vec![total], vec![self.clone()], move |g, _| {
            a.accumulate_grad(&vec![g[0]; numel]);
        })
    }

    /// Mean of all elements -> rank-0 scalar.
    pub fn mean_all(&self) -> Tensor {
        let numel = self.numel();
        let total: f64 = self.values().iter().sum();
        let a = self.clone();
        Tensor::from_op(Vec::new(), vec![total / numel as f64], vec![self.clone()], move |g, _| {
            a.accumulate_grad(&vec![g[0] / numel as f64; numel]);
        })
    }

    /// View with a different shape over the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.values().to_vec(),
            vec![self.clone()],
            move |g, _| {
                a.accumulate_grad(g);
            },
        ))
    }

    /// Value copy that blocks the backward path. Identity (same handle) when
    /// no gradient flows through anyway.
    pub fn stop_grad(&self) -> Tensor {
        if !self.needs_grad() {
            return self.clone();
        }
        Tensor::new(self.shape(), self.values().to_vec())
            .expect("existing tensor values are valid by construction")
    }
}

/// Embedding lookup fused with masked mean pooling: averages the embedding
/// rows of each sequence's non-pad tokens. table is [vocab, d]; output [B, d].
/// An all-pad sequence or an out-of-vocab token id is an error.
pub fn embed_mean_pool(table: &Tensor, tokens: &TokenMatrix, pad_id: u32) -> Result<Tensor> {
    let (vocab, d) = table.expect_2d("embed_mean_pool")?;
    let b = tokens.rows();
    let tv = table.values();
    let mut out = vec![0.0; b * d];
    let mut counts = vec![0usize; b];
    for i in 0..b {
        let mut cnt = 0usize;
        for &tok in tokens.row(i) {
            if tok == pad_id {
                continue;
            }
            let t = tok as usize;
            if t >= vocab {
                return Err(Error::TokenOutOfRange { token: tok, vocab });
            }
            let erow = &tv[t * d..(t + 1) * d];
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                orow[j] += erow[j];
            }
            cnt += 1;
        }
        if cnt == 0 {
            return Err(Error::PadOnlySequence { index: i });
        }
        let inv = 1.0 / cnt as f64;
        for v in &mut out[i * d..(i + 1) * d] {
            *v *= inv;
        }
        counts[i] = cnt;
    }
    let tab = table.clone();
    let toks = tokens.clone();
    Ok(Tensor::from_op(vec![b, d], out, vec![table.clone()], move |g, _| {
        let mut dt = vec![0.0; vocab * d];
        for i in 0..b {
            let inv = 1.0 / counts[i] as f64;
            let grow = &g[i * d..(i + 1) * d];
            for &tok in toks.row(i) {
                if tok == pad_id {
                    continue;
                }
                let drow = &mut dt[tok as usize * d..(tok as usize + 1) * d];
                for j in 0..d {
                    drow[j] += grow[j] * inv;
                }
            }
        }
        tab.accumulate_grad(&dt);
    }))
}

#[cfg(test)]
mod tests {
    use super::super::{finite_diff_grad, max_rel_err, Rng, Tensor, TokenMatrix};
    use super::embed_mean_pool;
    use crate::error::{Error, Result};

    /// Compares the analytic gradient of `f` wrt `x` against central finite
    /// differences. `f` must be a pure function of its argument.
    fn fd_check(f: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor, tol: f64) {
        x.clear_grad(); // x may carry a gradient from an earlier check
        let loss = f(x).unwrap();
        loss.backward().unwrap();
        let analytic = x.grad().unwrap();
        let mut probe = |t: &Tensor| f(t);
        let numeric = finite_diff_grad(&mut probe, x, 1e-5).unwrap();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < tol, "max rel err {err:.3e} >= {tol:.1e}");
    }

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.normal()).collect();
        Tensor::param(shape, values).unwrap()
    }

    /// Random weights so test losses have non-uniform gradients.
    fn rand_const(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.normal()).collect();
        Tensor::new(shape, values).unwrap()
    }

    const SEEDS: u64 = 100;

    #[test]
    fn l2_normalize_unit_example() {
        let x = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let y = x.l2_normalize().unwrap();
        assert!((y.values()[0] - 0.6).abs() < 1e-12);
        assert!((y.values()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_scale_invariant() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let x = rand_const(&mut rng, &[3, 5]);
            let c = rng.uniform(0.1, 10.0);
            let y1 = x.l2_normalize().unwrap();
            let y2 = x.scale(c).l2_normalize().unwrap();
            for (a, b) in y1.values().iter().zip(y2.values()) {
                assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn l2_normalize_zero_row_is_error() {
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        match x.l2_normalize() {
            Err(Error::ZeroNormRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected ZeroNormRow, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_uniform_example() {
        let x = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let y = x.softmax_rows().unwrap();
        assert!((y.values()[0] - 0.5).abs() < 1e-15);
        assert!((y.values()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_shift_invariant_and_normalized() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let x = rand_const(&mut rng, &[2, 4]);
            let y1 = x.softmax_rows().unwrap();
            let y2 = x.add_const(rng.uniform(-30.0, 30.0)).softmax_rows().unwrap();
            for (a, b) in y1.values().iter().zip(y2.values()) {
                assert!((a - b).abs() < 1e-12);
            }
            for i in 0..2 {
                let s: f64 = y1.values()[i * 4..(i + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_known_value() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.values(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch_is_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn layer_norm_centers_and_scales_rows() {
        let mut rng = Rng::new(17);
        let x = rand_const(&mut rng, &[4, 8]).scale(3.0).add_const(1.5);
        let gain = Tensor::new(&[8], vec![1.0; 8]).unwrap();
        let bias = Tensor::new(&[8], vec![0.0; 8]).unwrap();
        let eps = 1e-5;
        let y = x.layer_norm(&gain, &bias, eps).unwrap();
        for i in 0..4 {
            let row = &y.values()[i * 8..(i + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12, "row {i} mean {mean}");
            // variance is var/(var+eps); allow slack proportional to eps
            assert!((var - 1.0).abs() < 1e-4, "row {i} var {var}");
        }
    }

    #[test]
    fn stop_grad_product_gives_single_factor_gradient() {
        // loss = sum(stop_grad(x) .* x) => dloss/dx = x, not 2x
        let x = Tensor::param(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let loss = x.stop_grad().mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn embed_mean_pool_averages_non_pad_rows() {
        let table =
            Tensor::param(&[4, 2], vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let toks = TokenMatrix::new(1, 3, vec![1, 2, 0]).unwrap(); // pad id 0
        let out = embed_mean_pool(&table, &toks, 0).unwrap();
        assert_eq!(out.values(), &[2.0, 3.0]);
        // gradient spreads evenly over the two used rows
        let loss = out.sum_all();
        loss.backward().unwrap();
        let g = table.grad().unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn embed_mean_pool_rejects_all_pad_and_out_of_vocab() {
        let table = Tensor::zeros(&[4, 2]);
        let all_pad = TokenMatrix::new(1, 2, vec![0, 0]).unwrap();
        assert!(matches!(
            embed_mean_pool(&table, &all_pad, 0),
            Err(Error::PadOnlySequence { index: 0 })
        ));
        let oov = TokenMatrix::new(1, 2, vec![1, 9]).unwrap();
        assert!(matches!(
            embed_mean_pool(&table, &oov, 0),
            Err(Error::TokenOutOfRange { token: 9, vocab: 4 })
        ));
    }

    // ---- finite-difference agreement for every op, randomized over seeds ----

    #[test]
    fn fd_matmul_lhs_and_rhs() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[4, 2]);
            let w = rand_const(&mut rng, &[3, 2]);
            let bc = b.clone();
            let wc = w.clone();
            fd_check(&move |t: &Tensor| Ok(t.matmul(&bc)?.mul(&wc)?.mean_all()), &a, 1e-6);
            let ac = a.clone();
            fd_check(&move |t: &Tensor| Ok(ac.matmul(t)?.mul(&w)?.mean_all()), &b, 1e-6);
        }
    }

    #[test]
    fn fd_transpose() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let x = rand_tensor(&mut rng, &[3, 4]);
            let w = rand_const(&mut rng, &[4, 3]);
            fd_check(&move |t: &Tensor| Ok(t.transpose()?.mul(&w)?.mean_all()), &x, 1e-6);
        }
    }

    #[test]
    fn fd_elementwise_binary_ops() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let x = rand_tensor(&mut rng, &[2, 3]);
            let y = rand_const(&mut rng, &[2, 3]);
            let w = rand_const(&mut rng, &[2, 3]);
            let (yc, wc) = (y.clone(), w.clone());
            fd_check(&move |t: &Tensor| Ok(t.add(&yc)?.mul(&wc)?.mean_all()), &x, 1e-6);
            let (yc, wc) = (y.clone(), w.clone());
            fd_check(&move |t: &Tensor| Ok(t.sub(&yc)?.mul(&wc)?.mean_all()), &x, 1e-6);
            fd_check(&move |t: &Tensor| Ok(t.mul(&y)?.mul(&w)?.mean_all()), &x, 1e-6);
        }
    }

    #[test]
    fn fd_add_row_both_args() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let x = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[4]);
            let w = rand_const(&mut rng, &[3, 4]);
            let (bc, wc) = (b.clone(), w.clone());
            fd_check(&move |t: &Tensor| Ok(t.add_row(&bc)?.mul(&wc)?.mean_all()), &x, 1e-6);
            let xc = x.clone();
            fd_check(&move |t: &Tensor| Ok(xc.add_row(t)?.mul(&w)?.mean_all()), &b, 1e-6);
        }
    }

    #[test]
    fn fd_scale_add_const_exp() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let x = rand_tensor(&mut rng, &[2, 3]);
            let w = rand_const(&mut rng, &[2, 3]);
            let c = rng.uniform(-2.0, 2.0);
            let wc = w.clone();
            fd_check(
                &move |t: &Tensor| Ok(t.scale(c).add_const(-c).mul(&wc)?.mean_all()),
                &x,
                1e-6,
            );
            fd_check(&move |t: &Tensor| Ok(t.exp().mul(&w)?.mean_all()), &x, 1e-6);
        }
    }

    #[test]
    fn fd_relu_away_from_kink() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            // keep inputs off the non-differentiable point at 0
            let values: Vec<f64> = (0..12)
                .map(|_| {
                    let v = rng.normal();
                    v.signum() * (v.abs() + 0.05)
                })
                .collect();
            let x = Tensor::param(&[3, 4], values).unwrap();
            let w = rand_const(&mut rng, &[3, 4]);
            fd_check(&move |t: &Tensor| Ok(t.relu().mul(&w)?.mean_all()), &x, 1e-6);
        }
    }

    #[test]
    fn fd_layer_norm_all_args() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let x = rand_tensor(&mut rng, &[3, 5]);
            let gain = rand_tensor(&mut rng, &[5]);
            let bias = rand_tensor(&mut rng, &[5]);
            let w = rand_const(&mut rng, &[3, 5]);
            let (gc, bc, wc) = (gain.clone(), bias.clone(), w.clone());
            fd_check(
                &move |t: &Tensor| Ok(t.layer_norm(&gc, &bc, 1e-5)?.mul(&wc)?.mean_all()),
                &x,
                1e-6,
            );
            let (xc, bc, wc) = (x.clone(), bias.clone(), w.clone());
            fd_check(
                &move |t: &Tensor| Ok(xc.layer_norm(t, &bc, 1e-5)?.mul(&wc)?.mean_all()),
                &gain,
                1e-6,
            );
            let xc = x.clone();
            fd_check(
                &move |t: &Tensor| Ok(xc.layer_norm(&gain, t, 1e-5)?.mul(&w)?.mean_all()),
                &bias,
                1e-6,
            );
        }
    }

    #[test]
    fn fd_softmax_and_logsumexp() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let x = rand_tensor(&mut rng, &[3, 4]);
            let w = rand_const(&mut rng, &[3, 4]);
            let wv = rand_const(&mut rng, &[3]);
            fd_check(&move |t: &Tensor| Ok(t.softmax_rows()?.mul(&w)?.mean_all()), &x, 1e-5);
            let x2 = rand_tensor(&mut rng, &[3, 4]);
            fd_check(
                &move |t: &Tensor| Ok(t.logsumexp_rows()?.mul(&wv)?.mean_all()),
                &x2,
                1e-6,
            );
        }
    }

    #[test]
    fn fd_l2_normalize() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let x = rand_tensor(&mut rng, &[3, 4]);
            let w = rand_const(&mut rng, &[3, 4]);
            fd_check(&move |t: &Tensor| Ok(t.l2_normalize()?.mul(&w)?.mean_all()), &x, 1e-6);
        }
    }

    #[test]
    fn fd_reductions_and_reshape() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let x = rand_tensor(&mut rng, &[4, 4]);
            let wv = rand_const(&mut rng, &[4]);
            let (w1, w2) = (wv.clone(), wv.clone());
            fd_check(&move |t: &Tensor| Ok(t.diag()?.mul(&w1)?.mean_all()), &x, 1e-6);
            fd_check(&move |t: &Tensor| Ok(t.sum_rows()?.mul(&w2)?.mean_all()), &x, 1e-6);
            fd_check(&|t: &Tensor| Ok(t.sum_all()), &x, 1e-6);
            fd_check(&|t: &Tensor| Ok(t.mean_all()), &x, 1e-6);
            let w16 = rand_const(&mut rng, &[2, 8]);
            fd_check(
                &move |t: &Tensor| Ok(t.reshape(&[2, 8])?.mul(&w16)?.mean_all()),
                &x,
                1e-6,
            );
        }
    }

    #[test]
    fn fd_mul_scalar_t_both_args() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let x = rand_tensor(&mut rng, &[2, 3]);
            let s = rand_tensor(&mut rng, &[]);
            let w = rand_const(&mut rng, &[2, 3]);
            let (sc, wc) = (s.clone(), w.clone());
            fd_check(&move |t: &Tensor| Ok(t.mul_scalar_t(&sc)?.mul(&wc)?.mean_all()), &x, 1e-6);
            let xc = x.clone();
            fd_check(&move |t: &Tensor| Ok(xc.mul_scalar_t(t)?.mul(&w)?.mean_all()), &s, 1e-6);
        }
    }

    #[test]
    fn fd_embed_mean_pool_table() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let table = rand_tensor(&mut rng, &[6, 3]);
            let toks = TokenMatrix::new(2, 4, vec![1, 3, 0, 0, 5, 5, 2, 0]).unwrap();
            let w = rand_const(&mut rng, &[2, 3]);
            let tk = toks.clone();
            fd_check(
                &move |t: &Tensor| Ok(embed_mean_pool(t, &tk, 0)?.mul(&w)?.mean_all()),
                &table,
                1e-6,
            );
        }
    }
}
