//! Differentiable operations.
//!
//! Every op computes its forward value eagerly and, when an input needs a
//! gradient, records a closure producing the vector-Jacobian product.

use crate::error::{shape_err, Result, TensorError};
use crate::linalg;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(op, self.shape(), other.shape());
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(b.data().iter()).map(|(g, b)| g * b).collect());
                let gb = needs[1].then(|| g.iter().zip(a.data().iter()).map(|(g, a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return shape_err("mul_scalar", self.shape(), s.shape());
        }
        let sv = s.item();
        let data = self.data().iter().map(|v| v * sv).collect();
        let x = self.clone();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| g.iter().map(|v| v * sv).collect());
                let gs = needs[1].then(|| vec![g.iter().zip(x.data().iter()).map(|(g, x)| g * x).sum()]);
                vec![gx, gs]
            }),
        ))
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let saved = out.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().zip(&saved).map(|(g, y)| g * y).collect())]),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let x = self.to_vec();
        let out = x
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| {
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![total],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return shape_err("reshape", self.shape(), shape);
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return shape_err("matmul", self.shape(), other.shape());
        }
        let out = linalg::mm(&self.data(), &other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                // dA = G·Bᵀ, dB = Aᵀ·G
                let ga = needs[0].then(|| linalg::mm_bt(g, &b.data(), m, n, k));
                let gb = needs[1].then(|| linalg::mm_at(&a.data(), g, m, k, n));
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let out = linalg::transpose(&self.data(), m, n);
        Ok(Tensor::from_op(
            out,
            vec![n, m],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(linalg::transpose(g, n, m))]),
        ))
    }

    /// `x[m,n] + b[n]`, broadcasting the bias over rows.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_bias")?;
        if bias.numel() != n {
            return shape_err("add_bias", self.shape(), bias.shape());
        }
        let mut out = self.to_vec();
        {
            let b = bias.data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(b.iter()).for_each(|(o, b)| *o += b);
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), bias.clone()],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| column_sums(g, n));
                vec![Some(g.to_vec()), gb]
            }),
        ))
    }

    /// Row-wise softmax. With `causal`, row `i` only sees columns `0..=i`
    /// and the remaining probabilities are exactly zero.
    pub fn softmax_rows(&self, causal: bool) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        if causal && m != n {
            return Err(TensorError::Config {
                op: "softmax_rows",
                msg: format!("causal softmax needs a square matrix, got {m}x{n}"),
            });
        }
        let x = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let width = if causal { i + 1 } else { n };
            let row = &x[i * n..i * n + width];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..i * n + width];
            let mut z = 0.0;
            for (d, v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        drop(x);
        let saved = out.clone();
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let y = &saved[i * n..(i + 1) * n];
                    let gy = &g[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = y[j] * (gy[j] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Per-row layer normalisation with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("layer_norm")?;
        if gamma.numel() != n {
            return shape_err("layer_norm", self.shape(), gamma.shape());
        }
        if beta.numel() != n {
            return shape_err("layer_norm", self.shape(), beta.shape());
        }
        let x = self.data();
        let gm = gamma.to_vec();
        let bt = beta.data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = gm[j] * h + bt[j];
            }
        }
        drop(x);
        drop(bt);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let h = &xhat[i * n..(i + 1) * n];
                        let gy = &g[i * n..(i + 1) * n];
                        let dh: Vec<f64> = gy.iter().zip(&gm).map(|(g, w)| g * w).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] =
                                rstd[i] / n as f64 * (n as f64 * dh[j] - s1 - h[j] * s2);
                        }
                    }
                    gx
                });
                let ggamma = needs[1].then(|| {
                    let mut acc = vec![0.0; n];
                    for (gy, h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            acc[j] += gy[j] * h[j];
                        }
                    }
                    acc
                });
                let gbeta = needs[2].then(|| column_sums(g, n));
                vec![gx, ggamma, gbeta]
            }),
        ))
    }

    /// Gathers rows `ids` of an embedding table `[V, D]` into `[len(ids), D]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = self.dims2("embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Index {
                op: "embedding",
                index: bad,
                bound: v,
            });
        }
        let table = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&table[i * d..(i + 1) * d]);
        }
        drop(table);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![ids.len(), d],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gt = vec![0.0; v * d];
                for (row, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[row * d + j];
                    }
                }
                vec![Some(gt)]
            }),
        ))
    }

    /// Mean cross-entropy of row-wise softmax against integer targets,
    /// stabilised by subtracting each row's maximum.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (rows, k) = self.dims2("softmax_cross_entropy")?;
        if targets.len() != rows {
            return shape_err("softmax_cross_entropy", self.shape(), &[targets.len()]);
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: k,
            });
        }
        let x = self.data();
        let mut probs = vec![0.0; rows * k];
        let mut loss = 0.0;
        for i in 0..rows {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[targets[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        drop(x);
        let loss = loss / rows as f64;
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _| {
                let scale = g[0] / rows as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * k + t] -= scale;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Scales each row to unit Euclidean norm. A zero row is a contract error.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("l2_normalize_rows")?;
        let x = self.data();
        let mut norms = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TensorError::Contract(format!(
                    "cannot normalise row {i} with norm {norm}"
                )));
            }
            norms[i] = norm;
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        drop(x);
        let saved = out.clone();
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let y = &saved[i * n..(i + 1) * n];
                    let gy = &g[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = (gy[j] - y[j] * dot) / norms[i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Column means of `[m, n]`, as `[1, n]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("mean_rows")?;
        let mut out = column_sums(&self.data(), n);
        out.iter_mut().for_each(|v| *v /= m as f64);
        Ok(Tensor::from_op(
            out,
            vec![1, n],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    gx.extend(g.iter().map(|v| v / m as f64));
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_rows")?;
        if start + len > m {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                bound: m + 1,
            });
        }
        let out = self.data()[start * n..(start + len) * n].to_vec();
        Ok(Tensor::from_op(
            out,
            vec![len, n],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; m * n];
                gx[start * n..(start + len) * n].copy_from_slice(g);
                vec![Some(gx)]
            }),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if start + len > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                bound: n + 1,
            });
        }
        let x = self.data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            vec![m, len],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Stacks rank-2 tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let (_, n) = first.dims2("concat_rows")?;
        let mut rows = Vec::with_capacity(parts.len());
        for p in parts {
            let (m, c) = p.dims2("concat_rows")?;
            if c != n {
                return shape_err("concat_rows", first.shape(), p.shape());
            }
            rows.push(m);
        }
        let total: usize = rows.iter().sum();
        let mut out = Vec::with_capacity(total * n);
        for p in parts {
            out.extend_from_slice(&p.data());
        }
        Ok(Tensor::from_op(
            out,
            vec![total, n],
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                rows.iter()
                    .zip(needs)
                    .map(|(&m, &need)| {
                        let chunk = &g[offset * n..(offset + m) * n];
                        offset += m;
                        need.then(|| chunk.to_vec())
                    })
                    .collect()
            }),
        ))
    }

    /// Joins rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let (m, _) = first.dims2("concat_cols")?;
        let mut cols = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2("concat_cols")?;
            if r != m {
                return shape_err("concat_cols", first.shape(), p.shape());
            }
            cols.push(c);
        }
        let total: usize = cols.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (p, &c) in parts.iter().zip(&cols) {
            let d = p.data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + c].copy_from_slice(&d[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        Ok(Tensor::from_op(
            out,
            vec![m, total],
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                cols.iter()
                    .zip(needs)
                    .map(|(&c, &need)| {
                        let start = offset;
                        offset += c;
                        need.then(|| {
                            let mut part = Vec::with_capacity(m * c);
                            for i in 0..m {
                                part.extend_from_slice(&g[i * total + start..i * total + start + c]);
                            }
                            part
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Splits `img[C,H,W]` into non-overlapping `p×p` patches and maps each
    /// through the shared linear map `weight[D,C,p,p]`, `bias[D]`.
    /// Output rows follow the raster order of the patches.
    pub fn patch_project(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let &[c, h, w] = self.shape() else {
            return Err(TensorError::Config {
                op: "patch_project",
                msg: format!("image must be [C,H,W], got {:?}", self.shape()),
            });
        };
        let &[d, wc, p, p2] = weight.shape() else {
            return Err(TensorError::Config {
                op: "patch_project",
                msg: format!("weight must be [D,C,p,p], got {:?}", weight.shape()),
            });
        };
        if wc != c || p != p2 || p == 0 {
            return shape_err("patch_project", self.shape(), weight.shape());
        }
        if bias.numel() != d {
            return shape_err("patch_project", weight.shape(), bias.shape());
        }
        if h % p != 0 || w % p != 0 {
            return Err(TensorError::Config {
                op: "patch_project",
                msg: format!("image {h}x{w} is not divisible by patch size {p}"),
            });
        }
        let (gh, gw) = (h / p, w / p);
        let tokens = gh * gw;
        let k = c * p * p;
        let patches = extract_patches(&self.data(), c, h, w, p);
        let mut out = linalg::mm_bt(&patches, &weight.data(), tokens, k, d);
        {
            let b = bias.data();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(b.iter()).for_each(|(o, b)| *o += b);
            }
        }
        let wt = weight.clone();
        Ok(Tensor::from_op(
            out,
            vec![tokens, d],
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, needs| {
                let gimg = needs[0].then(|| {
                    let gp = linalg::mm(g, &wt.data(), tokens, d, k);
                    scatter_patches(&gp, c, h, w, p)
                });
                let gw = needs[1].then(|| linalg::mm_at(g, &patches, tokens, d, k));
                let gb = needs[2].then(|| column_sums(g, d));
                vec![gimg, gw, gb]
            }),
        ))
    }
}

fn column_sums(g: &[f64], n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    for row in g.chunks(n) {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    acc
}

/// `[tokens, C·p·p]`, each row laid out channel-major then row-major to
/// match the weight layout `[D, C, p, p]`.
fn extract_patches(img: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let k = c * p * p;
    let mut out = vec![0.0; gh * gw * k];
    for pr in 0..gh {
        for pc in 0..gw {
            let row = &mut out[(pr * gw + pc) * k..(pr * gw + pc + 1) * k];
            for ch in 0..c {
                for i in 0..p {
                    let src = ch * h * w + (pr * p + i) * w + pc * p;
                    row[ch * p * p + i * p..ch * p * p + (i + 1) * p].copy_from_slice(&img[src..src + p]);
                }
            }
        }
    }
    out
}

fn scatter_patches(patches: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let k = c * p * p;
    let mut img = vec![0.0; c * h * w];
    for pr in 0..gh {
        for pc in 0..gw {
            let row = &patches[(pr * gw + pc) * k..(pr * gw + pc + 1) * k];
            for ch in 0..c {
                for i in 0..p {
                    let dst = ch * h * w + (pr * p + i) * w + pc * p;
                    img[dst..dst + p].copy_from_slice(&row[ch * p * p + i * p..ch * p * p + (i + 1) * p]);
                }
            }
        }
    }
    img
}
