//! Differentiable tensor operations recorded on a [`Tape`].

use std::sync::Arc;

use super::gemm::gemm;
use super::tape::Tape;
use super::tensor::{check_rank, Tensor};
use crate::error::{Error, Result};

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Usage(format!(
            "{op} expects a rank-2 tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

pub(crate) fn map4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::Usage(format!(
            "{op} expects a B×C×H×W tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl Tape {
    /// `a · b` for `a: rows×inner`, `b: inner×cols`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix_dims("matmul", a)?;
        let (k2, n) = matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        let (sa, sb) = (a.shared(), b.shared());
        self.record("matmul", &[a, b], vec![m, n], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, &sb, true, &mut ga, 0.0);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, &sa, true, g, false, &mut gb, 0.0);
                gb
            });
            vec![ga, gb]
        })
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = matrix_dims("transpose", a)?;
        let out = transpose_buf(r, c, a.data());
        self.record("transpose", &[a], vec![c, r], out, move |g, _| {
            vec![Some(transpose_buf(c, r, g))]
        })
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.record("add", &[a, b], a.shape().to_vec(), out, |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        })
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let (sa, sb) = (a.shared(), b.shared());
        self.record("mul", &[a, b], a.shape().to_vec(), out, move |g, needs| {
            let ga = needs[0].then(|| g.iter().zip(sb.iter()).map(|(g, y)| g * y).collect());
            let gb = needs[1].then(|| g.iter().zip(sa.iter()).map(|(g, x)| g * x).collect());
            vec![ga, gb]
        })
    }

    pub fn scale(&self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let out = a.data().iter().map(|x| x * factor).collect();
        self.record("scale", &[a], a.shape().to_vec(), out, move |g, _| {
            vec![Some(g.iter().map(|v| v * factor).collect())]
        })
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out = a.data().iter().map(|x| x + c).collect();
        self.record("add_scalar", &[a], a.shape().to_vec(), out, |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.data().iter().map(|&x| x.max(0.0)).collect();
        let sa = a.shared();
        self.record("relu", &[a], a.shape().to_vec(), out, move |g, _| {
            let gx = g
                .iter()
                .zip(sa.iter())
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(gx)]
        })
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let total = a.data().iter().sum();
        let n = a.numel();
        self.record("sum", &[a], vec![1], vec![total], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    /// Reinterprets the element sequence under a new shape. Never copies.
    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        check_rank(shape)?;
        if shape.iter().product::<usize>() != a.numel() {
            return Err(Error::dim("reshape", a.shape(), shape));
        }
        self.record_shared("reshape", &[a], shape.to_vec(), a.shared(), |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// Joins tensors along `axis`; every other extent must agree.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Usage(format!("concat axis {axis} on rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out = vec![0.0; outer * row];
        for o in 0..outer {
            let mut offset = o * row;
            for (p, &w) in parts.iter().zip(&widths) {
                out[offset..offset + w].copy_from_slice(&p.data()[o * w..(o + 1) * w]);
                offset += w;
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        self.record("concat", parts, shape, out, move |g, needs| {
            let mut start = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let s = start;
                    start += w;
                    need.then(|| {
                        let mut gp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row + s..o * row + s + w]);
                        }
                        gp
                    })
                })
                .collect()
        })
    }

    /// The `len` slices starting at `start` along `axis`.
    pub fn slice(&self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = a.rank();
        if axis >= rank || start + len > a.shape()[axis] || len == 0 {
            return Err(Error::Usage(format!(
                "slice [{start}, {}) on axis {axis} of shape {:?}",
                start + len,
                a.shape()
            )));
        }
        let outer: usize = a.shape()[..axis].iter().product();
        let inner: usize = a.shape()[axis + 1..].iter().product();
        let full = a.shape()[axis] * inner;
        let (s, w) = (start * inner, len * inner);
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            out.extend_from_slice(&a.data()[o * full + s..o * full + s + w]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        self.record("slice", &[a], shape, out, move |g, _| {
            let mut ga = vec![0.0; outer * full];
            for o in 0..outer {
                ga[o * full + s..o * full + s + w].copy_from_slice(&g[o * w..(o + 1) * w]);
            }
            vec![Some(ga)]
        })
    }

    /// Nearest-neighbour 2× upsampling of a `B×C×H×W` map.
    pub fn upsample_nearest2x(&self, x: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = map4("upsample_nearest2x", x)?;
        let planes = b * c;
        let (h2, w2) = (2 * h, 2 * w);
        let src = x.data();
        let mut out = vec![0.0; planes * h2 * w2];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for i in 0..h2 {
                let row = &plane[(i / 2) * w..(i / 2 + 1) * w];
                for (j, v) in dst[i * w2..(i + 1) * w2].iter_mut().enumerate() {
                    *v = row[j / 2];
                }
            }
        }
        self.record("upsample_nearest2x", &[x], vec![b, c, h2, w2], out, move |g, _| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                let gp = &g[p * h2 * w2..(p + 1) * h2 * w2];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for i in 0..h2 {
                    for j in 0..w2 {
                        dst[(i / 2) * w + j / 2] += gp[i * w2 + j];
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Row-wise softmax with the row maximum subtracted before exponentiation.
    pub fn softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (n, m) = matrix_dims("softmax_rows", x)?;
        let mut out = x.to_vec();
        softmax_in_place(&mut out, m);
        let y = Arc::new(out);
        let saved = Arc::clone(&y);
        self.record_shared("softmax_rows", &[x], vec![n, m], y, move |g, _| {
            let mut gx = vec![0.0; n * m];
            for r in 0..n {
                let yr = &saved[r * m..(r + 1) * m];
                let gr = &g[r * m..(r + 1) * m];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((o, y), g) in gx[r * m..(r + 1) * m].iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Each row divided by `‖row‖₂ + eps`. Zero rows stay zero.
    pub fn l2_normalize_rows(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, m) = matrix_dims("l2_normalize_rows", x)?;
        if !(eps >= 0.0) {
            return Err(Error::Config(format!("l2 normalization eps must be >= 0, got {eps}")));
        }
        let src = x.data();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &src[r * m..(r + 1) * m];
            let denom = norm(row) + eps;
            if denom > 0.0 {
                for (o, v) in out[r * m..(r + 1) * m].iter_mut().zip(row) {
                    *o = v / denom;
                }
            }
        }
        let sx = x.shared();
        self.record("l2_normalize_rows", &[x], vec![n, m], out, move |g, _| {
            let mut gx = vec![0.0; n * m];
            for r in 0..n {
                let row = &sx[r * m..(r + 1) * m];
                let gr = &g[r * m..(r + 1) * m];
                let nrm = norm(row);
                let denom = nrm + eps;
                if denom == 0.0 {
                    continue;
                }
                // d/dx (x / (‖x‖ + eps)) = I/(‖x‖+eps) - x xᵀ / (‖x‖ (‖x‖+eps)²)
                let coupling = if nrm > 0.0 {
                    row.iter().zip(gr).map(|(x, g)| x * g).sum::<f64>() / (nrm * denom * denom)
                } else {
                    0.0
                };
                for ((o, x), g) in gx[r * m..(r + 1) * m].iter_mut().zip(row).zip(gr) {
                    *o = g / denom - coupling * x;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Column sums of an `N×M` matrix as a `1×M` row.
    pub fn sum_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (n, m) = matrix_dims("sum_rows", x)?;
        let mut out = vec![0.0; m];
        for row in x.data().chunks_exact(m.max(1)).take(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        self.record("sum_rows", &[x], vec![1, m], out, move |g, _| {
            let mut gx = Vec::with_capacity(n * m);
            for _ in 0..n {
                gx.extend_from_slice(g);
            }
            vec![Some(gx)]
        })
    }

    /// Adds the `1×M` row `r` to every row of the `N×M` matrix `x`.
    pub fn add_row_broadcast(&self, x: &Tensor, r: &Tensor) -> Result<Tensor> {
        let (n, m) = matrix_dims("add_row_broadcast", x)?;
        if r.numel() != m {
            return Err(Error::dim("add_row_broadcast", x.shape(), r.shape()));
        }
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(m.max(1)).take(n) {
            row.iter_mut().zip(r.data()).for_each(|(o, v)| *o += v);
        }
        self.record("add_row_broadcast", &[x, r], vec![n, m], out, move |g, needs| {
            let gr = needs[1].then(|| {
                let mut acc = vec![0.0; m];
                for row in g.chunks_exact(m.max(1)).take(n) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![needs[0].then(|| g.to_vec()), gr]
        })
    }

    /// Divides row `i` of the `N×M` matrix `x` by the scalar `d[i]` (`d` has N elements).
    pub fn div_rows(&self, x: &Tensor, d: &Tensor) -> Result<Tensor> {
        let (n, m) = matrix_dims("div_rows", x)?;
        if d.numel() != n {
            return Err(Error::dim("div_rows", x.shape(), d.shape()));
        }
        let mut out = x.to_vec();
        for (row, &den) in out.chunks_exact_mut(m.max(1)).zip(d.data()) {
            row.iter_mut().for_each(|v| *v /= den);
        }
        let (sx, sd) = (x.shared(), d.shared());
        self.record("div_rows", &[x, d], vec![n, m], out, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = g.to_vec();
                for (row, &den) in gx.chunks_exact_mut(m.max(1)).zip(sd.iter()) {
                    row.iter_mut().for_each(|v| *v /= den);
                }
                gx
            });
            let gd = needs[1].then(|| {
                (0..n)
                    .map(|r| {
                        let dot: f64 = g[r * m..(r + 1) * m]
                            .iter()
                            .zip(&sx[r * m..(r + 1) * m])
                            .map(|(g, x)| g * x)
                            .sum();
                        -dot / (sd[r] * sd[r])
                    })
                    .collect()
            });
            vec![gx, gd]
        })
    }
}

pub(crate) fn transpose_buf(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Numerically stable softmax over consecutive rows of length `m`.
pub fn softmax_in_place(buf: &mut [f64], m: usize) {
    if m == 0 {
        return;
    }
    for row in buf.chunks_exact_mut(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
}
