//! Dot-product, kernel and linear attention over row-major `N×D` matrices.
//!
//! Linear attention replaces `exp(qᵀk)` by its first-order expansion on
//! L2-normalized rows, `sim(q, k) = 1 + q̂ᵀk̂ ∈ [0, 2]`. Because the
//! similarity factorizes, row `i` of the output is
//!
//! ```text
//!     (Σ_j v_j + q̂_i · (K̂ᵀ V)) / (N + q̂_i · Σ_j k̂_j)
//! ```
//!
//! and the `D_k×D_v` summary `K̂ᵀV` is shared by every query, so no `N×N`
//! matrix is ever formed.

use crate::autodiff::gemm::gemm;
use crate::autodiff::{init_conv, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const DEFAULT_EPS: f64 = 1e-12;

/// Normalizers at or below this value are reported as degenerate.
pub const DEGENERATE_THRESHOLD: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    DotProduct,
    Kernel,
    Linear,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::DotProduct, Variant::Kernel, Variant::Linear];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DotProduct => "dot",
            Variant::Kernel => "kernel",
            Variant::Linear => "linear",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant {s:?} (dot, kernel, linear)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_k: usize,
    pub d_v: usize,
    pub variant: Variant,
    pub eps: f64,
}

impl AttentionConfig {
    pub fn new(d_k: usize, d_v: usize, variant: Variant) -> Result<Self> {
        if d_k == 0 || d_v == 0 {
            return Err(Error::Config(format!("attention dims must be >= 1, got D_k={d_k}, D_v={d_v}")));
        }
        Ok(Self {
            d_k,
            d_v,
            variant,
            eps: DEFAULT_EPS,
        })
    }

    /// `D = D_v = 2·D_k = 64`, the configuration of the complexity curves.
    pub fn benchmark_default(variant: Variant) -> Self {
        Self {
            d_k: 32,
            d_v: 64,
            variant,
            eps: DEFAULT_EPS,
        }
    }

    /// Applies the configured mechanism. `Kernel` uses the normalized feature
    /// map of [`normalized_feature_map`] on both sides.
    pub fn apply(&self, tape: &Tape, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        match self.variant {
            Variant::DotProduct => dot_product_attention(tape, q, k, v),
            Variant::Linear => linear_attention(tape, q, k, v, self.eps),
            Variant::Kernel => {
                let map = |t: &Tape, x: &Tensor| normalized_feature_map(t, x, self.eps);
                kernel_attention(tape, q, k, v, map, map)
            }
        }
    }
}

/// Query/key/value projection matrices.
#[derive(Clone, Debug)]
pub struct ProjectionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl ProjectionWeights {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        if w_q.rank() != 2 || w_q.shape() != w_k.shape() {
            return Err(Error::dim("projection W_q/W_k", w_q.shape(), w_k.shape()));
        }
        if w_v.rank() != 2 || w_v.shape()[0] != w_q.shape()[0] {
            return Err(Error::dim("projection W_q/W_v", w_q.shape(), w_v.shape()));
        }
        Ok(Self { w_q, w_k, w_v })
    }
}

/// `Q = X·W_q`, `K = X·W_k`, `V = X·W_v`.
pub fn project_qkv(tape: &Tape, x: &Tensor, w: &ProjectionWeights) -> Result<(Tensor, Tensor, Tensor)> {
    Ok((tape.matmul(x, &w.w_q)?, tape.matmul(x, &w.w_k)?, tape.matmul(x, &w.w_v)?))
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = |t: &Tensor| match *t.shape() {
        [n, d] => Ok((n, d)),
        _ => Err(Error::Usage(format!("attention operands must be N×D, got {:?}", t.shape()))),
    };
    let (nq, dq) = dims(q)?;
    let (nk, dk) = dims(k)?;
    let (nv, dv) = dims(v)?;
    if dq != dk {
        return Err(Error::dim("attention Q/K", q.shape(), k.shape()));
    }
    if nq != nk || nk != nv {
        return Err(Error::dim("attention K/V", k.shape(), v.shape()));
    }
    Ok((nq, dk, dv))
}

fn guard_normalizer(den: &Tensor) -> Result<()> {
    match den.data().iter().position(|&d| !(d > DEGENERATE_THRESHOLD)) {
        Some(row) => Err(Error::DegenerateKernel {
            row,
            value: den.data()[row],
        }),
        None => Ok(()),
    }
}

/// `softmax_row(Q·Kᵀ)·V`. Materializes the `N×N` weight matrix.
pub fn dot_product_attention(tape: &Tape, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, &kt)?;
    let weights = tape.softmax_rows(&scores)?;
    tape.matmul(&weights, v)
}

/// Row-by-row reference for [`dot_product_attention`]: each weight row is
/// formed, max-shifted and normalized on its own.
pub fn dot_product_attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, d_k, d_v) = check_qkv(q, k, v)?;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; n * d_v];
    let mut w = vec![0.0; n];
    for i in 0..n {
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = (0..d_k).map(|d| qd[i * d_k + d] * kd[j * d_k + d]).sum();
        }
        let max = w.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        w.iter_mut().for_each(|x| *x = (*x - max).exp());
        let total: f64 = w.iter().sum();
        for (j, wj) in w.iter().enumerate() {
            for d in 0..d_v {
                out[i * d_v + d] += wj / total * vd[j * d_v + d];
            }
        }
    }
    Tensor::from_vec(&[n, d_v], out)
}

/// Factorized attention `sim(q, k) = φ(q)ᵀψ(k)`, evaluated as
/// `φ(Q)·(ψ(K)ᵀV)` over the per-row scalar `φ(q_i)ᵀ Σ_j ψ(k_j)`.
///
/// The caller guarantees `φ(q)ᵀψ(k) ≥ 0`.
pub fn kernel_attention<Phi, Psi>(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    phi: Phi,
    psi: Psi,
) -> Result<Tensor>
where
    Phi: Fn(&Tape, &Tensor) -> Result<Tensor>,
    Psi: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let (n, _, _) = check_qkv(q, k, v)?;
    let fq = phi(tape, q)?;
    let fk = psi(tape, k)?;
    if fq.rank() != 2 || fq.shape()[0] != n || fq.shape() != fk.shape() {
        return Err(Error::dim("kernel feature maps", fq.shape(), fk.shape()));
    }
    let features = fk.shape()[1];
    let summary = tape.matmul(&tape.transpose(&fk)?, v)?;
    let key_mass = tape.reshape(&tape.sum_rows(&fk)?, &[features, 1])?;
    let num = tape.matmul(&fq, &summary)?;
    let den = tape.matmul(&fq, &key_mass)?;
    guard_normalizer(&den)?;
    tape.div_rows(&num, &den)
}

/// The feature map `x ↦ [1, x/(‖x‖+eps)]`, whose inner products are
/// exactly the linear-attention similarity `1 + q̂ᵀk̂`.
pub fn normalized_feature_map(tape: &Tape, x: &Tensor, eps: f64) -> Result<Tensor> {
    let n = x.shape()[0];
    let unit = tape.l2_normalize_rows(x, eps)?;
    tape.concat(&[&Tensor::ones(&[n, 1]), &unit], 1)
}

/// Rows per block of the streaming passes; keeps each block's working set in cache.
pub const STREAM_BLOCK_ROWS: usize = 256;

/// Rows of `src` (`d` wide) divided by `‖row‖₂ + eps` into `dst`. Zero rows stay zero.
fn normalize_rows_into(src: &[f64], d: usize, eps: f64, dst: &mut [f64]) {
    for (row, out) in src.chunks_exact(d).zip(dst.chunks_exact_mut(d)) {
        let denom = row.iter().map(|x| x * x).sum::<f64>().sqrt() + eps;
        if denom > 0.0 {
            out.iter_mut().zip(row).for_each(|(o, x)| *o = x / denom);
        } else {
            out.fill(0.0);
        }
    }
}

/// Pulls `g`, the gradient at `x / (‖x‖ + eps)`, back to `x`, accumulating into `dst`.
fn normalize_rows_backward(src: &[f64], g: &[f64], d: usize, eps: f64, dst: &mut [f64]) {
    for ((row, gr), out) in src.chunks_exact(d).zip(g.chunks_exact(d)).zip(dst.chunks_exact_mut(d)) {
        let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = nrm + eps;
        if denom == 0.0 {
            continue;
        }
        let coupling = if nrm > 0.0 {
            row.iter().zip(gr).map(|(x, g)| x * g).sum::<f64>() / (nrm * denom * denom)
        } else {
            0.0
        };
        for ((o, x), g) in out.iter_mut().zip(row).zip(gr) {
            *o += g / denom - coupling * x;
        }
    }
}

/// Query-independent summaries: `K̂ᵀV` (`D_k×D_v`), `Σ k̂_j` and `Σ v_j`.
struct Summary {
    kv: Vec<f64>,
    key_sum: Vec<f64>,
    value_sum: Vec<f64>,
}

fn summarize(k: &[f64], v: &[f64], n: usize, d_k: usize, d_v: usize, eps: f64) -> Summary {
    let mut s = Summary {
        kv: vec![0.0; d_k * d_v],
        key_sum: vec![0.0; d_k],
        value_sum: vec![0.0; d_v],
    };
    let mut k_hat = vec![0.0; STREAM_BLOCK_ROWS.min(n) * d_k];
    for start in (0..n).step_by(STREAM_BLOCK_ROWS) {
        let rows = STREAM_BLOCK_ROWS.min(n - start);
        let kb = &mut k_hat[..rows * d_k];
        normalize_rows_into(&k[start * d_k..(start + rows) * d_k], d_k, eps, kb);
        let vb = &v[start * d_v..(start + rows) * d_v];
        gemm(d_k, rows, d_v, kb, true, vb, false, &mut s.kv, 1.0);
        for row in kb.chunks_exact(d_k) {
            s.key_sum.iter_mut().zip(row).for_each(|(a, x)| *a += x);
        }
        for row in vb.chunks_exact(d_v) {
            s.value_sum.iter_mut().zip(row).for_each(|(a, x)| *a += x);
        }
    }
    s
}

/// Numerators `Σv + q̂ᵢ·K̂ᵀV` into `num` and normalizers `N + q̂ᵢ·Σk̂` into `den`
/// for one block of normalized queries.
fn block_terms(q_hat: &[f64], s: &Summary, offset: f64, d_k: usize, d_v: usize, num: &mut [f64], den: &mut [f64]) {
    let rows = den.len();
    for row in num.chunks_exact_mut(d_v) {
        row.copy_from_slice(&s.value_sum);
    }
    gemm(rows, d_k, d_v, q_hat, false, &s.kv, false, num, 1.0);
    for (d, qr) in den.iter_mut().zip(q_hat.chunks_exact(d_k)) {
        *d = offset + qr.iter().zip(&s.key_sum).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Linear attention in `O(N·D_k·D_v)` time. Queries and keys are streamed in
/// blocks, so beyond the output only the summaries and one block of
/// normalized rows are held.
pub fn linear_attention(tape: &Tape, q: &Tensor, k: &Tensor, v: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, d_k, d_v) = check_qkv(q, k, v)?;
    #[cfg(not(feature = "fault-injection"))]
    let offset = n as f64;
    #[cfg(feature = "fault-injection")]
    let offset = n as f64 * (1.0 + 1e-6);

    let summary = summarize(k.data(), v.data(), n, d_k, d_v, eps);
    let mut out = vec![0.0; n * d_v];
    let block = STREAM_BLOCK_ROWS.min(n);
    let mut q_hat = vec![0.0; block * d_k];
    let mut den = vec![0.0; block];
    for start in (0..n).step_by(STREAM_BLOCK_ROWS) {
        let rows = STREAM_BLOCK_ROWS.min(n - start);
        let qb = &mut q_hat[..rows * d_k];
        normalize_rows_into(&q.data()[start * d_k..(start + rows) * d_k], d_k, eps, qb);
        let ob = &mut out[start * d_v..(start + rows) * d_v];
        block_terms(qb, &summary, offset, d_k, d_v, ob, &mut den[..rows]);
        if let Some(i) = den[..rows].iter().position(|&d| !(d > DEGENERATE_THRESHOLD)) {
            return Err(Error::DegenerateKernel {
                row: start + i,
                value: den[i],
            });
        }
        for (row, &d) in ob.chunks_exact_mut(d_v).zip(&den[..rows]) {
            row.iter_mut().for_each(|x| *x /= d);
        }
    }

    let (sq, sk, sv) = (q.shared(), k.shared(), v.shared());
    tape.record("linear_attention", &[q, k, v], vec![n, d_v], out, move |g, needs| {
        let s = summarize(&sk, &sv, n, d_k, d_v, eps);
        let block = STREAM_BLOCK_ROWS.min(n);
        let mut g_kv = vec![0.0; d_k * d_v];
        let mut g_key_sum = vec![0.0; d_k];
        let mut g_value_sum = vec![0.0; d_v];
        let mut gq = needs[0].then(|| vec![0.0; n * d_k]);

        let mut q_hat = vec![0.0; block * d_k];
        let mut num = vec![0.0; block * d_v];
        let mut den = vec![0.0; block];
        let mut g_q_hat = vec![0.0; block * d_k];
        for start in (0..n).step_by(STREAM_BLOCK_ROWS) {
            let rows = STREAM_BLOCK_ROWS.min(n - start);
            let q_rows = &sq[start * d_k..(start + rows) * d_k];
            let (qb, nb, db) = (&mut q_hat[..rows * d_k], &mut num[..rows * d_v], &mut den[..rows]);
            normalize_rows_into(q_rows, d_k, eps, qb);
            block_terms(qb, &s, offset, d_k, d_v, nb, db);
            // nb becomes ∂L/∂num; g_den holds ∂L/∂den per row.
            let gb = &g[start * d_v..(start + rows) * d_v];
            let mut g_den = vec![0.0; rows];
            for (((nr, gr), &d), gd) in nb.chunks_exact_mut(d_v).zip(gb.chunks_exact(d_v)).zip(db.iter()).zip(&mut g_den) {
                *gd = -gr.iter().zip(nr.iter()).map(|(a, b)| a * b).sum::<f64>() / (d * d);
                nr.iter_mut().zip(gr).for_each(|(x, g)| *x = g / d);
            }
            gemm(d_k, rows, d_v, qb, true, nb, false, &mut g_kv, 1.0);
            for ((qr, nr), &gd) in qb.chunks_exact(d_k).zip(nb.chunks_exact(d_v)).zip(&g_den) {
                g_key_sum.iter_mut().zip(qr).for_each(|(a, x)| *a += gd * x);
                g_value_sum.iter_mut().zip(nr).for_each(|(a, x)| *a += x);
            }
            if let Some(gq) = gq.as_mut() {
                let gqh = &mut g_q_hat[..rows * d_k];
                gemm(rows, d_v, d_k, nb, false, &s.kv, true, gqh, 0.0);
                for (row, &gd) in gqh.chunks_exact_mut(d_k).zip(&g_den) {
                    row.iter_mut().zip(&s.key_sum).for_each(|(a, x)| *a += gd * x);
                }
                normalize_rows_backward(q_rows, gqh, d_k, eps, &mut gq[start * d_k..(start + rows) * d_k]);
            }
        }

        let mut gk = needs[1].then(|| vec![0.0; n * d_k]);
        let mut gv = needs[2].then(|| vec![0.0; n * d_v]);
        if gk.is_some() || gv.is_some() {
            let mut k_hat = vec![0.0; block * d_k];
            let mut g_k_hat = vec![0.0; block * d_k];
            for start in (0..n).step_by(STREAM_BLOCK_ROWS) {
                let rows = STREAM_BLOCK_ROWS.min(n - start);
                let k_rows = &sk[start * d_k..(start + rows) * d_k];
                let v_rows = &sv[start * d_v..(start + rows) * d_v];
                let kb = &mut k_hat[..rows * d_k];
                normalize_rows_into(k_rows, d_k, eps, kb);
                if let Some(gv) = gv.as_mut() {
                    let dst = &mut gv[start * d_v..(start + rows) * d_v];
                    for row in dst.chunks_exact_mut(d_v) {
                        row.copy_from_slice(&g_value_sum);
                    }
                    gemm(rows, d_k, d_v, kb, false, &g_kv, false, dst, 1.0);
                }
                if let Some(gk) = gk.as_mut() {
                    let gkh = &mut g_k_hat[..rows * d_k];
                    for row in gkh.chunks_exact_mut(d_k) {
                        row.copy_from_slice(&g_key_sum);
                    }
                    gemm(rows, d_v, d_k, v_rows, false, &g_kv, true, gkh, 1.0);
                    normalize_rows_backward(k_rows, gkh, d_k, eps, &mut gk[start * d_k..(start + rows) * d_k]);
                }
            }
        }
        vec![gq, gk, gv]
    })
}

fn unit(row: &[f64], eps: f64) -> Vec<f64> {
    let denom = row.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
    if denom == 0.0 {
        return vec![0.0; row.len()];
    }
    row.iter().map(|v| v / denom).collect()
}

/// `1 + q̂ᵀk̂` for single rows.
pub fn linear_similarity(q: &[f64], k: &[f64], eps: f64) -> f64 {
    1.0 + unit(q, eps).iter().zip(unit(k, eps)).map(|(a, b)| a * b).sum::<f64>()
}

/// Quadratic reference: every pairwise weight `1 + q̂_iᵀk̂_j` formed
/// explicitly and the weighted average taken row by row. Test harness only.
pub fn linear_attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, d_k, d_v) = check_qkv(q, k, v)?;
    let row = |t: &Tensor, i: usize, d: usize| t.data()[i * d..(i + 1) * d].to_vec();
    let mut out = vec![0.0; n * d_v];
    for i in 0..n {
        let qi = row(q, i, d_k);
        let mut den = 0.0;
        for j in 0..n {
            let w = linear_similarity(&qi, &row(k, j, d_k), eps);
            den += w;
            for (o, vj) in out[i * d_v..(i + 1) * d_v].iter_mut().zip(row(v, j, d_v)) {
                *o += w * vj;
            }
        }
        if !(den > DEGENERATE_THRESHOLD) {
            return Err(Error::DegenerateKernel { row: i, value: den });
        }
        out[i * d_v..(i + 1) * d_v].iter_mut().for_each(|o| *o /= den);
    }
    Tensor::from_vec(&[n, d_v], out)
}

/// Adds the three 1×1 projections of a linear-attention block over
/// `channels` feature channels: query/key to `channels/2`, value to `channels`.
pub fn init_lam(params: &mut ParamSet, prefix: &str, channels: usize, rng: &mut SeededRng) -> Result<()> {
    if !channels.is_multiple_of(2) {
        return Err(Error::Config(format!("linear attention block needs even channels, got {channels}")));
    }
    init_conv(params, &format!("{prefix}.query"), channels / 2, channels, 1, rng);
    init_conv(params, &format!("{prefix}.key"), channels / 2, channels, 1, rng);
    init_conv(params, &format!("{prefix}.value"), channels, channels, 1, rng);
    Ok(())
}

fn conv1x1(tape: &Tape, x: &Tensor, params: &ParamSet, name: &str) -> Result<Tensor> {
    tape.conv2d(
        x,
        params.get(&format!("{name}.weight"))?,
        params.get(&format!("{name}.bias"))?,
        1,
        0,
    )
}

/// Linear attention over the spatial positions of a `B×C×H×W` map.
///
/// Each batch item is flattened to `N = H·W` rows; queries and keys have
/// `C/2` channels and values `C`. Output shape equals input shape.
pub fn lam_block(tape: &Tape, f: &Tensor, params: &ParamSet, prefix: &str) -> Result<Tensor> {
    let &[b, c, h, w] = f.shape() else {
        return Err(Error::Usage(format!("lam_block expects B×C×H×W, got {:?}", f.shape())));
    };
    if c % 2 != 0 {
        return Err(Error::Config(format!("linear attention block needs even channels, got {c}")));
    }
    let n = h * w;
    let q = conv1x1(tape, f, params, &format!("{prefix}.query"))?;
    let k = conv1x1(tape, f, params, &format!("{prefix}.key"))?;
    let v = conv1x1(tape, f, params, &format!("{prefix}.value"))?;

    let rows = |t: &Tensor, bi: usize, ch: usize| -> Result<Tensor> {
        let item = tape.slice(t, 0, bi, 1)?;
        tape.transpose(&tape.reshape(&item, &[ch, n])?)
    };
    let mut outputs = Vec::with_capacity(b);
    for bi in 0..b {
        let out = linear_attention(
            tape,
            &rows(&q, bi, c / 2)?,
            &rows(&k, bi, c / 2)?,
            &rows(&v, bi, c)?,
            DEFAULT_EPS,
        )?;
        outputs.push(tape.reshape(&tape.transpose(&out)?, &[1, c, h, w])?);
    }
    let refs: Vec<&Tensor> = outputs.iter().collect();
    tape.concat(&refs, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn rand(shape: &[usize], rng: &mut SeededRng) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, rng)
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        a.max_abs_diff(b) / scale
    }

    /// The same map built from generic tape ops, for checking the fused op's
    /// values and gradients.
    fn composed_linear(tape: &Tape, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (n, d_k, _) = check_qkv(q, k, v)?;
        let q_hat = tape.l2_normalize_rows(q, DEFAULT_EPS)?;
        let k_hat = tape.l2_normalize_rows(k, DEFAULT_EPS)?;
        let kv = tape.matmul(&tape.transpose(&k_hat)?, v)?;
        let key_sum = tape.reshape(&tape.sum_rows(&k_hat)?, &[d_k, 1])?;
        let num = tape.add_row_broadcast(&tape.matmul(&q_hat, &kv)?, &tape.sum_rows(v)?)?;
        let den = tape.add_scalar(&tape.matmul(&q_hat, &key_sum)?, n as f64)?;
        tape.div_rows(&num, &den)
    }

    #[test]
    fn fused_op_matches_composed_ops_in_value_and_gradient() {
        let mut rng = seeded(31);
        // 600 rows spans three streaming blocks, the last one partial.
        for (n, d_k, d_v) in [(1, 1, 1), (5, 3, 4), (600, 6, 5)] {
            let (q0, k0, v0) = (rand(&[n, d_k], &mut rng), rand(&[n, d_k], &mut rng), rand(&[n, d_v], &mut rng));
            let w = rand(&[n, d_v], &mut rng);
            let grads = |f: &dyn Fn(&Tape, &Tensor, &Tensor, &Tensor) -> Result<Tensor>| {
                let tape = Tape::new();
                let (q, k, v) = (tape.watch(&q0), tape.watch(&k0), tape.watch(&v0));
                let y = f(&tape, &q, &k, &v).unwrap();
                let loss = tape.sum(&tape.mul(&y, &w).unwrap()).unwrap();
                let g = tape.backward(&loss).unwrap();
                (y, g.wrt(&q), g.wrt(&k), g.wrt(&v))
            };
            let fused = grads(&|t, q, k, v| linear_attention(t, q, k, v, DEFAULT_EPS));
            let composed = grads(&composed_linear);
            assert!(rel_err(&fused.0, &composed.0) < 1e-12, "value n={n}");
            assert!(rel_err(&fused.1, &composed.1) < 1e-9, "dq n={n}");
            assert!(rel_err(&fused.2, &composed.2) < 1e-9, "dk n={n}");
            assert!(rel_err(&fused.3, &composed.3) < 1e-9, "dv n={n}");
        }
    }

    /// Row-wise exponential weighting, Σ e^{q·k} v / Σ e^{q·k}.
    fn softmax_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
        let (n, dk) = (q.shape()[0], q.shape()[1]);
        let dv = v.shape()[1];
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            let mut den = 0.0;
            for j in 0..n {
                let s: f64 = (0..dk).map(|d| q.at(&[i, d]) * k.at(&[j, d])).sum();
                let e = s.exp();
                den += e;
                for d in 0..dv {
                    out[i * dv + d] += e * v.at(&[j, d]);
                }
            }
            for d in 0..dv {
                out[i * dv + d] /= den;
            }
        }
        out
    }

    #[test]
    fn projection_examples() {
        let tape = Tape::no_grad();
        let mut rng = seeded(1);
        let w = ProjectionWeights::new(rand(&[4, 2], &mut rng), rand(&[4, 2], &mut rng), rand(&[4, 3], &mut rng)).unwrap();
        let (q, k, v) = project_qkv(&tape, &Tensor::zeros(&[5, 4]), &w).unwrap();
        assert!(q.data().iter().chain(k.data()).chain(v.data()).all(|&x| x == 0.0));

        let x = rand(&[3, 4], &mut rng);
        let ident = ProjectionWeights::new(Tensor::identity(4), rand(&[4, 4], &mut rng), rand(&[4, 2], &mut rng)).unwrap();
        let (q, _, v) = project_qkv(&tape, &x, &ident).unwrap();
        assert_eq!(q, x);
        for i in 0..3 {
            for d in 0..2 {
                let want: f64 = (0..4).map(|c| x.at(&[i, c]) * ident.w_v.at(&[c, d])).sum();
                assert!((v.at(&[i, d]) - want).abs() < 1e-15);
            }
        }
        assert!(ProjectionWeights::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[4, 3]), Tensor::zeros(&[4, 2])).is_err());
    }

    #[test]
    fn dot_product_examples() {
        let tape = Tape::no_grad();
        let mut rng = seeded(2);
        let v1 = rand(&[1, 3], &mut rng);
        let out = dot_product_attention(&tape, &rand(&[1, 2], &mut rng), &rand(&[1, 2], &mut rng), &v1).unwrap();
        assert!(out.max_abs_diff(&v1) < 1e-15);

        let key_row = rand(&[1, 2], &mut rng);
        let k = tape.concat(&[&key_row, &key_row, &key_row, &key_row], 0).unwrap();
        let v = rand(&[4, 3], &mut rng);
        let out = dot_product_attention(&tape, &rand(&[4, 2], &mut rng), &k, &v).unwrap();
        let mean = tape.scale(&tape.sum_rows(&v).unwrap(), 0.25).unwrap();
        for i in 0..4 {
            for d in 0..3 {
                assert!((out.at(&[i, d]) - mean.at(&[0, d])).abs() < 1e-15);
            }
        }

        let (q, k, v) = (rand(&[3, 2], &mut rng), rand(&[3, 2], &mut rng), rand(&[3, 2], &mut rng));
        let out = dot_product_attention(&tape, &q, &k, &v).unwrap();
        let want = softmax_oracle(&q, &k, &v);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_examples() {
        let tape = Tape::no_grad();
        let mut rng = seeded(3);
        let v1 = rand(&[1, 8], &mut rng);
        let out = linear_attention(&tape, &rand(&[1, 4], &mut rng), &rand(&[1, 4], &mut rng), &v1, DEFAULT_EPS).unwrap();
        assert!(out.max_abs_diff(&v1) < 1e-15);

        let key_row = rand(&[1, 4], &mut rng);
        let k = tape.concat(&[&key_row; 5], 0).unwrap();
        let v = rand(&[5, 8], &mut rng);
        let out = linear_attention(&tape, &rand(&[5, 4], &mut rng), &k, &v, DEFAULT_EPS).unwrap();
        let mean = tape.scale(&tape.sum_rows(&v).unwrap(), 0.2).unwrap();
        for i in 0..5 {
            for d in 0..8 {
                assert!((out.at(&[i, d]) - mean.at(&[0, d])).abs() < 1e-14);
            }
        }

        let (q, k, v) = (rand(&[16, 4], &mut rng), rand(&[16, 4], &mut rng), rand(&[16, 8], &mut rng));
        let fast = linear_attention(&tape, &q, &k, &v, DEFAULT_EPS).unwrap();
        let slow = linear_attention_oracle(&q, &k, &v, DEFAULT_EPS).unwrap();
        assert!(rel_err(&fast, &slow) <= 1e-12);
    }

    #[test]
    fn oracle_trivial_cases() {
        let mut rng = seeded(4);
        let v1 = rand(&[1, 3], &mut rng);
        let out = linear_attention_oracle(&rand(&[1, 2], &mut rng), &rand(&[1, 2], &mut rng), &v1, DEFAULT_EPS).unwrap();
        assert!(out.max_abs_diff(&v1) < 1e-15);

        let row = [0.3, -0.2, 0.9];
        let v = Tensor::matrix(&[&row, &row, &row, &row]).unwrap();
        let out = linear_attention_oracle(&rand(&[4, 2], &mut rng), &rand(&[4, 2], &mut rng), &v, DEFAULT_EPS).unwrap();
        for i in 0..4 {
            for (d, &r) in row.iter().enumerate() {
                assert!((out.at(&[i, d]) - r).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kernel_with_normalized_map_is_linear_attention() {
        let tape = Tape::no_grad();
        let mut rng = seeded(5);
        let (q, k, v) = (rand(&[12, 3], &mut rng), rand(&[12, 3], &mut rng), rand(&[12, 5], &mut rng));
        let linear = linear_attention(&tape, &q, &k, &v, DEFAULT_EPS).unwrap();
        let kernel = AttentionConfig::new(3, 5, Variant::Kernel).unwrap().apply(&tape, &q, &k, &v).unwrap();
        assert!(rel_err(&kernel, &linear) <= 1e-14);
    }

    #[test]
    fn kernel_single_row_and_squared_map() {
        let tape = Tape::no_grad();
        let mut rng = seeded(6);
        let square = |t: &Tape, x: &Tensor| t.mul(x, x);
        let v1 = rand(&[1, 2], &mut rng);
        let out = kernel_attention(&tape, &rand(&[1, 3], &mut rng), &rand(&[1, 3], &mut rng), &v1, square, square).unwrap();
        assert!(out.max_abs_diff(&v1) < 1e-14);

        // sim(q, k) = Σ_d q_d² k_d², summed pair by pair
        let (q, k, v) = (rand(&[8, 3], &mut rng), rand(&[8, 3], &mut rng), rand(&[8, 4], &mut rng));
        let out = kernel_attention(&tape, &q, &k, &v, square, square).unwrap();
        for i in 0..8 {
            let mut num = [0.0; 4];
            let mut den = 0.0;
            for j in 0..8 {
                let s: f64 = (0..3).map(|d| q.at(&[i, d]).powi(2) * k.at(&[j, d]).powi(2)).sum();
                den += s;
                for (dd, n) in num.iter_mut().enumerate() {
                    *n += s * v.at(&[j, dd]);
                }
            }
            for (d, &n) in num.iter().enumerate() {
                assert!((out.at(&[i, d]) - n / den).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn kernel_degenerate_normalizer_names_row() {
        let tape = Tape::no_grad();
        let q = Tensor::matrix(&[&[1.0, 1.0], &[0.0, 0.0]]).unwrap();
        let k = Tensor::matrix(&[&[1.0, 0.0], &[0.5, 0.5]]).unwrap();
        let v = Tensor::ones(&[2, 2]);
        let identity = |_: &Tape, x: &Tensor| Ok(x.clone());
        let err = kernel_attention(&tape, &q, &k, &v, identity, identity).unwrap_err();
        assert!(matches!(err, Error::DegenerateKernel { row: 1, .. }), "{err}");
    }

    #[test]
    fn zero_rows_weigh_one() {
        assert_eq!(linear_similarity(&[0.0, 0.0], &[3.0, -1.0], DEFAULT_EPS), 1.0);
        assert!(linear_similarity(&[1.0, 0.0], &[-2.0, 0.0], DEFAULT_EPS).abs() < 1e-11);
    }

    #[test]
    fn mismatched_operands_are_rejected() {
        let tape = Tape::no_grad();
        let err = linear_attention(&tape, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[4, 3]), &Tensor::zeros(&[4, 2]), DEFAULT_EPS);
        assert!(matches!(err, Err(Error::Dimension { .. })));
        let err = dot_product_attention(&tape, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[3, 2]));
        assert!(matches!(err, Err(Error::Dimension { .. })));
        assert!(AttentionConfig::new(0, 4, Variant::Linear).is_err());
    }

    #[test]
    fn lam_block_preserves_shape_and_is_permutation_equivariant() {
        let mut rng = seeded(9);
        let mut params = ParamSet::new();
        init_lam(&mut params, "lam", 4, &mut rng).unwrap();
        let tape = Tape::no_grad();
        let f = rand(&[2, 4, 3, 3], &mut rng);
        let out = lam_block(&tape, &f, &params, "lam").unwrap();
        assert_eq!(out.shape(), f.shape());

        // reverse the 9 pixel positions in every channel plane
        let perm: Vec<usize> = (0..9).rev().collect();
        let permute = |t: &Tensor| {
            let mut data = t.to_vec();
            for plane in data.chunks_exact_mut(9) {
                let orig = plane.to_vec();
                for (dst, &src) in plane.iter_mut().zip(&perm) {
                    *dst = orig[src];
                }
            }
            Tensor::from_vec(t.shape(), data).unwrap()
        };
        let out_p = lam_block(&tape, &permute(&f), &params, "lam").unwrap();
        assert!(out_p.max_abs_diff(&permute(&out)) < 1e-14);

        let mut odd = ParamSet::new();
        assert!(init_lam(&mut odd, "lam", 3, &mut rng).is_err());
    }
}
