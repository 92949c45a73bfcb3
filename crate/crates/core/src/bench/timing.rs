//! Wall-clock timing of the library attention kernels.

use std::fmt::Write as _;
use std::time::Instant;

use super::cost::{macc_model, memory_model, projection_macc};
use crate::attention::{dot_product_attention_oracle, linear_attention_oracle, AttentionConfig, Variant};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Admits dot-product attention up to `N = 8192` at `D_k = 32, D_v = 64`.
pub const DEFAULT_CAP_BYTES: u64 = 1_280 * 1024 * 1024;

const GATE_ROWS: usize = 48;
const GATE_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct TimingConfig {
    pub d_k: usize,
    pub d_v: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Rows whose modelled peak exceeds this are refused.
    pub cap_bytes: u64,
    /// Must be 1; timing is single-threaded.
    pub threads: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            d_k: 32,
            d_v: 64,
            repetitions: 5,
            warmup: 1,
            seed: 42,
            cap_bytes: DEFAULT_CAP_BYTES,
            threads: 1,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threads != 1 {
            return Err(Error::Config(format!(
                "timing runs single-threaded, {} threads requested",
                self.threads
            )));
        }
        if self.repetitions < 5 {
            return Err(Error::Config(format!("need at least 5 repetitions, got {}", self.repetitions)));
        }
        AttentionConfig::new(self.d_k, self.d_v, Variant::Linear).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub variant: Variant,
    pub n: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub macc: u64,
    pub projection_macc: u64,
    pub peak_elements: u64,
    /// `None` when the row was refused for exceeding the capacity cap.
    pub median_ns: Option<u64>,
}

impl TimingRow {
    pub fn modelled(variant: Variant, n: usize, d_k: usize, d_v: usize) -> Self {
        Self {
            variant,
            n,
            d_k,
            d_v,
            macc: macc_model(n, d_k, d_v, variant),
            projection_macc: projection_macc(n, d_v, d_k, d_v),
            peak_elements: memory_model(n, d_k, d_v, variant).peak_elements(),
            median_ns: None,
        }
    }
}

fn inputs(n: usize, cfg: &TimingConfig) -> (Tensor, Tensor, Tensor) {
    let mut r = rng::derive(cfg.seed, n as u64);
    let q = Tensor::uniform(&[n, cfg.d_k], -1.0, 1.0, &mut r);
    let k = Tensor::uniform(&[n, cfg.d_k], -1.0, 1.0, &mut r);
    let v = Tensor::uniform(&[n, cfg.d_v], -1.0, 1.0, &mut r);
    (q, k, v)
}

/// One untimed evaluation of the library kernel, exactly as timed.
pub fn time_attention(variant: Variant, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let cfg = AttentionConfig::new(q.shape()[1], v.shape()[1], variant)?;
    cfg.apply(&Tape::no_grad(), q, k, v)
}

/// Checks the kernel against its quadratic reference on a small instance.
/// Returns the max relative error.
pub fn oracle_gate(variant: Variant, cfg: &TimingConfig) -> Result<f64> {
    let (q, k, v) = inputs(GATE_ROWS, cfg);
    let fast = time_attention(variant, &q, &k, &v)?;
    let slow = match variant {
        Variant::DotProduct => dot_product_attention_oracle(&q, &k, &v)?,
        Variant::Linear | Variant::Kernel => linear_attention_oracle(&q, &k, &v, crate::attention::DEFAULT_EPS)?,
    };
    let scale = slow.data().iter().fold(1e-300f64, |m, x| m.max(x.abs()));
    let err = fast.max_abs_diff(&slow) / scale;
    if !(err <= GATE_TOLERANCE) {
        return Err(Error::Data(format!(
            "{variant} attention disagrees with its reference: relative error {err:e}"
        )));
    }
    Ok(err)
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

fn time_row(variant: Variant, n: usize, cfg: &TimingConfig) -> Result<TimingRow> {
    let mut row = TimingRow::modelled(variant, n, cfg.d_k, cfg.d_v);
    let needed = 8 * row.peak_elements;
    if needed > cfg.cap_bytes {
        return Err(Error::Capacity {
            needed,
            cap: cfg.cap_bytes,
        });
    }
    let (q, k, v) = inputs(n, cfg);
    let mut samples = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.warmup + cfg.repetitions {
        let start = Instant::now();
        let out = time_attention(variant, &q, &k, &v)?;
        let elapsed = start.elapsed().as_nanos() as u64;
        drop(out);
        if rep >= cfg.warmup {
            samples.push(elapsed);
        }
    }
    row.median_ns = Some(median(samples));
    Ok(row)
}

/// Times `variant` at every `N` in `ns`. The outer error covers invalid
/// configurations and a failed oracle gate; per-row errors are capacity
/// refusals.
pub fn run_timing(variant: Variant, ns: &[usize], cfg: &TimingConfig) -> Result<Vec<Result<TimingRow>>> {
    cfg.validate()?;
    oracle_gate(variant, cfg)?;
    Ok(ns.iter().map(|&n| time_row(variant, n, cfg)).collect())
}

/// CSV for log-log plotting. Refused rows keep their modelled columns and an
/// empty time.
pub fn emit_curves(rows: &[TimingRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Usage("no timing rows to emit".into()));
    }
    let mut out = String::from(
        "# macc: 1 MACC = multiply + add; softmax exp and normalize count 1 each per weight; divisions count 1; \
         Q/K/V projections excluded and listed in projection_macc\n",
    );
    out.push_str("variant,N,D_k,D_v,macc,projection_macc,peak_elements,median_ns,status\n");
    for r in rows {
        let (time, status) = match r.median_ns {
            Some(ns) => (ns.to_string(), "ok"),
            None => (String::new(), "over_capacity"),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.variant, r.n, r.d_k, r.d_v, r.macc, r.projection_macc, r.peak_elements, time, status
        )
        .expect("write to String");
    }
    Ok(out)
}
