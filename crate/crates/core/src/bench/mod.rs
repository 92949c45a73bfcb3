//! Cost models and the timing harness for dot-product vs. linear attention.

pub mod alloc;
mod cost;
mod timing;

pub use cost::{crossover, macc_model, memory_model, projection_macc, MemoryModel};
pub use timing::{emit_curves, oracle_gate, run_timing, time_attention, TimingConfig, TimingRow, DEFAULT_CAP_BYTES};
