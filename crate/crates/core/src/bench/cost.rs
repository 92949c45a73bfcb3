//! Analytic operation and storage counts.
//!
//! One MACC is one multiply plus one add. Softmax exponentiation and
//! normalization count one MACC per weight each. Element divisions count
//! as one MACC. The shared Q/K/V projections are kept out of both curves and
//! reported by [`projection_macc`].

use crate::attention::{Variant, STREAM_BLOCK_ROWS};

fn n64(x: usize) -> u64 {
    x as u64
}

/// MACC count of one attention evaluation over `n` rows.
///
/// - dot: `N²·D_k` similarities, `N²·D_v` weighting, `2·N²` softmax
/// - linear: `2·N·D_k·D_v` for `K̂ᵀV` and `Q̂·(K̂ᵀV)`, `N·D_k` for the
///   normalizer dot products, `N·D_v` for the numerator add and divide,
///   `2·N·D_k` for the row normalizations
/// - kernel: the linear count with a feature dimension of `D_k + 1`
pub fn macc_model(n: usize, d_k: usize, d_v: usize, variant: Variant) -> u64 {
    let (n, d_k, d_v) = (n64(n), n64(d_k), n64(d_v));
    match variant {
        Variant::DotProduct => n * n * (d_k + d_v + 2),
        Variant::Linear => n * (2 * d_k * d_v + d_k + d_v + 2 * d_k),
        Variant::Kernel => {
            let f = d_k + 1;
            n * (2 * f * d_v + f + d_v + 2 * d_k)
        }
    }
}

/// Projection of `n` rows of width `d_in` to queries, keys and values.
pub fn projection_macc(n: usize, d_in: usize, d_k: usize, d_v: usize) -> u64 {
    n64(n) * n64(d_in) * (2 * n64(d_k) + n64(d_v))
}

/// Peak number of `f64` intermediates live at once, inputs excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryModel {
    /// Similarity scores and normalized weights (dot product only).
    pub weight_matrix: u64,
    /// `D_k×D_v` summary plus the key and value sums (linear and kernel).
    pub state: u64,
    /// Buffers with one entry per row: the output, and for the tape-composed
    /// variants every normalized or transposed operand.
    pub rows: u64,
    /// Fixed-size workspace of the streaming linear kernel: one block of
    /// normalized queries and their normalizers.
    pub scratch: u64,
}

impl MemoryModel {
    pub fn peak_elements(&self) -> u64 {
        self.weight_matrix + self.state + self.rows + self.scratch
    }

    pub fn peak_bytes(&self) -> u64 {
        8 * self.peak_elements()
    }
}

pub fn memory_model(n: usize, d_k: usize, d_v: usize, variant: Variant) -> MemoryModel {
    let (n, d_k, d_v) = (n64(n), n64(d_k), n64(d_v));
    match variant {
        // Kᵀ, scores, weights, output
        Variant::DotProduct => MemoryModel {
            weight_matrix: 2 * n * n,
            state: 0,
            rows: n * (d_k + d_v),
            scratch: 0,
        },
        // Summaries, output, one block of Q̂ and normalizers
        Variant::Linear => MemoryModel {
            weight_matrix: 0,
            state: d_k * d_v + d_k + d_v,
            rows: n * d_v,
            scratch: n.min(n64(STREAM_BLOCK_ROWS)) * (d_k + 1),
        },
        // φ(Q), ψ(K), their row normalizations, numerator, normalizer, output
        Variant::Kernel => {
            let f = d_k + 1;
            MemoryModel {
                weight_matrix: 0,
                state: f * d_v + f + d_v,
                rows: n * (2 * f + 2 * d_k + 2 * d_v + 1),
                scratch: 0,
            }
        }
    }
}

/// Smallest `N` from which linear attention is cheaper than dot product for
/// every larger `N` as well.
pub fn crossover(d_k: usize, d_v: usize) -> usize {
    // N·(D_k + D_v + 2) > per-row linear cost, which is monotone in N
    let per_row = macc_model(1, d_k, d_v, Variant::Linear);
    let slope = n64(d_k + d_v + 2);
    (per_row / slope + 1) as usize
}
