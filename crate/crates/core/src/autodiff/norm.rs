use super::ops::map4;
use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

impl Tape {
    /// Per-channel batch normalization of a `B×C×H×W` map.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// unbiased variance into `stats`; eval mode uses `stats` as constants.
    pub fn batchnorm2d(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Tensor> {
        let [b, c, h, w] = map4("batchnorm2d", x)?;
        if gamma.numel() != c || beta.numel() != c || stats.mean.len() != c {
            return Err(Error::dim("batchnorm2d", x.shape(), gamma.shape()));
        }
        let plane = h * w;
        let count = b * plane;
        if mode == Mode::Train && count < 2 {
            return Err(Error::Config(format!(
                "batchnorm2d in train mode needs at least 2 values per channel, got {count}"
            )));
        }
        let src = x.data();
        let channel = |ci: usize| {
            (0..b).flat_map(move |bi| src[(bi * c + ci) * plane..][..plane].iter().copied())
        };

        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let (mu, var) = match mode {
                Mode::Train => {
                    let mu = channel(ci).sum::<f64>() / count as f64;
                    let var = channel(ci).map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;
                    stats.mean[ci] = (1.0 - BN_MOMENTUM) * stats.mean[ci] + BN_MOMENTUM * mu;
                    let unbiased = var * count as f64 / (count - 1) as f64;
                    stats.var[ci] = (1.0 - BN_MOMENTUM) * stats.var[ci] + BN_MOMENTUM * unbiased;
                    (mu, var)
                }
                Mode::Eval => (stats.mean[ci], stats.var[ci]),
            };
            mean[ci] = mu;
            inv_std[ci] = 1.0 / (var + BN_EPS).sqrt();
        }

        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                let (g, bt) = (gamma.data()[ci], beta.data()[ci]);
                for i in off..off + plane {
                    xhat[i] = (src[i] - mean[ci]) * inv_std[ci];
                    out[i] = g * xhat[i] + bt;
                }
            }
        }

        let sg = gamma.shared();
        self.record("batchnorm2d", &[x, gamma, beta], vec![b, c, h, w], out, move |g, needs| {
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * plane;
                    for i in off..off + plane {
                        sum_g[ci] += g[i];
                        sum_gx[ci] += g[i] * xhat[i];
                    }
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; g.len()];
                let m = count as f64;
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        let k = sg[ci] * inv_std[ci];
                        for i in off..off + plane {
                            gx[i] = match mode {
                                Mode::Train => k * (g[i] - sum_g[ci] / m - xhat[i] * sum_gx[ci] / m),
                                Mode::Eval => k * g[i],
                            };
                        }
                    }
                }
                gx
            });
            vec![gx, needs[1].then(|| sum_gx.clone()), needs[2].then(|| sum_g.clone())]
        })
    }
}
