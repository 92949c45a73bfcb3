use super::ops::map4;
use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};

impl Tape {
    /// Mean pixel-wise cross-entropy of `B×K×H×W` logits against a `B×H×W`
    /// label map. Pixels equal to `ignore` are skipped; with no counted pixel
    /// the loss is zero.
    pub fn cross_entropy(&self, logits: &Tensor, labels: &[u8], ignore: Option<u8>) -> Result<Tensor> {
        let [b, k, h, w] = map4("cross_entropy", logits)?;
        let plane = h * w;
        if labels.len() != b * plane {
            return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
        }
        let src = logits.data();
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        let mut counted = 0usize;
        let mut scratch = vec![0.0; k];
        for bi in 0..b {
            let base = bi * k * plane;
            for p in 0..plane {
                let label = labels[bi * plane + p];
                if Some(label) == ignore {
                    continue;
                }
                if label as usize >= k {
                    return Err(Error::Data(format!(
                        "label {label} outside [0, {k}) at batch {bi}, row {}, col {}",
                        p / w,
                        p % w
                    )));
                }
                for (c, s) in scratch.iter_mut().enumerate() {
                    *s = src[base + c * plane + p];
                }
                let max = scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + scratch.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - scratch[label as usize];
                for (c, s) in scratch.iter().enumerate() {
                    probs[base + c * plane + p] = (s - lse).exp();
                }
                counted += 1;
            }
        }
        let denom = counted.max(1) as f64;
        let labels = labels.to_vec();
        self.record("cross_entropy", &[logits], vec![1], vec![total / denom], move |g, _| {
            let scale = g[0] / denom;
            let mut gx = vec![0.0; b * k * plane];
            for bi in 0..b {
                let base = bi * k * plane;
                for p in 0..plane {
                    let label = labels[bi * plane + p];
                    if Some(label) == ignore {
                        continue;
                    }
                    for c in 0..k {
                        let idx = base + c * plane + p;
                        let onehot = if c == label as usize { 1.0 } else { 0.0 };
                        gx[idx] = scale * (probs[idx] - onehot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}
