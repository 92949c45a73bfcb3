//! Test-time augmentation over the eight symmetries of the square.
//!
//! Element `g` of the group is a horizontal flip when `g >= 4`, followed by
//! `g % 4` counter-clockwise quarter turns.

use crate::autodiff::{softmax_in_place, Tensor};
use crate::error::{Error, Result};

pub const DIHEDRAL_ORDER: usize = 8;

fn dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] if h == w => Ok((b * c, h, w)),
        [_, _, h, w] => Err(Error::Config(format!(
            "dihedral transforms need square maps, got {h}×{w}"
        ))),
        _ => Err(Error::dim("dihedral", t.shape(), &[0, 0, 0, 0])),
    }
}

/// Applies `map(r, c) -> (source r, source c)` to every `n×n` plane.
fn remap(t: &Tensor, map: impl Fn(usize, usize, usize) -> (usize, usize)) -> Result<Tensor> {
    let (planes, n, _) = dims(t)?;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..planes {
        let base = p * n * n;
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = map(n, r, c);
                out[base + r * n + c] = src[base + sr * n + sc];
            }
        }
    }
    Tensor::from_vec(t.shape(), out)
}

fn hflip(t: &Tensor) -> Result<Tensor> {
    remap(t, |n, r, c| (r, n - 1 - c))
}

fn rotate(t: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    match quarter_turns % 4 {
        0 => Ok(t.detach()),
        1 => remap(t, |n, r, c| (c, n - 1 - r)),
        2 => remap(t, |n, r, c| (n - 1 - r, n - 1 - c)),
        _ => remap(t, |n, r, c| (n - 1 - c, r)),
    }
}

/// Applies group element `g` to a `B×C×N×N` tensor.
pub fn dihedral(t: &Tensor, g: usize) -> Result<Tensor> {
    let flipped = if g % DIHEDRAL_ORDER >= 4 { hflip(t)? } else { t.detach() };
    rotate(&flipped, g % 4)
}

pub fn dihedral_inverse(t: &Tensor, g: usize) -> Result<Tensor> {
    let unrotated = rotate(t, 4 - g % 4)?;
    if g % DIHEDRAL_ORDER >= 4 {
        hflip(&unrotated)
    } else {
        Ok(unrotated)
    }
}

/// Softmax over the channel axis of a `B×K×H×W` score map.
pub fn softmax_channels(scores: &Tensor) -> Result<Tensor> {
    let [b, k, h, w] = *scores.shape() else {
        return Err(Error::dim("softmax_channels", scores.shape(), &[0, 0, 0, 0]));
    };
    let plane = h * w;
    let src = scores.data();
    let mut out = vec![0.0; src.len()];
    let mut column = vec![0.0; k];
    for bi in 0..b {
        let base = bi * k * plane;
        for p in 0..plane {
            for (ki, v) in column.iter_mut().enumerate() {
                *v = src[base + ki * plane + p];
            }
            softmax_in_place(&mut column, k);
            for (ki, v) in column.iter().enumerate() {
                out[base + ki * plane + p] = *v;
            }
        }
    }
    Tensor::from_vec(scores.shape(), out)
}

/// Averages the class probabilities `predict` gives on all eight transformed
/// copies of `image`, each mapped back to the original frame.
pub fn tta_predict(predict: impl Fn(&Tensor) -> Result<Tensor>, image: &Tensor) -> Result<Tensor> {
    dims(image)?;
    let mut sum: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for g in 0..DIHEDRAL_ORDER {
        let probs = softmax_channels(&predict(&dihedral(image, g)?)?)?;
        let back = dihedral_inverse(&probs, g)?;
        match &mut sum {
            None => {
                shape = back.shape().to_vec();
                sum = Some(back.to_vec());
            }
            Some(acc) => acc.iter_mut().zip(back.data()).for_each(|(a, v)| *a += v),
        }
    }
    let mut avg = sum.expect("group is non-empty");
    avg.iter_mut().for_each(|v| *v /= DIHEDRAL_ORDER as f64);
    Tensor::from_vec(&shape, avg)
}
