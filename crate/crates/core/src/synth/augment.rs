//! Training-time augmentation.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::rng::{self, SeededRng};

/// The set one augmentation draw samples from. Geometric transforms hit image
/// and labels alike; noise touches the image only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Candidate counter-clockwise quarter turns. Odd turns are skipped on
    /// non-square inputs so extents never change.
    pub quarter_turns: Vec<usize>,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub scales: Vec<f64>,
    pub noise_sigma: f64,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            quarter_turns: vec![0],
            horizontal_flip: false,
            vertical_flip: false,
            scales: vec![1.0],
            noise_sigma: 0.0,
        }
    }

    pub fn standard() -> Self {
        Self {
            quarter_turns: vec![0, 1, 2, 3],
            horizontal_flip: true,
            vertical_flip: true,
            scales: vec![0.75, 1.0, 1.25],
            noise_sigma: 0.02,
        }
    }
}

/// Draws one configuration from `policy` and applies it.
pub fn augment(sample: &Sample, policy: &AugmentationPolicy, rng: &mut SeededRng) -> Sample {
    let turns = policy.quarter_turns.choose(rng).copied().unwrap_or(0);
    let hflip = policy.horizontal_flip && rng.random_bool(0.5);
    let vflip = policy.vertical_flip && rng.random_bool(0.5);
    let scale = policy.scales.choose(rng).copied().unwrap_or(1.0);

    let mut out = sample.clone();
    if scale != 1.0 {
        out = out.rescale(scale);
    }
    if hflip {
        out = out.hflip();
    }
    if vflip {
        out = out.vflip();
    }
    let turns = if out.height == out.width { turns % 4 } else { (turns % 4) & !1 };
    if turns > 0 {
        out = out.rotate90(turns);
    }
    if policy.noise_sigma > 0.0 {
        for v in &mut out.image {
            *v = (*v + policy.noise_sigma * rng::normal(rng)).clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneSpec};

    #[test]
    fn identity_policy_is_identity() {
        let s = generate_scene(&SceneSpec::new(1)).unwrap();
        let mut rng = rng::seeded(0);
        assert_eq!(augment(&s, &AugmentationPolicy::identity(), &mut rng), s);
    }

    #[test]
    fn noise_leaves_labels_alone() {
        let s = generate_scene(&SceneSpec::new(2)).unwrap();
        let policy = AugmentationPolicy {
            noise_sigma: 0.1,
            ..AugmentationPolicy::identity()
        };
        let out = augment(&s, &policy, &mut rng::seeded(4));
        assert_eq!(out.labels, s.labels);
        assert_ne!(out.image, s.image);
    }

    #[test]
    fn extents_preserved_for_non_square() {
        let s = Sample::new(4, 6, vec![0.5; 72], vec![1; 24]);
        let mut rng = rng::seeded(9);
        for _ in 0..32 {
            let out = augment(&s, &AugmentationPolicy::standard(), &mut rng);
            assert_eq!((out.height, out.width), (4, 6));
        }
    }

    #[test]
    fn same_seed_same_draw() {
        let s = generate_scene(&SceneSpec::new(3)).unwrap();
        let p = AugmentationPolicy::standard();
        assert_eq!(augment(&s, &p, &mut rng::seeded(8)), augment(&s, &p, &mut rng::seeded(8)));
    }
}
