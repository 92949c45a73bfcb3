//! Synthetic segmentation data: seeded scenes, augmentation, test-time
//! augmentation over the dihedral group, PPM/PGM rasters and corpora on disk.

mod augment;
mod corpus;
mod raster;
mod scene;
mod tta;

pub use augment::{augment, AugmentationPolicy};
pub use corpus::{
    corpus_checksum, load_sample, make_corpus, read_manifest, regenerate, write_manifest, CorpusSpec, Manifest, MANIFEST_FILE,
    ManifestEntry, Split, SplitRange,
};
pub use raster::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm};
pub use scene::{generate_scene, SceneSpec, BACKGROUND, ELLIPSE, RECTANGLE, STRIPE};
pub use tta::{dihedral, dihedral_inverse, softmax_channels, tta_predict, DIHEDRAL_ORDER};

use crate::autodiff::Tensor;
use crate::error::Result;

/// An RGB image (channel-major, values in `[0, 1]`) with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn new(height: usize, width: usize, image: Vec<f64>, labels: Vec<u8>) -> Self {
        assert_eq!(image.len(), 3 * height * width, "image must be 3×H×W");
        assert_eq!(labels.len(), height * width, "labels must be H×W");
        Self {
            height,
            width,
            image,
            labels,
        }
    }

    /// The image as a `1×3×H×W` tensor.
    pub fn image_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.image.clone())
    }

    /// Pixel count per class, indexed by class id.
    pub fn class_histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut hist = vec![0; num_classes];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }

    pub fn hflip(&self) -> Self {
        self.remap(self.height, self.width, |r, c| (r, self.width - 1 - c))
    }

    pub fn vflip(&self) -> Self {
        self.remap(self.height, self.width, |r, c| (self.height - 1 - r, c))
    }

    /// Rotates counter-clockwise by `quarter_turns` × 90°.
    pub fn rotate90(&self, quarter_turns: usize) -> Self {
        let mut out = self.clone();
        for _ in 0..quarter_turns % 4 {
            let (h, w) = (out.height, out.width);
            out = out.remap(w, h, |r, c| (c, w - 1 - r));
        }
        out
    }

    /// Nearest-neighbour rescale by `factor`, then center crop or pad back to
    /// the original extent. Padding replicates the border.
    pub fn rescale(&self, factor: f64) -> Self {
        let (h, w) = (self.height, self.width);
        let axis = |len: usize| {
            let scaled = (len as f64 * factor).round() as i64;
            let offset = (scaled - len as i64) / 2;
            move |i: usize| {
                let s = (i as i64 + offset).clamp(0, scaled - 1) as f64;
                (((s + 0.5) / factor).floor() as usize).min(len - 1)
            }
        };
        let (row, col) = (axis(h), axis(w));
        self.remap(h, w, |r, c| (row(r), col(c)))
    }

    /// Builds an `out_h × out_w` sample whose pixel `(r, c)` is this sample's
    /// pixel `src(r, c)`.
    fn remap(&self, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let plane = self.height * self.width;
        let mut image = vec![0.0; 3 * out_h * out_w];
        let mut labels = vec![0; out_h * out_w];
        for r in 0..out_h {
            for c in 0..out_w {
                let (sr, sc) = src(r, c);
                let from = sr * self.width + sc;
                let to = r * out_w + c;
                labels[to] = self.labels[from];
                for ch in 0..3 {
                    image[ch * out_h * out_w + to] = self.image[ch * plane + from];
                }
            }
        }
        Sample::new(out_h, out_w, image, labels)
    }
}
