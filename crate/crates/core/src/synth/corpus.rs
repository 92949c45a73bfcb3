//! Corpora on disk: one PPM/PGM pair per scene plus a tab-separated manifest.
//!
//! Manifest layout: `#`-prefixed `key=value` lines carrying the scene
//! settings, then one `split<TAB>seed<TAB>image_path<TAB>label_path` line per
//! scene. Paths are relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::raster::{encode_pgm, encode_ppm, read_pgm, read_ppm};
use super::{generate_scene, Sample, SceneSpec};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

/// Seeds `start .. start + count`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRange {
    pub start: u64,
    pub count: usize,
}

impl SplitRange {
    fn end(&self) -> u64 {
        self.start + self.count as u64
    }

    fn overlaps(&self, other: &SplitRange) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    /// Train, val and test seed ranges.
    pub ranges: [SplitRange; 3],
    /// Scene settings shared by every seed; the `seed` field is ignored.
    pub scene: SceneSpec,
}

impl CorpusSpec {
    /// Back-to-back seed ranges starting at `base_seed`.
    pub fn new(base_seed: u64, train: usize, val: usize, test: usize) -> Self {
        let train_r = SplitRange { start: base_seed, count: train };
        let val_r = SplitRange { start: train_r.end(), count: val };
        let test_r = SplitRange { start: val_r.end(), count: test };
        Self {
            ranges: [train_r, val_r, test_r],
            scene: SceneSpec::new(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (split, r) in Split::ALL.iter().zip(&self.ranges) {
            if r.count == 0 {
                return Err(Error::Config(format!("{split} split needs at least one scene")));
            }
            r.start
                .checked_add(r.count as u64)
                .ok_or_else(|| Error::Config(format!("{split} seed range overflows")))?;
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if self.ranges[i].overlaps(&self.ranges[j]) {
                    return Err(Error::Config(format!(
                        "{} and {} seed ranges overlap",
                        Split::ALL[i],
                        Split::ALL[j]
                    )));
                }
            }
        }
        self.scene.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub seed: u64,
    pub image_path: String,
    pub label_path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub scene: SceneSpec,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let mut out = format!(
            "# size={}\n# num_classes={}\n# min_shapes={}\n# max_shapes={}\n# noise_sigma={}\n",
            s.size, s.num_classes, s.min_shapes, s.max_shapes, s.noise_sigma
        );
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.split, e.seed, e.image_path, e.label_path));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut scene = SceneSpec::new(0);
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let fail = |reason: String| Error::Format { offset, reason };
            let body = line.trim_end_matches(['\n', '\r']);
            if let Some(setting) = body.strip_prefix('#') {
                let Some((key, value)) = setting.trim().split_once('=') else {
                    offset += line.len();
                    continue;
                };
                let bad = |_| fail(format!("bad value for {key}: {value:?}"));
                match key.trim() {
                    "size" => scene.size = value.trim().parse().map_err(bad)?,
                    "num_classes" => scene.num_classes = value.trim().parse().map_err(bad)?,
                    "min_shapes" => scene.min_shapes = value.trim().parse().map_err(bad)?,
                    "max_shapes" => scene.max_shapes = value.trim().parse().map_err(bad)?,
                    "noise_sigma" => {
                        scene.noise_sigma = value.trim().parse().map_err(|_| fail(format!("bad noise_sigma {value:?}")))?
                    }
                    _ => {}
                }
            } else if !body.trim().is_empty() {
                let cols: Vec<&str> = body.split('\t').collect();
                let [split, seed, image, label] = cols[..] else {
                    return Err(fail(format!("expected 4 tab-separated columns, got {}", cols.len())));
                };
                entries.push(ManifestEntry {
                    split: split.parse().map_err(|_| fail(format!("unknown split {split:?}")))?,
                    seed: seed.parse().map_err(|_| fail(format!("bad seed {seed:?}")))?,
                    image_path: image.to_string(),
                    label_path: label.to_string(),
                });
            }
            offset += line.len();
        }
        scene.validate()?;
        Ok(Manifest { scene, entries })
    }
}

fn write_scene(dir: &Path, entry: &ManifestEntry, scene: &SceneSpec) -> Result<()> {
    let sample = generate_scene(&SceneSpec { seed: entry.seed, ..scene.clone() })?;
    for (rel, bytes) in [
        (&entry.image_path, encode_ppm(sample.height, sample.width, &sample.image)?),
        (&entry.label_path, encode_pgm(sample.height, sample.width, &sample.labels)?),
    ] {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Renders every scene of `spec` into `dir` and writes the manifest there.
pub fn make_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mut entries = Vec::new();
    for (split, range) in Split::ALL.into_iter().zip(&spec.ranges) {
        for seed in range.start..range.end() {
            entries.push(ManifestEntry {
                split,
                seed,
                image_path: format!("{split}/{seed:08}.ppm"),
                label_path: format!("{split}/{seed:08}.pgm"),
            });
        }
    }
    let manifest = Manifest {
        scene: spec.scene.clone(),
        entries,
    };
    regenerate(&manifest, dir)?;
    write_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Re-renders every manifest entry into `dir`.
pub fn regenerate(manifest: &Manifest, dir: &Path) -> Result<()> {
    for entry in &manifest.entries {
        write_scene(dir, entry, &manifest.scene)?;
    }
    Ok(())
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text)
}

/// SHA-256 over the manifest text and every referenced file, in order.
pub fn corpus_checksum(manifest: &Manifest, dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(manifest.to_text().as_bytes());
    for e in &manifest.entries {
        for rel in [&e.image_path, &e.label_path] {
            let path = dir.join(rel);
            hasher.update(fs::read(&path).map_err(|err| Error::io(&path, err))?);
        }
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn load_sample(dir: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let (h, w, image) = read_ppm(&dir.join(&entry.image_path))?;
    let (lh, lw, labels) = read_pgm(&dir.join(&entry.label_path))?;
    if (h, w) != (lh, lw) {
        return Err(Error::Data(format!(
            "image {} is {h}×{w} but labels {} are {lh}×{lw}",
            entry.image_path, entry.label_path
        )));
    }
    Ok(Sample::new(h, w, image, labels))
}
