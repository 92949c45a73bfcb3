//! Run configuration: defaults, overridden by a flat `key = value` file,
//! overridden by command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use a2fpn::model::{ModelConfig, ModelKind};
use a2fpn::pyramid::BackboneConfig;
use a2fpn::synth::{CorpusSpec, SceneSpec};
use a2fpn::{Error, Result};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,

    pub variant: ModelKind,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub d_p: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub augment: bool,

    pub tta: bool,
    pub eval_split: String,
    pub write_predictions: bool,

    pub corpus: PathBuf,
    pub out: PathBuf,
    /// Defaults to `<out>/model.ckpt` when unset.
    pub checkpoint: Option<PathBuf>,

    pub bench_repetitions: usize,
    pub bench_cap_bytes: u64,
    pub bench_dot_max_n: usize,
    pub bench_linear_max_n: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            seed: 42,
            image_size: 64,
            num_classes: 4,
            noise_sigma: 0.05,
            train_count: 200,
            val_count: 20,
            test_count: 80,
            variant: ModelKind::A2fpn,
            stem_channels: backbone.stem_channels,
            stage_channels: backbone.stage_channels,
            blocks_per_stage: backbone.blocks_per_stage,
            d_p: backbone.pyramid_channels,
            epochs: 40,
            batch_size: 8,
            lr: 3e-4,
            augment: true,
            tta: false,
            eval_split: "test".into(),
            write_predictions: false,
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("out"),
            checkpoint: None,
            bench_repetitions: 5,
            bench_cap_bytes: a2fpn::bench::DEFAULT_CAP_BYTES,
            bench_dot_max_n: 8192,
            bench_linear_max_n: 65536,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("bad value for {key}: {value:?}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Usage(format!("bad value for {key}: {value:?} (expected on/off)"))),
    }
}

fn parse_channels(key: &str, value: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Usage(format!("{key} needs four comma-separated widths, got {value:?}")))
}

impl RunConfig {
    /// Sets one key from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "train_count" => self.train_count = parse(key, value)?,
            "val_count" => self.val_count = parse(key, value)?,
            "test_count" => self.test_count = parse(key, value)?,
            "variant" => self.variant = value.parse().map_err(|e: Error| Error::Usage(e.to_string()))?,
            "stem_channels" => self.stem_channels = parse(key, value)?,
            "stage_channels" => self.stage_channels = parse_channels(key, value)?,
            "blocks_per_stage" => self.blocks_per_stage = parse(key, value)?,
            "d_p" => self.d_p = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "tta" => self.tta = parse_bool(key, value)?,
            "eval_split" => self.eval_split = value.to_string(),
            "write_predictions" => self.write_predictions = parse_bool(key, value)?,
            "corpus" => self.corpus = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| PathBuf::from(value)),
            "bench_repetitions" => self.bench_repetitions = parse(key, value)?,
            "bench_cap_bytes" => self.bench_cap_bytes = parse(key, value)?,
            "bench_dot_max_n" => self.bench_dot_max_n = parse(key, value)?,
            "bench_linear_max_n" => self.bench_linear_max_n = parse(key, value)?,
            _ => return Err(Error::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected `key = value`, got {line:?}", i + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Every key with its resolved value, in a form [`apply_text`] reads back.
    ///
    /// [`apply_text`]: RunConfig::apply_text
    pub fn to_text(&self) -> String {
        let s = &self.stage_channels;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("write to String");
        kv("seed", self.seed.to_string());
        kv("image_size", self.image_size.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("train_count", self.train_count.to_string());
        kv("val_count", self.val_count.to_string());
        kv("test_count", self.test_count.to_string());
        kv("variant", self.variant.to_string());
        kv("stem_channels", self.stem_channels.to_string());
        kv("stage_channels", format!("{},{},{},{}", s[0], s[1], s[2], s[3]));
        kv("blocks_per_stage", self.blocks_per_stage.to_string());
        kv("d_p", self.d_p.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("augment", on_off(self.augment));
        kv("tta", on_off(self.tta));
        kv("eval_split", self.eval_split.clone());
        kv("write_predictions", on_off(self.write_predictions));
        kv("corpus", self.corpus.display().to_string());
        kv("out", self.out.display().to_string());
        kv("checkpoint", self.checkpoint_path().display().to_string());
        kv("bench_repetitions", self.bench_repetitions.to_string());
        kv("bench_cap_bytes", self.bench_cap_bytes.to_string());
        kv("bench_dot_max_n", self.bench_dot_max_n.to_string());
        kv("bench_linear_max_n", self.bench_linear_max_n.to_string());
        out
    }

    /// Writes [`to_text`](RunConfig::to_text) into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.variant,
            num_classes: self.num_classes,
            backbone: BackboneConfig {
                stem_channels: self.stem_channels,
                stage_channels: self.stage_channels,
                blocks_per_stage: self.blocks_per_stage,
                pyramid_channels: self.d_p,
            },
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        let mut spec = CorpusSpec::new(self.seed, self.train_count, self.val_count, self.test_count);
        spec.scene = SceneSpec {
            size: self.image_size,
            num_classes: self.num_classes,
            noise_sigma: self.noise_sigma,
            ..SceneSpec::new(0)
        };
        spec
    }
}

fn on_off(b: bool) -> String {
    if b { "on" } else { "off" }.to_string()
}
