//! Attention aggregation module, segmentation head, and the three ablation
//! variants sharing one backbone:
//!
//! - `baseline`: backbone plus a plain upsampling decoder from `C5`
//! - `fpn`: backbone, feature pyramid, 1×1 fusion of `concat(S2..S5)`
//! - `a2fpn`: as `fpn`, with linear attention refining the fusion and a
//!   residual connection back to the concatenated maps

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use crate::attention::{init_lam, lam_block};
use crate::autodiff::{init_conv, Buffers, Mode, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::pyramid::{
    backbone_forward, init_backbone, init_conv_norm, init_pyramid, pyramid_forward, BackboneConfig, Forward,
};
use crate::rng::{self, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Baseline,
    Fpn,
    A2fpn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Baseline, ModelKind::Fpn, ModelKind::A2fpn];
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Fpn => "fpn",
            ModelKind::A2fpn => "a2fpn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "fpn" => Ok(ModelKind::Fpn),
            "a2fpn" => Ok(ModelKind::A2fpn),
            other => Err(Error::Config(format!("unknown variant '{other}' (baseline|fpn|a2fpn)"))),
        }
    }
}

/// Architecture description; together with the weights it fully determines a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, num_classes: usize) -> Self {
        Self {
            kind,
            num_classes,
            backbone: BackboneConfig::default(),
        }
    }

    /// Width of the fused map entering the classifier, `4·d_p`.
    pub fn fused_channels(&self) -> usize {
        4 * self.backbone.pyramid_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes must be in 1..=255, got {}", self.num_classes)));
        }
        Ok(())
    }
}

/// Weights and running statistics of one variant.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub buffers: Buffers,
}

impl Model {
    /// Fresh weights drawn from `seed`. Parameters shared between variants are
    /// drawn in the same order, so `fpn` and `a2fpn` built from one seed agree
    /// on every tensor they have in common.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::derive(seed, 0x1417);
        let mut params = ParamSet::new();
        let mut buffers = Buffers::default();
        let cfg = &config.backbone;
        init_backbone(cfg, &mut params, &mut buffers, &mut rng);
        match config.kind {
            ModelKind::Baseline => init_decoder(&config, &mut params, &mut buffers, &mut rng),
            ModelKind::Fpn | ModelKind::A2fpn => {
                init_pyramid(cfg, &mut params, &mut buffers, &mut rng);
                init_conv(&mut params, "aam.fuse", config.fused_channels(), config.fused_channels(), 1, &mut rng);
            }
        }
        init_conv(&mut params, "head.classifier", config.num_classes, config.fused_channels(), 1, &mut rng);
        if config.kind == ModelKind::A2fpn {
            init_lam(&mut params, "aam.lam", config.fused_channels(), &mut rng)?;
        }
        Ok(Self { config, params, buffers })
    }

    /// Logits for `x` using `params` (normally `self.params`, or a tape-bound copy).
    pub fn forward_with(&mut self, tape: &Tape, params: &ParamSet, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut fwd = Forward {
            tape,
            params,
            buffers: &mut self.buffers,
            mode,
        };
        ablation_forward(&mut fwd, x, &self.config)
    }

    /// Eval-mode logits without recording.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let mut buffers = self.buffers.clone();
        let mut fwd = Forward {
            tape: &tape,
            params: &self.params,
            buffers: &mut buffers,
            mode: Mode::Eval,
        };
        ablation_forward(&mut fwd, x, &self.config)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }
}

const DECODER_STAGES: usize = 3;

fn init_decoder(config: &ModelConfig, params: &mut ParamSet, buffers: &mut Buffers, rng: &mut SeededRng) {
    let dp = config.backbone.pyramid_channels;
    let widths = [config.backbone.stage_channels[3], dp, dp, config.fused_channels()];
    for stage in 0..DECODER_STAGES {
        init_conv_norm(params, buffers, &format!("decoder.stage{stage}"), widths[stage + 1], widths[stage], rng);
    }
}

fn check_s_maps(s: &[Tensor]) -> Result<()> {
    let first = s.first().ok_or_else(|| Error::Usage("no pyramid maps".into()))?;
    if s.len() != 4 || first.rank() != 4 {
        return Err(Error::Usage(format!("expected four B×C×H×W pyramid maps, got {}", s.len())));
    }
    for t in s {
        if t.shape() != first.shape() {
            return Err(Error::dim("aam_forward", first.shape(), t.shape()));
        }
    }
    Ok(())
}

/// `concat(S2..S5) + LAM(conv1×1(concat(S2..S5)))`.
pub fn aam_forward(fwd: &Forward, s: &[Tensor]) -> Result<Tensor> {
    check_s_maps(s)?;
    let refs: Vec<&Tensor> = s.iter().collect();
    let concat = fwd.tape.concat(&refs, 1)?;
    let fused = fwd.conv("aam.fuse", &concat, 1, 0)?;
    let refined = lam_block(fwd.tape, &fused, fwd.params, "aam.lam")?;
    fwd.tape.add(&refined, &concat)
}

/// The `fpn` aggregation: `conv1×1(concat(S2..S5))`, no attention, no residual.
pub fn plain_aggregate(fwd: &Forward, s: &[Tensor]) -> Result<Tensor> {
    check_s_maps(s)?;
    let refs: Vec<&Tensor> = s.iter().collect();
    fwd.conv("aam.fuse", &fwd.tape.concat(&refs, 1)?, 1, 0)
}

/// 1×1 conv to `num_classes`, then two nearest 2× upsamplings.
pub fn classifier_head(fwd: &Forward, fused: &Tensor, num_classes: usize) -> Result<Tensor> {
    let logits = fwd.conv("head.classifier", fused, 1, 0)?;
    if logits.shape()[1] != num_classes {
        return Err(Error::dim("classifier_head", &[num_classes], &logits.shape()[1..2]));
    }
    fwd.tape.upsample_nearest2x(&fwd.tape.upsample_nearest2x(&logits)?)
}

/// Full attention-aggregation network.
pub fn a2fpn_forward(fwd: &mut Forward, x: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let c = backbone_forward(fwd, x, &config.backbone)?;
    let maps = pyramid_forward(fwd, c)?;
    let fused = aam_forward(fwd, &maps.s)?;
    classifier_head(fwd, &fused, config.num_classes)
}

/// Dispatches on `config.kind`.
pub fn ablation_forward(fwd: &mut Forward, x: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    match config.kind {
        ModelKind::A2fpn => a2fpn_forward(fwd, x, config),
        ModelKind::Fpn => {
            let c = backbone_forward(fwd, x, &config.backbone)?;
            let maps = pyramid_forward(fwd, c)?;
            let fused = plain_aggregate(fwd, &maps.s)?;
            classifier_head(fwd, &fused, config.num_classes)
        }
        ModelKind::Baseline => {
            let c = backbone_forward(fwd, x, &config.backbone)?;
            let mut y = c[3].clone();
            for stage in 0..DECODER_STAGES {
                y = fwd.conv_norm_relu(&format!("decoder.stage{stage}"), &y, 1)?;
                y = fwd.tape.upsample_nearest2x(&y)?;
            }
            classifier_head(fwd, &y, config.num_classes)
        }
    }
}

/// Per-pixel argmax over the class axis of `B×K×H×W` scores; ties go to the
/// lowest class index.
pub fn argmax_classes(scores: &Tensor) -> Result<Vec<u8>> {
    let &[b, k, h, w] = scores.shape() else {
        return Err(Error::Usage(format!("argmax expects B×K×H×W, got {:?}", scores.shape())));
    };
    let plane = h * w;
    let data = scores.data();
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = data[bi * k * plane + p];
            for c in 1..k {
                let v = data[(bi * k + c) * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}
