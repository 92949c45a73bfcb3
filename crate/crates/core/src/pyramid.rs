//! Bottom-up residual backbone and the top-down feature pyramid.
//!
//! The backbone produces `C2..C5` at 1/4..1/32 of the input. The top-down
//! path starts from a 1×1 projection of `C5`, repeatedly upsamples by 2 and
//! adds the 1×1 lateral projection of the next finer stage, and smooths each
//! merge with a 3×3 convolution, yielding `P2..P5` with `d_p` channels. Each
//! `P_i` is then brought to the `P2` scale as `S_i`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{init_conv, init_conv_weight, init_norm, Buffers, Mode, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Pyramid levels, finest first.
pub const LEVELS: [usize; 4] = [2, 3, 4, 5];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub pyramid_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            stage_channels: [8, 16, 32, 64],
            blocks_per_stage: 1,
            pyramid_channels: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.stem_channels, self.blocks_per_stage, self.pyramid_channels];
        if dims.contains(&0) || self.stage_channels.contains(&0) {
            return Err(Error::Config(format!("backbone extents must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// The feature hierarchy `C2..C5`, `P2..P5`, `S2..S5`, finest level first.
#[derive(Clone, Debug)]
pub struct PyramidMaps {
    pub c: [Tensor; 4],
    pub p: [Tensor; 4],
    pub s: [Tensor; 4],
}

/// Everything a forward pass needs besides its input.
pub struct Forward<'a> {
    pub tape: &'a Tape,
    pub params: &'a ParamSet,
    pub buffers: &'a mut Buffers,
    pub mode: Mode,
}

impl Forward<'_> {
    /// Convolution `{name}.weight`, plus `{name}.bias` when the layer has one.
    pub fn conv(&self, name: &str, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let weight = self.params.get(&format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let zero;
        let bias = if self.params.contains(&bias_name) {
            self.params.get(&bias_name)?
        } else {
            zero = Tensor::zeros(&weight.shape()[..1]);
            &zero
        };
        self.tape.conv2d(x, weight, bias, stride, pad)
    }

    pub fn norm(&mut self, name: &str, x: &Tensor) -> Result<Tensor> {
        let gamma = self.params.get(&format!("{name}.gamma"))?;
        let beta = self.params.get(&format!("{name}.beta"))?;
        let stats = self.buffers.stats_mut(name)?;
        self.tape.batchnorm2d(x, gamma, beta, stats, self.mode)
    }

    /// `relu(norm(conv3×3(x)))` with layers `{name}.conv` and `{name}.norm`.
    pub fn conv_norm_relu(&mut self, name: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
        let y = self.conv(&format!("{name}.conv"), x, stride, 1)?;
        let y = self.norm(&format!("{name}.norm"), &y)?;
        self.tape.relu(&y)
    }
}

pub(crate) fn init_conv_norm(
    params: &mut ParamSet,
    buffers: &mut Buffers,
    name: &str,
    cout: usize,
    cin: usize,
    rng: &mut SeededRng,
) {
    init_conv_weight(params, &format!("{name}.conv"), cout, cin, 3, rng);
    init_norm(params, buffers, &format!("{name}.norm"), cout);
}

fn block_name(stage: usize, block: usize) -> String {
    format!("backbone.stage{stage}.block{block}")
}

pub fn init_backbone(cfg: &BackboneConfig, params: &mut ParamSet, buffers: &mut Buffers, rng: &mut SeededRng) {
    init_conv_norm(params, buffers, "backbone.stem", cfg.stem_channels, 3, rng);
    let mut cin = cfg.stem_channels;
    for (stage, &cout) in cfg.stage_channels.iter().enumerate() {
        for block in 0..cfg.blocks_per_stage {
            let name = block_name(stage, block);
            let block_in = if block == 0 { cin } else { cout };
            init_conv_weight(params, &format!("{name}.conv1"), cout, block_in, 3, rng);
            init_norm(params, buffers, &format!("{name}.norm1"), cout);
            init_conv_weight(params, &format!("{name}.conv2"), cout, cout, 3, rng);
            init_norm(params, buffers, &format!("{name}.norm2"), cout);
            // first block of every stage downsamples, so it always projects
            if block == 0 {
                init_conv_weight(params, &format!("{name}.proj"), cout, block_in, 1, rng);
                init_norm(params, buffers, &format!("{name}.proj_norm"), cout);
            }
        }
        cin = cout;
    }
}

fn residual_block(fwd: &mut Forward, name: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
    let tape = fwd.tape;
    let y = fwd.conv(&format!("{name}.conv1"), x, stride, 1)?;
    let y = tape.relu(&fwd.norm(&format!("{name}.norm1"), &y)?)?;
    let y = fwd.conv(&format!("{name}.conv2"), &y, 1, 1)?;
    let y = fwd.norm(&format!("{name}.norm2"), &y)?;
    let skip = if fwd.params.contains(&format!("{name}.proj.weight")) {
        let s = fwd.conv(&format!("{name}.proj"), x, stride, 0)?;
        fwd.norm(&format!("{name}.proj_norm"), &s)?
    } else {
        x.clone()
    };
    tape.relu(&tape.add(&y, &skip)?)
}

/// Bottom-up pathway: `C2..C5` at 1/4, 1/8, 1/16, 1/32 of the input extent.
pub fn backbone_forward(fwd: &mut Forward, x: &Tensor, cfg: &BackboneConfig) -> Result<[Tensor; 4]> {
    let &[_, 3, h, w] = x.shape() else {
        return Err(Error::Config(format!("backbone expects B×3×H×W input, got {:?}", x.shape())));
    };
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("input extents {h}×{w} must be positive multiples of 32")));
    }
    let mut y = fwd.conv_norm_relu("backbone.stem", x, 2)?;
    let mut outs = Vec::with_capacity(4);
    for stage in 0..4 {
        for block in 0..cfg.blocks_per_stage {
            let stride = if block == 0 { 2 } else { 1 };
            y = residual_block(fwd, &block_name(stage, block), &y, stride)?;
        }
        outs.push(y.clone());
    }
    Ok(outs.try_into().expect("four stages"))
}

pub fn init_pyramid(cfg: &BackboneConfig, params: &mut ParamSet, buffers: &mut Buffers, rng: &mut SeededRng) {
    let dp = cfg.pyramid_channels;
    for (i, &level) in LEVELS.iter().enumerate() {
        init_conv(params, &format!("fpn.lateral{level}"), dp, cfg.stage_channels[i], 1, rng);
        if level != 5 {
            init_conv(params, &format!("fpn.smooth{level}"), dp, dp, 3, rng);
        }
        init_conv_norm(params, buffers, &format!("fpn.scale{level}"), dp, dp, rng);
    }
}

/// 1×1 projection of `C_level` to `d_p` channels.
pub fn lateral_project(fwd: &Forward, c: &Tensor, level: usize) -> Result<Tensor> {
    fwd.conv(&format!("fpn.lateral{level}"), c, 1, 0)
}

/// `upsample2×(upper) + lateral`.
pub fn topdown_merge(tape: &Tape, upper: &Tensor, lateral: &Tensor) -> Result<Tensor> {
    let (u, l) = (upper.shape(), lateral.shape());
    if u.len() != 4 || l.len() != 4 || u[..2] != l[..2] || l[2] != 2 * u[2] || l[3] != 2 * u[3] {
        return Err(Error::dim("topdown_merge", u, l));
    }
    tape.add(&tape.upsample_nearest2x(upper)?, lateral)
}

/// 3×3 smoothing of a merged map into `P_level`.
pub fn smooth_3x3(fwd: &Forward, merged: &Tensor, level: usize) -> Result<Tensor> {
    fwd.conv(&format!("fpn.smooth{level}"), merged, 1, 1)
}

/// conv3×3-norm-relu followed by `level − 2` nearest 2× upsamplings.
pub fn scale_to_finest(fwd: &mut Forward, p: &Tensor, level: usize) -> Result<Tensor> {
    if !LEVELS.contains(&level) {
        return Err(Error::Config(format!("pyramid level {level} outside 2..=5")));
    }
    let mut s = fwd.conv_norm_relu(&format!("fpn.scale{level}"), p, 1)?;
    for _ in 2..level {
        s = fwd.tape.upsample_nearest2x(&s)?;
    }
    Ok(s)
}

/// Top-down pathway plus scale alignment over backbone outputs `C2..C5`.
pub fn pyramid_forward(fwd: &mut Forward, c: [Tensor; 4]) -> Result<PyramidMaps> {
    let mut p: Vec<Tensor> = vec![lateral_project(fwd, &c[3], 5)?];
    for i in (0..3).rev() {
        let level = LEVELS[i];
        let lateral = lateral_project(fwd, &c[i], level)?;
        let merged = topdown_merge(fwd.tape, p.last().expect("seeded with P5"), &lateral)?;
        p.push(smooth_3x3(fwd, &merged, level)?);
    }
    p.reverse();
    let mut s = Vec::with_capacity(4);
    for (pi, &level) in p.iter().zip(&LEVELS) {
        s.push(scale_to_finest(fwd, pi, level)?);
    }
    Ok(PyramidMaps {
        c,
        p: p.try_into().expect("four levels"),
        s: s.try_into().expect("four levels"),
    })
}
