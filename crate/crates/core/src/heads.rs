//! Task heads on top of the encoder output: a linear classifier after
//! global average pooling, and a convolutional decoder that restores the
//! input resolution for reconstruction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvParams, Real, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Ctx, Init, ParamId};

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    w: ParamId,
    b: ParamId,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new(init: &mut Init, name: &str, c_in: usize, classes: usize) -> Self {
        Self {
            w: init.linear_weight(&format!("{name}.w"), classes, c_in),
            b: init.zeros(&format!("{name}.b"), classes),
            classes,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    /// `[B, C', h, w] -> [B, classes]` logits.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let pooled = ctx.g.global_avg_pool(x)?;
        let (w, b) = (ctx.param(self.w), ctx.param(self.b));
        ctx.g.linear(pooled, w, Some(b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Width after the 1×1 channel projection, then after each upsampling stage.
    pub widths: [usize; 3],
    pub out_channels: usize,
    /// Per-channel output interval (the normalised data range).
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

impl DecoderConfig {
    pub fn new(widths: [usize; 3], lo: Vec<f32>, hi: Vec<f32>) -> Self {
        Self {
            widths,
            out_channels: lo.len(),
            lo,
            hi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::config("decoder_widths", "widths must be positive"));
        }
        if self.lo.len() != self.out_channels || self.hi.len() != self.out_channels {
            return Err(Error::config("decoder_bounds", "one output bound per channel"));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| l.partial_cmp(h) != Some(std::cmp::Ordering::Less)) {
            return Err(Error::config("decoder_bounds", "lower bound must be below upper bound"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    filter: ParamId,
    bn: BatchNorm,
    up_w: ParamId,
    up_b: ParamId,
}

/// Reconstruction decoder: 3×3 conv, 1×1 conv, two stages of
/// `[3×3 conv, BN, ReLU, transposed conv ×2]`, a final 3×3 conv to the
/// image channels, and a per-channel HardTanh.
#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    c_in: usize,
    in_hw: (usize, usize),
    spatial: (ParamId, ParamId),
    channel: (ParamId, ParamId),
    stages: Vec<UpStage>,
    out: (ParamId, ParamId),
}

impl Decoder {
    /// `in_hw` is the encoder output size, `out_hw` the image size; the
    /// decoder upsamples by exactly 4.
    pub fn new(
        init: &mut Init,
        name: &str,
        c_in: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if out_hw != (in_hw.0 * 4, in_hw.1 * 4) {
            return Err(Error::config(
                "decoder",
                format!("decoder upsamples by 4 but maps {in_hw:?} to {out_hw:?}"),
            ));
        }
        let [w0, w1, w2] = cfg.widths;
        let mut conv = |n: &str, o: usize, i: usize, k: usize| {
            (
                init.conv_weight(&format!("{name}.{n}.w"), [o, i, k, k]),
                init.zeros(&format!("{name}.{n}.b"), o),
            )
        };
        let spatial = conv("spatial", c_in, c_in, 3);
        let channel = conv("channel", w0, c_in, 1);
        let out = conv("out", cfg.out_channels, w2, 3);
        let stages = [(w0, w1), (w1, w2)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| UpStage {
                filter: init.conv_weight(&format!("{name}.up{i}.filter"), [a, a, 3, 3]),
                bn: init.batch_norm(&format!("{name}.up{i}.bn"), a, true),
                up_w: init.conv_transpose_weight(&format!("{name}.up{i}.deconv.w"), [a, b, 4, 4]),
                up_b: init.zeros(&format!("{name}.up{i}.deconv.b"), b),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            c_in,
            in_hw,
            spatial,
            channel,
            stages,
            out,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    fn conv_b<T: Real>(ctx: &mut Ctx<T>, x: Var, (w, b): (ParamId, ParamId), pad: usize) -> Result<Var> {
        ctx.conv_bias(x, w, b, ConvParams::new(1, pad))
    }

    /// Features before clipping.
    pub fn forward_raw<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.c_in || (s[2], s[3]) != self.in_hw {
            return Err(Error::config(
                "decoder",
                format!("decoder built for [_, {}, {:?}] got {s:?}", self.c_in, self.in_hw),
            ));
        }
        let mut y = Self::conv_b(ctx, x, self.spatial, 1)?;
        y = Self::conv_b(ctx, y, self.channel, 0)?;
        for st in &self.stages {
            y = ctx.conv(y, st.filter, ConvParams::new(1, 1))?;
            y = ctx.batch_norm(y, &st.bn)?;
            y = ctx.g.relu(y);
            let (w, b) = (ctx.param(st.up_w), ctx.param(st.up_b));
            y = ctx.g.conv_transpose2d(y, w, 2, 1)?;
            y = ctx.g.bias_channels(y, b)?;
        }
        Self::conv_b(ctx, y, self.out, 1)
    }

    /// `[B, C', h, w] -> [B, out_channels, 4h, 4w]`, clipped to the bounds.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.forward_raw(ctx, x)?;
        ctx.g.hardtanh(y, &self.cfg.lo, &self.cfg.hi)
    }
}
