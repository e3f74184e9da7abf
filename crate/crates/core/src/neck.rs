//! Top-down feature pyramid over the backbone taps.

use crate::backbone::BackboneOutput;
use crate::error::{ensure_eq, Error, Result};
use crate::layers::{ensure_channels, join, ConvLayer, Parameters};
use crate::tensor::{upsample2x, ConvSpec, Tensor};

/// Neck widths explored by the channel ablation.
pub const NECK_WIDTHS: [usize; 6] = [8, 16, 32, 64, 128, 256];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PyramidConfig {
    pub channels: usize,
    pub num_levels: usize,
}

impl PyramidConfig {
    pub fn new(channels: usize) -> Result<Self> {
        if !NECK_WIDTHS.contains(&channels) {
            return Err(Error::Validation(format!(
                "neck channels must be one of {NECK_WIDTHS:?}, got {channels}"
            )));
        }
        Ok(PyramidConfig {
            channels,
            num_levels: 3,
        })
    }
}

/// Uniform-width feature maps, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpnLevel {
    pub lateral: ConvLayer,
    pub smooth: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fpn {
    pub channels: usize,
    pub levels: Vec<FpnLevel>,
}

impl Fpn {
    pub fn zeros(channels: usize, backbone_channels: &[usize]) -> Self {
        Fpn {
            channels,
            levels: backbone_channels
                .iter()
                .map(|&c| FpnLevel {
                    lateral: ConvLayer::zeros(c, channels, ConvSpec::new(1)),
                    smooth: ConvLayer::zeros(channels, channels, ConvSpec::same(3)),
                })
                .collect(),
        }
    }

    pub fn forward(&self, backbone: &BackboneOutput) -> Result<Pyramid> {
        const CTX: &str = "fpn_forward";
        ensure_eq(CTX, "levels", self.levels.len(), backbone.levels.len())?;
        for (lvl, x) in self.levels.iter().zip(&backbone.levels) {
            ensure_channels(CTX, lvl.lateral.weight.shape().c, x)?;
            ensure_eq(CTX, "lateral.out_channels", self.channels, lvl.lateral.out_channels())?;
            ensure_eq(CTX, "smooth.out_channels", self.channels, lvl.smooth.out_channels())?;
        }

        let mut outputs = vec![None; self.levels.len()];
        let mut above: Option<Tensor> = None;
        for l in (0..self.levels.len()).rev() {
            let lvl = &self.levels[l];
            let mut fused = lvl.lateral.forward(&backbone.levels[l])?;
            if let Some(top) = &above {
                let s = fused.shape();
                // (13, 13) -> (26, 26) -> cropped to (25, 25) from the origin
                let up = upsample2x(top).crop(s.h, s.w)?;
                fused = fused.add(&up)?;
            }
            outputs[l] = Some(lvl.smooth.forward(&fused)?);
            above = Some(fused);
        }
        Ok(Pyramid {
            levels: outputs.into_iter().map(Option::unwrap).collect(),
        })
    }
}

impl Parameters for Fpn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        for (l, lvl) in self.levels.iter().enumerate() {
            lvl.lateral.visit(&join(prefix, &format!("l{l}.lateral")), f);
            lvl.smooth.visit(&join(prefix, &format!("l{l}.smooth")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        for (l, lvl) in self.levels.iter_mut().enumerate() {
            lvl.lateral.visit_mut(&join(prefix, &format!("l{l}.lateral")), f);
            lvl.smooth.visit_mut(&join(prefix, &format!("l{l}.smooth")), f);
        }
    }
}

pub fn fpn_forward(backbone_out: &BackboneOutput, config: &PyramidConfig, weights: &Fpn) -> Result<Pyramid> {
    ensure_eq("fpn_forward", "channels", config.channels, weights.channels)?;
    ensure_eq("fpn_forward", "num_levels", config.num_levels, weights.levels.len())?;
    weights.forward(backbone_out)
}

/// Parameters of all lateral (1x1) and smoothing (3x3) convolutions, biases included.
pub fn parameter_count(channels: usize, backbone_channels: &[usize]) -> usize {
    backbone_channels
        .iter()
        .map(|&c| (c * channels + channels) + (9 * channels * channels + channels))
        .sum()
}
