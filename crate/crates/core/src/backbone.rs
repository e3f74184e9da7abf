//! MobileNetV3-Small style backbone: h-swish, squeeze-excitation gating and
//! inverted residual blocks, tapped at strides 8, 16 and 32.

use crate::error::{ensure_eq, Error, Result};
use crate::layers::{ensure_channels, join, ConvLayer, Parameters};
use crate::tensor::{global_avg_pool, relu, ConvSpec, Tensor};

#[inline]
pub fn hard_sigmoid_scalar(x: f32) -> f32 {
    (x + 3.0).clamp(0.0, 6.0) / 6.0
}

/// `x * relu6(x + 3) / 6`.
#[inline]
pub fn h_swish_scalar(x: f32) -> f32 {
    x * hard_sigmoid_scalar(x)
}

pub fn h_swish(x: &Tensor) -> Tensor {
    x.map(h_swish_scalar)
}

pub fn hard_sigmoid(x: &Tensor) -> Tensor {
    x.map(hard_sigmoid_scalar)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    HSwish,
}

impl Activation {
    pub fn apply(self, x: &mut Tensor) {
        match self {
            Activation::Relu => x.map_inplace(|v| v.max(0.0)),
            Activation::HSwish => x.map_inplace(h_swish_scalar),
        }
    }
}

/// One row of the stage table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub expand_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub use_se: bool,
    pub activation: Activation,
}

const fn block(
    expand_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    use_se: bool,
    activation: Activation,
) -> BlockSpec {
    BlockSpec {
        expand_channels,
        out_channels,
        kernel,
        stride,
        use_se,
        activation,
    }
}

use Activation::{HSwish as HS, Relu as RE};

pub const STEM_CHANNELS: usize = 16;

/// MobileNetV3-Small bottleneck layout, without the classifier tail.
pub const STAGE_TABLE: [BlockSpec; 11] = [
    block(16, 16, 3, 2, true, RE),
    block(72, 24, 3, 2, false, RE),
    block(88, 24, 3, 1, false, RE),
    block(96, 40, 5, 2, true, HS),
    block(240, 40, 5, 1, true, HS),
    block(240, 40, 5, 1, true, HS),
    block(120, 48, 5, 1, true, HS),
    block(144, 48, 5, 1, true, HS),
    block(288, 96, 5, 2, true, HS),
    block(576, 96, 5, 1, true, HS),
    block(576, 96, 5, 1, true, HS),
];

/// Indices of the last block at strides 8, 16 and 32.
pub const TAP_BLOCKS: [usize; 3] = [2, 7, 10];

/// Channel count of each tapped level.
pub const TAP_CHANNELS: [usize; 3] = [24, 48, 96];

pub const SE_REDUCTION: usize = 4;

/// Squeeze-excitation weights: a `c -> c / 4 -> c` bottleneck of 1x1 convs.
#[derive(Clone, Debug, PartialEq)]
pub struct SeWeights {
    pub reduce: ConvLayer,
    pub expand: ConvLayer,
}

impl SeWeights {
    pub fn zeros(channels: usize) -> Self {
        let mid = channels / SE_REDUCTION;
        SeWeights {
            reduce: ConvLayer::zeros(channels, mid, ConvSpec::new(1)),
            expand: ConvLayer::zeros(mid, channels, ConvSpec::new(1)),
        }
    }
}

impl Parameters for SeWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.expand.visit(&join(prefix, "expand"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
    }
}

/// Per-channel gate `hard_sigmoid(W_e relu(W_r gap(x)))`, shape `(n, c, 1, 1)`.
pub fn se_gate(x: &Tensor, se: &SeWeights) -> Result<Tensor> {
    ensure_channels("se_block", se.reduce.weight.shape().c, x)?;
    ensure_eq(
        "se_block",
        "expand.out_channels",
        x.shape().c,
        se.expand.out_channels(),
    )?;
    let pooled = global_avg_pool(x)?;
    let hidden = relu(&se.reduce.forward(&pooled)?);
    Ok(hard_sigmoid(&se.expand.forward(&hidden)?))
}

/// Recalibrates channels of `x` by the squeeze-excitation gate.
pub fn se_block(x: &Tensor, se: &SeWeights) -> Result<Tensor> {
    let gate = se_gate(x, se)?;
    let s = x.shape();
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = gate.at(n, c, 0, 0);
            out.plane_mut(n, c).iter_mut().for_each(|v| *v *= g);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    /// Absent when the expansion width equals the input width.
    pub expand: Option<ConvLayer>,
    pub depthwise: ConvLayer,
    pub se: Option<SeWeights>,
    pub project: ConvLayer,
}

impl BlockWeights {
    pub fn zeros(in_channels: usize, spec: &BlockSpec) -> Self {
        let e = spec.expand_channels;
        BlockWeights {
            expand: (e != in_channels).then(|| ConvLayer::zeros(in_channels, e, ConvSpec::new(1))),
            depthwise: ConvLayer::zeros(
                e,
                e,
                ConvSpec::same(spec.kernel).with_stride(spec.stride).with_groups(e),
            ),
            se: spec.use_se.then(|| SeWeights::zeros(e)),
            project: ConvLayer::zeros(e, spec.out_channels, ConvSpec::new(1)),
        }
    }

    pub fn in_channels(&self) -> usize {
        match &self.expand {
            Some(e) => e.weight.shape().c,
            None => self.depthwise.out_channels(),
        }
    }
}

impl Parameters for BlockWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        if let Some(e) = &self.expand {
            e.visit(&join(prefix, "expand"), f);
        }
        self.depthwise.visit(&join(prefix, "dw"), f);
        if let Some(se) = &self.se {
            se.visit(&join(prefix, "se"), f);
        }
        self.project.visit(&join(prefix, "project"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        if let Some(e) = &mut self.expand {
            e.visit_mut(&join(prefix, "expand"), f);
        }
        self.depthwise.visit_mut(&join(prefix, "dw"), f);
        if let Some(se) = &mut self.se {
            se.visit_mut(&join(prefix, "se"), f);
        }
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

/// Whether a block with this geometry carries a skip connection.
pub fn has_residual(in_channels: usize, spec: &BlockSpec) -> bool {
    spec.stride == 1 && in_channels == spec.out_channels
}

/// expand 1x1 -> depthwise kxk -> optional SE -> linear project 1x1, plus the
/// skip connection when stride is 1 and the width is unchanged.
pub fn inverted_residual(x: &Tensor, spec: &BlockSpec, w: &BlockWeights) -> Result<Tensor> {
    const CTX: &str = "inverted_residual";
    let in_c = x.shape().c;
    ensure_eq(CTX, "in_channels", w.in_channels(), in_c)?;
    ensure_eq(CTX, "expand_channels", spec.expand_channels, w.depthwise.out_channels())?;
    ensure_eq(CTX, "out_channels", spec.out_channels, w.project.out_channels())?;
    ensure_eq(CTX, "kernel", spec.kernel, w.depthwise.spec.kernel.0)?;
    ensure_eq(CTX, "stride", spec.stride, w.depthwise.spec.stride.0)?;
    if spec.use_se != w.se.is_some() {
        return Err(Error::Validation(format!(
            "{CTX}: block spec use_se = {} but SE weights {}",
            spec.use_se,
            if w.se.is_some() { "present" } else { "absent" }
        )));
    }

    let mut h = match &w.expand {
        Some(e) => {
            let mut t = e.forward(x)?;
            spec.activation.apply(&mut t);
            t
        }
        None => x.clone(),
    };
    h = w.depthwise.forward(&h)?;
    spec.activation.apply(&mut h);
    if let Some(se) = &w.se {
        h = se_block(&h, se)?;
    }
    let out = w.project.forward(&h)?;
    if has_residual(in_c, spec) {
        out.add(x)
    } else {
        Ok(out)
    }
}

/// Feature maps at strides 8, 16 and 32.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    pub levels: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stem: ConvLayer,
    pub blocks: Vec<(BlockSpec, BlockWeights)>,
}

impl Backbone {
    /// Zero-initialized backbone following [`STAGE_TABLE`] for an RGB input.
    pub fn zeros() -> Self {
        let stem = ConvLayer::zeros(3, STEM_CHANNELS, ConvSpec::same(3).with_stride(2));
        let mut in_c = STEM_CHANNELS;
        let blocks = STAGE_TABLE
            .iter()
            .map(|spec| {
                let w = BlockWeights::zeros(in_c, spec);
                in_c = spec.out_channels;
                (*spec, w)
            })
            .collect();
        Backbone { stem, blocks }
    }

    /// Stem convolution output before its activation.
    pub fn stem_preactivation(&self, image: &Tensor) -> Result<Tensor> {
        ensure_eq("backbone_forward", "c", 3, image.shape().c)?;
        self.stem.forward(image)
    }

    pub fn forward(&self, image: &Tensor) -> Result<BackboneOutput> {
        let mut x = self.stem_preactivation(image)?;
        Activation::HSwish.apply(&mut x);
        let mut levels = Vec::with_capacity(TAP_BLOCKS.len());
        for (i, (spec, w)) in self.blocks.iter().enumerate() {
            x = inverted_residual(&x, spec, w)?;
            if TAP_BLOCKS.contains(&i) {
                levels.push(x.clone());
            }
        }
        Ok(BackboneOutput { levels })
    }
}

impl Parameters for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, (_, w)) in self.blocks.iter().enumerate() {
            w.visit(&join(prefix, &format!("b{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, (_, w)) in self.blocks.iter_mut().enumerate() {
            w.visit_mut(&join(prefix, &format!("b{i}")), f);
        }
    }
}

/// Runs the backbone; see [`Backbone::forward`].
pub fn backbone_forward(image: &Tensor, weights: &Backbone) -> Result<BackboneOutput> {
    weights.forward(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize(p: &mut impl Parameters, seed: u64, scale: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.visit_mut("", &mut |_, _, data| {
            data.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale))
        });
    }

    #[test]
    fn activation_examples() {
        assert_eq!(h_swish_scalar(-3.0), 0.0);
        assert_eq!(h_swish_scalar(3.0), 3.0);
        assert!((h_swish_scalar(1.0) - 4.0 / 6.0).abs() < 1e-7);
        assert_eq!(hard_sigmoid_scalar(-3.0), 0.0);
        assert_eq!(hard_sigmoid_scalar(3.0), 1.0);
        assert_eq!(hard_sigmoid_scalar(0.0), 0.5);
        assert_eq!(h_swish_scalar(-10.0), 0.0);
        assert_eq!(hard_sigmoid_scalar(100.0), 1.0);
    }

    #[test]
    fn se_identity_and_null_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::random_uniform(Shape::new(1, 8, 4, 4), -1.0, 1.0, &mut rng);
        let mut se = SeWeights::zeros(8);
        // hard_sigmoid(3) == 1
        se.expand.bias.iter_mut().for_each(|b| *b = 3.0);
        assert_eq!(se_block(&x, &se).unwrap(), x);
        se.expand.bias.iter_mut().for_each(|b| *b = -3.0);
        assert!(se_block(&x, &se).unwrap().data().iter().all(|&v| v == 0.0));
        let wrong = SeWeights::zeros(4);
        assert!(se_block(&x, &wrong).is_err());
    }

    #[test]
    fn se_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::random_uniform(Shape::new(2, 8, 5, 3), -1.0, 1.0, &mut rng);
        let mut se = SeWeights::zeros(8);
        randomize(&mut se, 11, 1.0);
        let got = se_block(&x, &se).unwrap();
        let s = x.shape();
        for n in 0..s.n {
            let mean: Vec<f64> = (0..8)
                .map(|c| x.plane(n, c).iter().map(|&v| v as f64).sum::<f64>() / 15.0)
                .collect();
            let hidden: Vec<f64> = (0..2)
                .map(|m| {
                    let mut acc = se.reduce.bias[m] as f64;
                    for c in 0..8 {
                        acc += se.reduce.weight.at(m, c, 0, 0) as f64 * mean[c];
                    }
                    acc.max(0.0)
                })
                .collect();
            for c in 0..8 {
                let mut z = se.expand.bias[c] as f64;
                for m in 0..2 {
                    z += se.expand.weight.at(c, m, 0, 0) as f64 * hidden[m];
                }
                let gate = ((z + 3.0).clamp(0.0, 6.0) / 6.0) as f32;
                for (a, b) in got.plane(n, c).iter().zip(x.plane(n, c)) {
                    assert!((a - b * gate).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn residual_identity_and_strided_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::random_uniform(Shape::new(1, 40, 7, 7), -1.0, 1.0, &mut rng);
        let spec = STAGE_TABLE[4];
        let w = BlockWeights::zeros(40, &spec);
        assert_eq!(inverted_residual(&x, &spec, &w).unwrap(), x);

        let spec = STAGE_TABLE[3];
        let x = Tensor::random_uniform(Shape::new(1, 24, 7, 7), -1.0, 1.0, &mut rng);
        let w = BlockWeights::zeros(24, &spec);
        let y = inverted_residual(&x, &spec, &w).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 40, 4, 4));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverted_residual_matches_op_by_op_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (idx, in_c) in [(0usize, 16usize), (2, 24), (4, 40)] {
            let spec = STAGE_TABLE[idx];
            let mut w = BlockWeights::zeros(in_c, &spec);
            randomize(&mut w, 100 + idx as u64, 0.5);
            let x = Tensor::random_uniform(Shape::new(1, in_c, 9, 9), -1.0, 1.0, &mut rng);
            let got = inverted_residual(&x, &spec, &w).unwrap();

            let act = |t: Tensor| match spec.activation {
                Activation::Relu => relu(&t),
                Activation::HSwish => h_swish(&t),
            };
            let mut h = x.clone();
            if let Some(e) = &w.expand {
                h = act(conv2d(&h, &e.weight, Some(&e.bias), ConvSpec::new(1)).unwrap());
            }
            let e = spec.expand_channels;
            let dw = ConvSpec::same(spec.kernel).with_stride(spec.stride).with_groups(e);
            h = act(conv2d(&h, &w.depthwise.weight, Some(&w.depthwise.bias), dw).unwrap());
            if let Some(se) = &w.se {
                let gate = se_gate(&h, se).unwrap();
                h = Tensor::from_fn(h.shape(), |n, c, y, xx| h.at(n, c, y, xx) * gate.at(n, c, 0, 0));
            }
            let mut out = conv2d(&h, &w.project.weight, Some(&w.project.bias), ConvSpec::new(1)).unwrap();
            if spec.stride == 1 && in_c == spec.out_channels {
                out = out.add(&x).unwrap();
            }
            assert!(got.max_abs_diff(&out) <= 1e-5, "block {idx}");
        }
    }

    #[test]
    fn residual_present_iff_stride_one_and_equal_width() {
        let backbone = Backbone::zeros();
        let mut in_c = STEM_CHANNELS;
        let expected = [false, false, true, false, true, true, false, true, false, true, true];
        for (i, (spec, _)) in backbone.blocks.iter().enumerate() {
            assert_eq!(has_residual(in_c, spec), expected[i], "block {i}");
            assert_eq!(has_residual(in_c, spec), spec.stride == 1 && in_c == spec.out_channels);
            in_c = spec.out_channels;
        }
    }

    #[test]
    fn level_extents_for_400_input() {
        let backbone = Backbone::zeros();
        let img = Tensor::zeros(Shape::new(1, 3, 400, 400));
        let out = backbone.forward(&img).unwrap();
        let dims: Vec<_> = out.levels.iter().map(|t| (t.shape().c, t.shape().h, t.shape().w)).collect();
        assert_eq!(dims, vec![(24, 50, 50), (48, 25, 25), (96, 13, 13)]);
        assert!(out.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let backbone = Backbone::zeros();
        let img = Tensor::zeros(Shape::new(1, 1, 32, 32));
        assert!(matches!(backbone.forward(&img), Err(Error::Dimension { .. })));
    }

    #[test]
    fn parameter_count_matches_stage_table_formula() {
        let mut expected = 3 * STEM_CHANNELS * 9 + STEM_CHANNELS;
        let mut in_c = STEM_CHANNELS;
        for spec in STAGE_TABLE {
            let e = spec.expand_channels;
            if e != in_c {
                expected += in_c * e + e;
            }
            expected += e * spec.kernel * spec.kernel + e;
            if spec.use_se {
                let m = e / 4;
                expected += e * m + m + m * e + e;
            }
            expected += e * spec.out_channels + spec.out_channels;
            in_c = spec.out_channels;
        }
        assert_eq!(Backbone::zeros().param_count(), expected);
    }

    #[test]
    fn stem_is_linear_before_activation() {
        let mut backbone = Backbone::zeros();
        randomize(&mut backbone.stem, 3, 0.2);
        backbone.stem.bias.iter_mut().for_each(|b| *b = 0.0);
        let a = Tensor::full(Shape::new(1, 3, 16, 16), 0.25);
        let b = Tensor::full(Shape::new(1, 3, 16, 16), 0.5);
        let fa = backbone.stem_preactivation(&a).unwrap();
        let fb = backbone.stem_preactivation(&b).unwrap();
        assert_eq!(fa.scale(2.0), fb);
    }
}
