//! Parameterised building blocks and the named-parameter visitor used for
//! serialization, initialization and parameter counting.

use crate::error::{ensure_eq, Result};
use crate::tensor::{conv2d, ConvSpec, Shape, Tensor};

/// Walks every learnable tensor under a dotted name.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32]));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32]));

    fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, _, data| total += data.len());
        total
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A convolution with folded batch-norm, i.e. weight plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub spec: ConvSpec,
}

impl ConvLayer {
    /// Zero-initialized layer mapping `in_c -> out_c` channels.
    pub fn zeros(in_c: usize, out_c: usize, spec: ConvSpec) -> Self {
        let (kh, kw) = spec.kernel;
        ConvLayer {
            weight: Tensor::zeros(Shape::new(out_c, in_c / spec.groups.max(1), kh, kw)),
            bias: vec![0.0; out_c],
            spec,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.spec)
    }
}

impl Parameters for ConvLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        f(&join(prefix, "weight"), &self.weight.shape().dims(), self.weight.data());
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        let dims = self.weight.shape().dims();
        f(&join(prefix, "weight"), &dims, self.weight.data_mut());
        let n = self.bias.len();
        f(&join(prefix, "bias"), &[n], &mut self.bias);
    }
}

/// A bias-free kernel, as used by the deformable branches.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel(pub Tensor);

impl Parameters for Kernel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        f(prefix, &self.0.shape().dims(), self.0.data());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        let dims = self.0.shape().dims();
        f(prefix, &dims, self.0.data_mut());
    }
}

/// Plain vector parameter (fusion logits and the like).
#[derive(Clone, Debug, PartialEq)]
pub struct Vector(pub Vec<f32>);

impl Parameters for Vector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        f(prefix, &[self.0.len()], &self.0);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        let n = self.0.len();
        f(prefix, &[n], &mut self.0);
    }
}

pub(crate) fn ensure_channels(context: &'static str, expected: usize, x: &Tensor) -> Result<()> {
    ensure_eq(context, "c", expected, x.shape().c)
}
