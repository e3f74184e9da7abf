//! Adaptive feature disentanglement: offset generation, task-specific
//! deformable sampling for the classification and regression branches, the
//! exact analytical backward pass, and dynamically weighted level fusion.
//!
//! Sampling positions are `p + q + dp_q` where `p` is the output location,
//! `q` ranges over the centred `k x k` grid and `dp_q` is read from the offset
//! field. Values are read by bilinear interpolation with zero padding, so any
//! offset is legal and the zero-offset case is exactly a same-padded
//! convolution.

use crate::error::{ensure_eq, Error, Result};
use crate::kernels;
use crate::layers::{ensure_channels, join, ConvLayer, Kernel, Parameters, Vector};
use crate::neck::Pyramid;
use crate::tensor::{cell, resize_nearest, ConvSpec, Shape, Tensor};

/// Kernel size of every deformable convolution.
pub const KERNEL: usize = 3;

/// Per-location, per-tap displacements, shape `(n, 2 k k, h, w)`.
///
/// Channel `2 q` holds `dx` and `2 q + 1` holds `dy` for tap `q = ky * k + kx`,
/// in feature-map pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    tensor: Tensor,
    kernel: usize,
}

impl OffsetField {
    pub fn new(tensor: Tensor, kernel: usize) -> Result<Self> {
        ensure_eq("OffsetField", "c", 2 * kernel * kernel, tensor.shape().c)?;
        Ok(OffsetField { tensor, kernel })
    }

    pub fn zeros(n: usize, kernel: usize, h: usize, w: usize) -> Self {
        OffsetField {
            tensor: Tensor::zeros(Shape::new(n, 2 * kernel * kernel, h, w)),
            kernel,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Mean over taps of `|dp_q|` at every location, shape `(n, 1, h, w)`.
    pub fn mean_magnitude(&self) -> Tensor {
        let s = self.tensor.shape();
        let taps = self.kernel * self.kernel;
        Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, x| {
            let mut acc = 0.0f64;
            for q in 0..taps {
                let dx = self.tensor.at(n, 2 * q, y, x) as f64;
                let dy = self.tensor.at(n, 2 * q + 1, y, x) as f64;
                acc += dx.hypot(dy);
            }
            (acc / taps as f64) as f32
        })
    }
}

/// Task-specific features produced from one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledFeatures {
    pub f_cls: Tensor,
    pub f_reg: Tensor,
}

/// Raw per-level fusion logits; normalized by softmax before use.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub raw: Vec<f32>,
}

impl FusionWeights {
    pub fn new(raw: Vec<f32>) -> Self {
        FusionWeights { raw }
    }

    /// Softmax over levels.
    pub fn normalized(&self) -> Vec<f64> {
        let max = self.raw.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = self.raw.iter().map(|&w| (w as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }
}

/// Runs the offset sub-network and splits its output into the
/// classification (first half) and regression (second half) fields.
pub fn offset_gen(f: &Tensor, phi: &ConvLayer) -> Result<(OffsetField, OffsetField)> {
    let half = 2 * KERNEL * KERNEL;
    ensure_eq("offset_gen", "phi.out_channels", 2 * half, phi.out_channels())?;
    ensure_channels("offset_gen", phi.weight.shape().c, f)?;
    let raw = phi.forward(f)?;
    Ok((
        OffsetField::new(raw.narrow_channels(0, half)?, KERNEL)?,
        OffsetField::new(raw.narrow_channels(half, half)?, KERNEL)?,
    ))
}

/// Bilinear footprint of one sampling position.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    /// Flat plane indices of the four corners (`y0x0, y0x1, y1x0, y1x1`), `None` outside the grid.
    idx: [Option<usize>; 4],
    fx: f64,
    fy: f64,
}

impl Footprint {
    fn new(sx: f64, sy: f64, h: usize, w: usize) -> Self {
        let (x0, fx) = cell(sx);
        let (y0, fy) = cell(sy);
        let at = |y: i64, x: i64| {
            (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
        };
        Footprint {
            idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
            fx,
            fy,
        }
    }

    #[inline]
    fn corners(&self, plane: &[f32]) -> [f64; 4] {
        self.idx.map(|i| i.map_or(0.0, |i| plane[i] as f64))
    }

    #[inline]
    fn value(&self, plane: &[f32]) -> f64 {
        let [v00, v01, v10, v11] = self.corners(plane);
        let (fx, fy) = (self.fx, self.fy);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx]
    }

    /// `(d/dx, d/dy)` of the interpolant inside this cell.
    #[inline]
    fn gradient(&self, plane: &[f32]) -> (f64, f64) {
        let [v00, v01, v10, v11] = self.corners(plane);
        let (fx, fy) = (self.fx, self.fy);
        (
            (1.0 - fy) * (v01 - v00) + fy * (v11 - v10),
            (1.0 - fx) * (v10 - v00) + fx * (v11 - v01),
        )
    }
}

fn check_shapes(context: &'static str, f: &Tensor, weights: &Tensor, offsets: &OffsetField) -> Result<()> {
    let fs = f.shape();
    let ws = weights.shape();
    let os = offsets.tensor.shape();
    ensure_eq(context, "weight.in_channels", fs.c, ws.c)?;
    ensure_eq(context, "weight.kh", offsets.kernel, ws.h)?;
    ensure_eq(context, "weight.kw", offsets.kernel, ws.w)?;
    if offsets.kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "{context}: kernel must be odd for same padding, got {}",
            offsets.kernel
        )));
    }
    ensure_eq(context, "offsets.n", fs.n, os.n)?;
    ensure_eq(context, "offsets.h", fs.h, os.h)?;
    ensure_eq(context, "offsets.w", fs.w, os.w)
}

/// Sampling footprints for batch item `n`, indexed `[q * p + pos]`.
fn footprints(offsets: &OffsetField, n: usize, h: usize, w: usize) -> Vec<Footprint> {
    let k = offsets.kernel;
    let half = (k / 2) as f64;
    let p = h * w;
    let mut out = Vec::with_capacity(k * k * p);
    for ky in 0..k {
        for kx in 0..k {
            let q = ky * k + kx;
            let dx = offsets.tensor.plane(n, 2 * q);
            let dy = offsets.tensor.plane(n, 2 * q + 1);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let sx = x as f64 + kx as f64 - half + dx[i] as f64;
                    let sy = y as f64 + ky as f64 - half + dy[i] as f64;
                    out.push(Footprint::new(sx, sy, h, w));
                }
            }
        }
    }
    out
}

/// Deformable column matrix `(c k k) x (h w)` for batch item `n`.
fn deform_columns(f: &Tensor, n: usize, fp: &[Footprint], kk: usize) -> Vec<f64> {
    let s = f.shape();
    let p = s.plane();
    let mut col = vec![0.0f64; s.c * kk * p];
    for c in 0..s.c {
        let plane = f.plane(n, c);
        for q in 0..kk {
            let row = &mut col[(c * kk + q) * p..(c * kk + q + 1) * p];
            for (dst, foot) in row.iter_mut().zip(&fp[q * p..(q + 1) * p]) {
                *dst = foot.value(plane);
            }
        }
    }
    col
}

/// Deformable convolution evaluated entirely in `f64`, returned flat in
/// `(n, out_c, h, w)` order.
pub(crate) fn deform_forward_f64(f: &Tensor, weights: &Tensor, offsets: &OffsetField) -> Result<Vec<f64>> {
    check_shapes("deform_conv_forward", f, weights, offsets)?;
    let s = f.shape();
    let out_c = weights.shape().n;
    let kk = offsets.kernel * offsets.kernel;
    let p = s.plane();
    let mut out = vec![0.0f64; s.n * out_c * p];
    for n in 0..s.n {
        let fp = footprints(offsets, n, s.h, s.w);
        let col = deform_columns(f, n, &fp, kk);
        kernels::gemm(weights.data(), &col, None, &mut out[n * out_c * p..(n + 1) * out_c * p], s.c * kk, p);
    }
    Ok(out)
}

/// `out(p) = sum_q W(q) * F(p + q + dp_q)`, stride 1 with same padding.
///
/// `weights` is `(out_c, in_c, k, k)`; `offsets` must match the spatial
/// extent and batch size of `f`.
pub fn deform_conv_forward(f: &Tensor, weights: &Tensor, offsets: &OffsetField) -> Result<Tensor> {
    check_shapes("deform_conv_forward", f, weights, offsets)?;
    let s = f.shape();
    let out_c = weights.shape().n;
    let kk = offsets.kernel * offsets.kernel;
    let p = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, out_c, s.h, s.w));
    for n in 0..s.n {
        let fp = footprints(offsets, n, s.h, s.w);
        let col = deform_columns(f, n, &fp, kk);
        let dst = &mut out.data_mut()[n * out_c * p..(n + 1) * out_c * p];
        kernels::gemm(weights.data(), &col, None, dst, s.c * kk, p);
    }
    Ok(out)
}

/// Gradients of a scalar loss with respect to every input of
/// [`deform_conv_forward`], given the gradient at its output.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformGrads {
    pub grad_input: Tensor,
    pub grad_weights: Tensor,
    pub grad_offsets: Tensor,
}

/// Exact analytical backward pass.
///
/// The offset gradient is the kernel-weighted spatial derivative of the
/// bilinear interpolant at each sampling point. The interpolant has kinks
/// on integer coordinates; there the one-sided derivative from below is used.
pub fn deform_conv_backward(
    f: &Tensor,
    weights: &Tensor,
    offsets: &OffsetField,
    grad_out: &Tensor,
) -> Result<DeformGrads> {
    const CTX: &str = "deform_conv_backward";
    check_shapes(CTX, f, weights, offsets)?;
    let s = f.shape();
    let ws = weights.shape();
    let gs = grad_out.shape();
    ensure_eq(CTX, "grad_out.n", s.n, gs.n)?;
    ensure_eq(CTX, "grad_out.c", ws.n, gs.c)?;
    ensure_eq(CTX, "grad_out.h", s.h, gs.h)?;
    ensure_eq(CTX, "grad_out.w", s.w, gs.w)?;

    let out_c = ws.n;
    let kk = offsets.kernel * offsets.kernel;
    let p = s.plane();
    let rows = s.c * kk;
    let wd = weights.data();

    let mut grad_w = vec![0.0f64; out_c * rows];
    let mut grad_f = vec![0.0f64; s.numel()];
    let mut grad_off = vec![0.0f64; s.n * 2 * kk * p];
    let mut grad_col = vec![0.0f64; rows * p];

    for n in 0..s.n {
        let fp = footprints(offsets, n, s.h, s.w);
        let col = deform_columns(f, n, &fp, kk);
        let g = &grad_out.data()[n * out_c * p..(n + 1) * out_c * p];

        // dL/dW[o, r] = sum_p g[o, p] col[r, p]
        for o in 0..out_c {
            let go = &g[o * p..(o + 1) * p];
            for r in 0..rows {
                let cr = &col[r * p..(r + 1) * p];
                let mut acc = 0.0f64;
                for (a, b) in go.iter().zip(cr) {
                    acc += *a as f64 * b;
                }
                grad_w[o * rows + r] += acc;
            }
        }

        // dL/dcol[r, p] = sum_o W[o, r] g[o, p]
        grad_col.fill(0.0);
        for o in 0..out_c {
            let go = &g[o * p..(o + 1) * p];
            for r in 0..rows {
                let wv = wd[o * rows + r] as f64;
                let dst = &mut grad_col[r * p..(r + 1) * p];
                for (d, &gv) in dst.iter_mut().zip(go) {
                    *d += wv * gv as f64;
                }
            }
        }

        for c in 0..s.c {
            let plane = f.plane(n, c);
            let gf = &mut grad_f[(n * s.c + c) * p..(n * s.c + c + 1) * p];
            for q in 0..kk {
                let gc = &grad_col[(c * kk + q) * p..(c * kk + q + 1) * p];
                let (gx, gy) = grad_off[(n * 2 * kk + 2 * q) * p..(n * 2 * kk + 2 * q + 2) * p].split_at_mut(p);
                for pos in 0..p {
                    let foot = &fp[q * p + pos];
                    let gv = gc[pos];
                    for (idx, wgt) in foot.idx.iter().zip(foot.weights()) {
                        if let Some(i) = idx {
                            gf[*i] += gv * wgt;
                        }
                    }
                    let (dx, dy) = foot.gradient(plane);
                    gx[pos] += gv * dx;
                    gy[pos] += gv * dy;
                }
            }
        }
    }

    let to_tensor = |shape: Shape, v: Vec<f64>| Tensor::from_vec(shape, v.into_iter().map(|x| x as f32).collect());
    Ok(DeformGrads {
        grad_input: to_tensor(s, grad_f)?,
        grad_weights: to_tensor(ws, grad_w)?,
        grad_offsets: to_tensor(offsets.tensor.shape(), grad_off)?,
    })
}

/// Offset network and branch kernels for one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformLevel {
    /// 3x3 same-padded conv producing `4 k k` channels: cls offsets then reg offsets.
    pub phi: ConvLayer,
    pub w_cls: Kernel,
    pub w_reg: Kernel,
}

impl DeformLevel {
    pub fn zeros(channels: usize) -> Self {
        let kshape = Shape::new(channels, channels, KERNEL, KERNEL);
        DeformLevel {
            phi: ConvLayer::zeros(channels, 4 * KERNEL * KERNEL, ConvSpec::same(3)),
            w_cls: Kernel(Tensor::zeros(kshape)),
            w_reg: Kernel(Tensor::zeros(kshape)),
        }
    }

    /// Returns the features together with the two offset fields that produced them.
    pub fn forward_with_offsets(&self, f: &Tensor) -> Result<(DisentangledFeatures, OffsetField, OffsetField)> {
        let (off_cls, off_reg) = offset_gen(f, &self.phi)?;
        let f_cls = deform_conv_forward(f, &self.w_cls.0, &off_cls)?;
        let f_reg = deform_conv_forward(f, &self.w_reg.0, &off_reg)?;
        Ok((DisentangledFeatures { f_cls, f_reg }, off_cls, off_reg))
    }

    pub fn forward(&self, f: &Tensor) -> Result<DisentangledFeatures> {
        Ok(self.forward_with_offsets(f)?.0)
    }
}

impl Parameters for DeformLevel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.phi.visit(&join(prefix, "phi"), f);
        self.w_cls.visit(&join(prefix, "cls.weight"), f);
        self.w_reg.visit(&join(prefix, "reg.weight"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.phi.visit_mut(&join(prefix, "phi"), f);
        self.w_cls.visit_mut(&join(prefix, "cls.weight"), f);
        self.w_reg.visit_mut(&join(prefix, "reg.weight"), f);
    }
}

/// All per-level deformable branches plus the per-branch fusion logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangleModule {
    pub levels: Vec<DeformLevel>,
    pub fusion_cls: Vector,
    pub fusion_reg: Vector,
}

impl DisentangleModule {
    pub fn zeros(channels: usize, num_levels: usize) -> Self {
        DisentangleModule {
            levels: (0..num_levels).map(|_| DeformLevel::zeros(channels)).collect(),
            fusion_cls: Vector(vec![0.0; num_levels]),
            fusion_reg: Vector(vec![0.0; num_levels]),
        }
    }

    pub fn forward(&self, pyramid: &Pyramid) -> Result<Vec<DisentangledFeatures>> {
        ensure_eq("disentangle_forward", "levels", self.levels.len(), pyramid.levels.len())?;
        self.levels
            .iter()
            .zip(&pyramid.levels)
            .map(|(lvl, f)| lvl.forward(f))
            .collect()
    }

    /// Dynamically weighted fusion of each branch across levels, at the
    /// finest level's resolution.
    pub fn fuse(&self, features: &[DisentangledFeatures]) -> Result<DisentangledFeatures> {
        let cls: Vec<Tensor> = features.iter().map(|f| f.f_cls.clone()).collect();
        let reg: Vec<Tensor> = features.iter().map(|f| f.f_reg.clone()).collect();
        Ok(DisentangledFeatures {
            f_cls: dynamic_fuse(&cls, &FusionWeights::new(self.fusion_cls.0.clone()))?,
            f_reg: dynamic_fuse(&reg, &FusionWeights::new(self.fusion_reg.0.clone()))?,
        })
    }
}

impl Parameters for DisentangleModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        for (l, lvl) in self.levels.iter().enumerate() {
            lvl.visit(&join(prefix, &format!("l{l}")), f);
        }
        self.fusion_cls.visit(&join(prefix, "fusion.cls"), f);
        self.fusion_reg.visit(&join(prefix, "fusion.reg"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        for (l, lvl) in self.levels.iter_mut().enumerate() {
            lvl.visit_mut(&join(prefix, &format!("l{l}")), f);
        }
        self.fusion_cls.visit_mut(&join(prefix, "fusion.cls"), f);
        self.fusion_reg.visit_mut(&join(prefix, "fusion.reg"), f);
    }
}

pub fn disentangle_forward(pyramid: &Pyramid, weights: &DisentangleModule) -> Result<Vec<DisentangledFeatures>> {
    weights.forward(pyramid)
}

/// `sum_l softmax(w)_l * level_l`, every level first resampled (nearest) to
/// the extent of `levels[0]`.
pub fn dynamic_fuse(levels: &[Tensor], fusion: &FusionWeights) -> Result<Tensor> {
    const CTX: &str = "dynamic_fuse";
    ensure_eq(CTX, "levels", fusion.raw.len(), levels.len())?;
    let first = levels
        .first()
        .ok_or_else(|| Error::InvalidArgument("dynamic_fuse: no levels".into()))?;
    let s = first.shape();
    for t in levels {
        ensure_eq(CTX, "n", s.n, t.shape().n)?;
        ensure_eq(CTX, "c", s.c, t.shape().c)?;
    }
    let weights = fusion.normalized();
    let mut acc = vec![0.0f64; s.numel()];
    for (t, &wt) in levels.iter().zip(&weights) {
        let resampled;
        let src = if t.shape() == s {
            t
        } else {
            resampled = resize_nearest(t, s.h, s.w);
            &resampled
        };
        for (a, &v) in acc.iter_mut().zip(src.data()) {
            *a += wt * v as f64;
        }
    }
    Tensor::from_vec(s, acc.into_iter().map(|v| v as f32).collect())
}
