//! Dense NCHW tensors and the primitive kernels the network is built from.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{ensure_eq, Error, Result};
use crate::kernels::{self, PlaneGeom};

/// Extents of a rank-4 `(n, c, h, w)` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major `f32` tensor in `(n, c, h, w)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        ensure_eq("Tensor::from_vec", "numel", shape.numel(), data.len())?;
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Values drawn uniformly from `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: Shape, lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// The `h x w` plane for batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of batch item `n`.
    pub fn item(&self, n: usize) -> &[f32] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32 + Sync) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.ensure_same_shape("Tensor::add", other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn ensure_same_shape(&self, context: &'static str, other: &Tensor) -> Result<()> {
        let (a, b) = (self.shape, other.shape);
        ensure_eq(context, "n", a.n, b.n)?;
        ensure_eq(context, "c", a.c, b.c)?;
        ensure_eq(context, "h", a.h, b.h)?;
        ensure_eq(context, "w", a.w, b.w)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Keeps the top-left `h x w` window of every plane.
    pub fn crop(&self, h: usize, w: usize) -> Result<Tensor> {
        if h > self.shape.h {
            return Err(Error::dim("Tensor::crop", "h", self.shape.h, h));
        }
        if w > self.shape.w {
            return Err(Error::dim("Tensor::crop", "w", self.shape.w, w));
        }
        let s = self.shape;
        Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
            self.at(n, c, y, x)
        }))
    }

    /// Selects channels `[start, start + len)`.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if start + len > s.c {
            return Err(Error::dim("Tensor::narrow_channels", "c", s.c, start + len));
        }
        let mut data = Vec::with_capacity(s.n * len * s.plane());
        for n in 0..s.n {
            for c in start..start + len {
                data.extend_from_slice(self.plane(n, c));
            }
        }
        Ok(Tensor {
            shape: Shape::new(s.n, len, s.h, s.w),
            data,
        })
    }
}

/// Kernel geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, no padding, ungrouped.
    pub const fn new(k: usize) -> Self {
        ConvSpec {
            kernel: (k, k),
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }

    /// Square kernel with `k / 2` padding, so stride 1 preserves the extent.
    pub const fn same(k: usize) -> Self {
        ConvSpec {
            kernel: (k, k),
            stride: (1, 1),
            padding: (k / 2, k / 2),
            groups: 1,
        }
    }

    pub const fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub const fn with_padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub const fn with_groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    /// Output extent along one axis: `floor((len + 2 pad - k) / stride) + 1`.
    pub fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if padded < k || stride == 0 {
            None
        } else {
            Some((padded - k) / stride + 1)
        }
    }

    fn geometry(&self, h: usize, w: usize) -> Result<PlaneGeom> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel and stride must be positive, got kernel {:?} stride {:?}",
                self.kernel, self.stride
            )));
        }
        let oh = Self::out_extent(h, kh, sh, ph).ok_or(Error::dim("conv2d", "h", kh, h + 2 * ph))?;
        let ow = Self::out_extent(w, kw, sw, pw).ok_or(Error::dim("conv2d", "w", kw, w + 2 * pw))?;
        Ok(PlaneGeom {
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            oh,
            ow,
        })
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `weights` is `(out_c, in_c / groups, kh, kw)`. Only ungrouped and
/// depthwise (`groups == in_c`) layouts are supported.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: Option<&[f32]>, spec: ConvSpec) -> Result<Tensor> {
    const CTX: &str = "conv2d";
    let s = input.shape();
    let ws = weights.shape();
    let groups = spec.groups;
    if groups == 0 || (groups != 1 && groups != s.c) {
        return Err(Error::InvalidArgument(format!(
            "conv2d: groups must be 1 or equal to input channels ({}), got {groups}",
            s.c
        )));
    }
    ensure_eq(CTX, "weight.in_channels", s.c / groups, ws.c)?;
    ensure_eq(CTX, "weight.kh", spec.kernel.0, ws.h)?;
    ensure_eq(CTX, "weight.kw", spec.kernel.1, ws.w)?;
    if ws.n % groups != 0 {
        return Err(Error::dim(CTX, "weight.out_channels", groups, ws.n));
    }
    if let Some(b) = bias {
        ensure_eq(CTX, "bias", ws.n, b.len())?;
    }
    let g = spec.geometry(s.h, s.w)?;
    let out_c = ws.n;
    let p = g.oh * g.ow;
    let mut out = Tensor::zeros(Shape::new(s.n, out_c, g.oh, g.ow));
    if p == 0 || out_c == 0 {
        return Ok(out);
    }

    if groups == 1 {
        let k = s.c * g.kh * g.kw;
        let direct = g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0;
        let mut col = if direct { Vec::new() } else { vec![0.0f32; k * p] };
        for n in 0..s.n {
            let item_out = &mut out.data[n * out_c * p..(n + 1) * out_c * p];
            if direct {
                kernels::gemm(weights.data(), input.item(n), bias, item_out, k, p);
            } else {
                kernels::im2col(input.item(n), s.c, &g, &mut col);
                kernels::gemm(weights.data(), &col, bias, item_out, k, p);
            }
        }
    } else {
        let mult = out_c / groups;
        let kk = g.kh * g.kw;
        let planes = out.data.len() / p;
        let run = |(idx, dst): (usize, &mut [f32]), acc: &mut Vec<f64>| {
            let n = idx / out_c;
            let oc = idx % out_c;
            let ic = oc / mult;
            let b = bias.map_or(0.0, |b| b[oc]);
            kernels::depthwise_plane(
                input.plane(n, ic),
                &weights.data()[oc * kk..(oc + 1) * kk],
                b,
                &g,
                dst,
                acc,
            );
        };
        if planes * p * kk >= 1 << 16 {
            out.data
                .par_chunks_mut(p)
                .enumerate()
                .for_each_init(Vec::new, |acc, item| run(item, acc));
        } else {
            let mut acc = Vec::new();
            out.data.chunks_mut(p).enumerate().for_each(|item| run(item, &mut acc));
        }
    }
    Ok(out)
}

/// Mean over the spatial axes, giving `(n, c, 1, 1)`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.h == 0 {
        return Err(Error::dim("global_avg_pool", "h", 1, 0));
    }
    if s.w == 0 {
        return Err(Error::dim("global_avg_pool", "w", 1, 0));
    }
    let denom = s.plane() as f64;
    let data = input
        .data()
        .chunks(s.plane())
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / denom) as f32)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)
}

/// Bilinear weights of the grid cell used to interpolate at coordinate `t`.
///
/// Returns the lower corner index and the fractional position inside the
/// cell. At an exact integer coordinate the cell to the left/below is chosen
/// (`frac == 1`); the interpolated value is identical either way, and the
/// spatial derivative then takes the one-sided limit from below.
#[inline]
pub(crate) fn cell(t: f64) -> (i64, f64) {
    let hi = t.ceil();
    let lo = hi - 1.0;
    (lo as i64, t - lo)
}

/// Reads `plane[y * w + x]`, or zero outside the grid.
#[inline]
pub(crate) fn fetch(plane: &[f32], h: usize, w: usize, y: i64, x: i64) -> f64 {
    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
        0.0
    } else {
        plane[y as usize * w + x as usize] as f64
    }
}

pub(crate) fn sample_plane(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, fx) = cell(x);
    let (y0, fy) = cell(y);
    let v00 = fetch(plane, h, w, y0, x0);
    let v01 = fetch(plane, h, w, y0, x0 + 1);
    let v10 = fetch(plane, h, w, y0 + 1, x0);
    let v11 = fetch(plane, h, w, y0 + 1, x0 + 1);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

/// Bilinear interpolation of plane `(n, c)` at fractional `(x, y)`; grid
/// points outside the tensor read as zero.
pub fn bilinear_sample(input: &Tensor, x: f32, y: f32, n: usize, c: usize) -> f32 {
    let s = input.shape();
    sample_plane(input.plane(n, c), s.h, s.w, x as f64, y as f64) as f32
}

const CUBIC_A: f64 = -0.5;

/// Catmull-Rom cubic convolution kernel.
pub(crate) fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((CUBIC_A + 2.0) * t - (CUBIC_A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((CUBIC_A * t - 5.0 * CUBIC_A) * t + 8.0 * CUBIC_A) * t - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Source taps and weights along one axis, pixel-center aligned.
fn cubic_taps(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut wts = [0.0f64; 4];
            for t in 0..4 {
                let i = base as i64 + t as i64 - 1;
                idx[t] = i.clamp(0, in_len as i64 - 1) as usize;
                wts[t] = cubic_weight(frac - (t as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Bicubic (Catmull-Rom, `a = -0.5`) resize with edge clamping.
pub fn resize_bicubic(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h < 1 {
        return Err(Error::dim("resize_bicubic", "out_h", 1, out_h));
    }
    if out_w < 1 {
        return Err(Error::dim("resize_bicubic", "out_w", 1, out_w));
    }
    let s = image.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::dim("resize_bicubic", "input extent", 1, 0));
    }
    let xt = cubic_taps(s.w, out_w);
    let yt = cubic_taps(s.h, out_h);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    let mut rows = vec![0.0f64; s.h * out_w];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = image.plane(n, c);
            for y in 0..s.h {
                let line = &src[y * s.w..(y + 1) * s.w];
                for (ox, (idx, wts)) in xt.iter().enumerate() {
                    let mut acc = 0.0;
                    for t in 0..4 {
                        acc += wts[t] * line[idx[t]] as f64;
                    }
                    rows[y * out_w + ox] = acc;
                }
            }
            let dst = out.plane_mut(n, c);
            for (oy, (idx, wts)) in yt.iter().enumerate() {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for t in 0..4 {
                        acc += wts[t] * rows[idx[t] * out_w + ox];
                    }
                    dst[oy * out_w + ox] = acc as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour resample to an arbitrary extent: `src = floor(dst * in / out)`.
pub fn resize_nearest(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = input.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, out_h, out_w), |n, c, y, x| {
        input.at(n, c, y * s.h / out_h, x * s.w / out_w)
    })
}

/// Nearest-neighbour 2x upsample: every pixel becomes a 2x2 block.
pub fn upsample2x(input: &Tensor) -> Tensor {
    let s = input.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h * 2, s.w * 2), |n, c, y, x| {
        input.at(n, c, y / 2, x / 2)
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// `ln(1 + e^v)` without overflow for large `v`.
pub fn softplus(v: f32) -> f32 {
    if v > 20.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}
