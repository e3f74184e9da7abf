//! Inner loops shared by the convolution paths.
//!
//! Every output element is accumulated in `f64` with fused multiply-adds,
//! summing the reduction axis in ascending order and adding the bias last.
//! The loop structure never changes that order and `mul_add` is correctly
//! rounded everywhere, so results are bit-identical across tile positions,
//! thread counts and instruction sets.

use rayon::prelude::*;

/// Element types the GEMM can read columns from and write outputs to.
pub(crate) trait Scalar: Copy + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
}

const ROW_BLOCK: usize = 8;
const TILE: usize = 16;
/// Columns handled per task; a multiple of `TILE`.
const CHUNK: usize = 256;
/// Below this many multiply-adds the rayon split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 18;

/// `out[o, j] = bias[o] + sum_k w[o, k] * col[k, j]` for row-major `w` (rows x k),
/// `col` (k x p) and `out` (rows x p).
///
/// Work is split by column chunks so that one chunk of `col` stays in cache
/// while every output row consumes it.
pub(crate) fn gemm<C: Scalar, O: Scalar>(
    w: &[f32],
    col: &[C],
    bias: Option<&[f32]>,
    out: &mut [O],
    k: usize,
    p: usize,
) {
    if p == 0 {
        return;
    }
    let rows = out.len() / p;
    debug_assert_eq!(w.len(), rows * k);
    debug_assert_eq!(col.len(), k * p);

    let chunks = p.div_ceil(CHUNK);
    if chunks == 1 || rows * k * p < PAR_THRESHOLD || rayon::current_num_threads() == 1 {
        chunk_dispatch(w, col, bias, k, p, 0, p, out, p);
        return;
    }
    let parts: Vec<(usize, Vec<O>)> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let j0 = ci * CHUNK;
            let j1 = (j0 + CHUNK).min(p);
            let mut local = vec![O::from_f64(0.0); rows * (j1 - j0)];
            chunk_dispatch(w, col, bias, k, p, j0, j1, &mut local, j1 - j0);
            (j0, local)
        })
        .collect();
    for (j0, local) in parts {
        let cw = local.len() / rows;
        for r in 0..rows {
            out[r * p + j0..r * p + j0 + cw].copy_from_slice(&local[r * cw..(r + 1) * cw]);
        }
    }
}

/// Fills `acc` with one `ROW_BLOCK x TILE` tile of products: `wp` holds the
/// block's weights row-major (`ROW_BLOCK x k`), `strip` the columns (`k x TILE`).
type BlockKernel = unsafe fn(&[f64], &[f64], usize, &mut [[f64; TILE]; ROW_BLOCK]);

/// Computes columns `[j0, j1)` of every output row into `dst`, whose rows are
/// `stride` apart and start at column `j0` (or at column 0 when `stride == p`).
#[allow(clippy::too_many_arguments)]
fn chunk_dispatch<C: Scalar, O: Scalar>(
    w: &[f32],
    col: &[C],
    bias: Option<&[f32]>,
    k: usize,
    p: usize,
    j0: usize,
    j1: usize,
    dst: &mut [O],
    stride: usize,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the features were detected at runtime.
            unsafe { chunk_avx512(w, col, bias, k, p, j0, j1, dst, stride) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the features were detected at runtime.
            unsafe { chunk_avx2(w, col, bias, k, p, j0, j1, dst, stride) };
            return;
        }
    }
    chunk_generic(w, col, bias, k, p, j0, j1, dst, stride, block_portable);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn chunk_avx512<C: Scalar, O: Scalar>(
    w: &[f32],
    col: &[C],
    bias: Option<&[f32]>,
    k: usize,
    p: usize,
    j0: usize,
    j1: usize,
    dst: &mut [O],
    stride: usize,
) {
    chunk_generic(w, col, bias, k, p, j0, j1, dst, stride, block_avx512);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn chunk_avx2<C: Scalar, O: Scalar>(
    w: &[f32],
    col: &[C],
    bias: Option<&[f32]>,
    k: usize,
    p: usize,
    j0: usize,
    j1: usize,
    dst: &mut [O],
    stride: usize,
) {
    chunk_generic(w, col, bias, k, p, j0, j1, dst, stride, block_avx2);
}

#[inline(always)]
fn block_body(wp: &[f64], strip: &[f64], k: usize, acc: &mut [[f64; TILE]; ROW_BLOCK]) {
    let rows: [&[f64]; ROW_BLOCK] = std::array::from_fn(|r| &wp[r * k..(r + 1) * k]);
    *acc = [[0.0; TILE]; ROW_BLOCK];
    for (kk, cv) in strip.chunks_exact(TILE).enumerate() {
        let cv: &[f64; TILE] = cv.try_into().unwrap();
        for r in 0..ROW_BLOCK {
            let wv = rows[r][kk];
            for t in 0..TILE {
                acc[r][t] = wv.mul_add(cv[t], acc[r][t]);
            }
        }
    }
}

fn block_portable(wp: &[f64], strip: &[f64], k: usize, acc: &mut [[f64; TILE]; ROW_BLOCK]) {
    block_body(wp, strip, k, acc);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn block_avx2(wp: &[f64], strip: &[f64], k: usize, acc: &mut [[f64; TILE]; ROW_BLOCK]) {
    block_body(wp, strip, k, acc);
}

/// Two 8-lane accumulators per row, so the whole tile stays in registers.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn block_avx512(wp: &[f64], strip: &[f64], k: usize, acc: &mut [[f64; TILE]; ROW_BLOCK]) {
    use std::arch::x86_64::*;
    const _: () = assert!(TILE == 16);
    assert!(wp.len() >= ROW_BLOCK * k && strip.len() >= k * TILE);
    let (w, s) = (wp.as_ptr(), strip.as_ptr());
    let mut lanes = [[_mm512_setzero_pd(); 2]; ROW_BLOCK];
    for kk in 0..k {
        // SAFETY: `kk < k` and the lengths were checked above.
        let (c0, c1) = unsafe { (_mm512_loadu_pd(s.add(kk * TILE)), _mm512_loadu_pd(s.add(kk * TILE + 8))) };
        for (r, l) in lanes.iter_mut().enumerate() {
            // SAFETY: `r * k + kk < ROW_BLOCK * k`.
            let wv = _mm512_set1_pd(unsafe { *w.add(r * k + kk) });
            l[0] = _mm512_fmadd_pd(wv, c0, l[0]);
            l[1] = _mm512_fmadd_pd(wv, c1, l[1]);
        }
    }
    for (a, l) in acc.iter_mut().zip(&lanes) {
        // SAFETY: each row of `acc` holds 16 values.
        unsafe {
            _mm512_storeu_pd(a.as_mut_ptr(), l[0]);
            _mm512_storeu_pd(a.as_mut_ptr().add(8), l[1]);
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn chunk_generic<C: Scalar, O: Scalar>(
    w: &[f32],
    col: &[C],
    bias: Option<&[f32]>,
    k: usize,
    p: usize,
    j0: usize,
    j1: usize,
    dst: &mut [O],
    stride: usize,
    block: BlockKernel,
) {
    let rows = w.len() / k.max(1);
    let base = if stride == p { 0 } else { j0 };
    let full_blocks = rows / ROW_BLOCK;
    let packed: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let mut store = |r: usize, j: usize, acc: &[f64; TILE]| {
        let b = bias.map_or(0.0, |b| b[r] as f64);
        let o = r * stride + j - base;
        for (d, a) in dst[o..o + TILE].iter_mut().zip(acc) {
            *d = O::from_f64(a + b);
        }
    };
    // One TILE-wide strip of `col`, contiguous and already widened.
    let mut strip = vec![0.0f64; k * TILE];
    let mut acc = [[0.0f64; TILE]; ROW_BLOCK];
    let mut j = j0;
    while j + TILE <= j1 {
        for kk in 0..k {
            let src = &col[kk * p + j..kk * p + j + TILE];
            for (d, s) in strip[kk * TILE..(kk + 1) * TILE].iter_mut().zip(src) {
                *d = s.to_f64();
            }
        }
        for rb in 0..full_blocks {
            let r0 = rb * ROW_BLOCK;
            // SAFETY: the caller picked `block` for CPU features it detected.
            unsafe { block(&packed[r0 * k..(r0 + ROW_BLOCK) * k], &strip, k, &mut acc) };
            for (r, a) in acc.iter().enumerate() {
                store(r0 + r, j, a);
            }
        }
        for r in full_blocks * ROW_BLOCK..rows {
            let wr = &packed[r * k..(r + 1) * k];
            let mut a = [0.0f64; TILE];
            for (&wv, cv) in wr.iter().zip(strip.chunks_exact(TILE)) {
                for t in 0..TILE {
                    a[t] = wv.mul_add(cv[t], a[t]);
                }
            }
            store(r, j, &a);
        }
        j += TILE;
    }
    for jj in j..j1 {
        for r in 0..rows {
            let mut acc = 0.0f64;
            for kk in 0..k {
                acc = packed[r * k + kk].mul_add(col[kk * p + jj].to_f64(), acc);
            }
            let b = bias.map_or(0.0, |b| b[r] as f64);
            dst[r * stride + jj - base] = O::from_f64(acc + b);
        }
    }
}

/// Geometry of one 2-D convolution plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PlaneGeom {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PlaneGeom {
    /// Output columns `ox` for which `ox * sw + kx - pw` lands inside `[0, w)`.
    #[inline]
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = if kx >= self.pw {
            0
        } else {
            (self.pw - kx).div_ceil(self.sw)
        };
        // ox * sw + kx - pw <= w - 1
        let hi = if self.w + self.pw < kx + 1 {
            0
        } else {
            ((self.w - 1 + self.pw - kx) / self.sw + 1).min(self.ow)
        };
        lo.min(hi)..hi
    }

    #[inline]
    fn valid_rows(&self, ky: usize) -> std::ops::Range<usize> {
        let lo = if ky >= self.ph {
            0
        } else {
            (self.ph - ky).div_ceil(self.sh)
        };
        let hi = if self.h + self.ph < ky + 1 {
            0
        } else {
            ((self.h - 1 + self.ph - ky) / self.sh + 1).min(self.oh)
        };
        lo.min(hi)..hi
    }
}

/// Unfolds one image (c x h x w) into a (c*kh*kw) x (oh*ow) column matrix.
pub(crate) fn im2col(input: &[f32], c: usize, g: &PlaneGeom, col: &mut [f32]) {
    let p = g.oh * g.ow;
    let kk = g.kh * g.kw;
    col.fill(0.0);
    for ci in 0..c {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[(ci * kk + ky * g.kw + kx) * p..][..p];
                let cols = g.valid_cols(kx);
                for oy in g.valid_rows(ky) {
                    let iy = oy * g.sh + ky - g.ph;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in cols.clone() {
                        dst[ox] = src[ox * g.sw + kx - g.pw];
                    }
                }
            }
        }
    }
}

/// Single-channel direct convolution, used for depthwise layers.
pub(crate) fn depthwise_plane(
    plane: &[f32],
    kernel: &[f32],
    bias: f32,
    g: &PlaneGeom,
    out: &mut [f32],
    acc: &mut Vec<f64>,
) {
    acc.clear();
    acc.resize(g.oh * g.ow, 0.0);
    for ky in 0..g.kh {
        let rows = g.valid_rows(ky);
        for kx in 0..g.kw {
            let wv = kernel[ky * g.kw + kx] as f64;
            let cols = g.valid_cols(kx);
            for oy in rows.clone() {
                let iy = oy * g.sh + ky - g.ph;
                let src = &plane[iy * g.w..(iy + 1) * g.w];
                let dst = &mut acc[oy * g.ow..(oy + 1) * g.ow];
                if g.sw == 1 {
                    let off = kx as isize - g.pw as isize;
                    let s = &src[(cols.start as isize + off) as usize..(cols.end as isize + off) as usize];
                    for (d, &v) in dst[cols.clone()].iter_mut().zip(s) {
                        *d += wv * v as f64;
                    }
                } else {
                    for ox in cols.clone() {
                        dst[ox] += wv * src[ox * g.sw + kx - g.pw] as f64;
                    }
                }
            }
        }
    }
    let b = bias as f64;
    for (o, &a) in out.iter_mut().zip(acc.iter()) {
        *o = (a + b) as f32;
    }
}
