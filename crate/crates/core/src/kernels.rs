//! Raw volumetric kernels over `[B, C, D, H, W]` buffers.
//!
//! A convolution is described by a [`ConvGeometry`] that relates a "big"
//! spatial grid (the convolution input) to a "small" one (its output). The
//! same geometry drives the transposed convolution, which maps small to
//! big through the adjoint of the same linear map. Batches are processed
//! per sample in parallel; every reduction across samples runs in a fixed
//! sequential order so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Output columns processed per GEMM call.
const CHUNK_COLS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub big: [usize; 3],
    pub small: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Geometry of a convolution on `input`; padding equals the dilation for
    /// 3-tap kernels and is zero for 1-tap kernels.
    pub fn conv(input: [usize; 3], kernel: usize, stride: usize, dilation: usize) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::Contract(format!("kernel extent {kernel} not in {{1, 3}}")));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Contract("stride and dilation must be positive".into()));
        }
        let pad = if kernel == 1 { 0 } else { dilation };
        let mut small = [0; 3];
        for axis in 0..3 {
            let span = input[axis] + 2 * pad;
            let reach = dilation * (kernel - 1) + 1;
            if input[axis] == 0 || span < reach {
                return Err(Error::Shape(format!(
                    "extent {} too small for kernel {kernel} dilation {dilation}",
                    input[axis]
                )));
            }
            small[axis] = (span - reach) / stride + 1;
        }
        Ok(ConvGeometry {
            big: input,
            small,
            kernel,
            stride,
            dilation,
            pad,
        })
    }

    /// Geometry of a stride-`stride` transposed convolution whose output is
    /// exactly `stride` times its input on every axis.
    pub fn upsample(input: [usize; 3], stride: usize) -> Result<Self> {
        let big = input.map(|e| e * stride);
        let geom = Self::conv(big, 3, stride, 1)?;
        if geom.small != input {
            return Err(Error::Shape(format!(
                "transposed convolution of {input:?} cannot reach {big:?}"
            )));
        }
        Ok(geom)
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    pub fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    pub fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    fn slab_planes(&self) -> usize {
        let plane = self.small[1] * self.small[2];
        (CHUNK_COLS / plane).clamp(1, self.small[0])
    }
}

/// Fills `cols` (`c_big·taps` rows × the output positions with depth in
/// `d0..d1`) from one sample of the big volume.
fn im2col<T: Element>(g: &ConvGeometry, x: &[T], c_big: usize, d0: usize, d1: usize, cols: &mut [T]) {
    let [bd, bh, bw] = g.big;
    let [_, sh, sw] = g.small;
    let ncols = (d1 - d0) * sh * sw;
    let k = g.kernel;
    let (s, dil, pad) = (g.stride as isize, g.dilation as isize, g.pad as isize);
    let mut row = 0;
    for c in 0..c_big {
        let xc = &x[c * bd * bh * bw..(c + 1) * bd * bh * bw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let out = &mut cols[row * ncols..(row + 1) * ncols];
                    let mut j = 0;
                    for od in d0..d1 {
                        let iz = od as isize * s + kd as isize * dil - pad;
                        let z_ok = iz >= 0 && iz < bd as isize;
                        for oh in 0..sh {
                            let iy = oh as isize * s + kh as isize * dil - pad;
                            if !z_ok || iy < 0 || iy >= bh as isize {
                                out[j..j + sw].fill(T::zero());
                                j += sw;
                                continue;
                            }
                            let base = (iz as usize * bh + iy as usize) * bw;
                            for ow in 0..sw {
                                let ix = ow as isize * s + kw as isize * dil - pad;
                                out[j] = if ix >= 0 && ix < bw as isize {
                                    xc[base + ix as usize]
                                } else {
                                    T::zero()
                                };
                                j += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds the rows of channel `c` from `cols` (all output positions)
/// into `xc`, one channel of the big volume.
fn col2im_channel<T: Element>(g: &ConvGeometry, cols: &[T], c: usize, xc: &mut [T]) {
    let [bd, bh, bw] = g.big;
    let [sd, sh, sw] = g.small;
    let ncols = sd * sh * sw;
    let k = g.kernel;
    let (s, dil, pad) = (g.stride as isize, g.dilation as isize, g.pad as isize);
    let mut row = c * g.taps();
    for kd in 0..k {
        for kh in 0..k {
            for kw in 0..k {
                let src = &cols[row * ncols..(row + 1) * ncols];
                let mut j = 0;
                for od in 0..sd {
                    let iz = od as isize * s + kd as isize * dil - pad;
                    let z_ok = iz >= 0 && iz < bd as isize;
                    for oh in 0..sh {
                        let iy = oh as isize * s + kh as isize * dil - pad;
                        if !z_ok || iy < 0 || iy >= bh as isize {
                            j += sw;
                            continue;
                        }
                        let base = (iz as usize * bh + iy as usize) * bw;
                        for ow in 0..sw {
                            let ix = ow as isize * s + kw as isize * dil - pad;
                            if ix >= 0 && ix < bw as isize {
                                xc[base + ix as usize] += src[j];
                            }
                            j += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y = W · im2col(x) (+ bias)`: the forward convolution, big → small.
///
/// `weight` is `[c_small, c_big·taps]` row-major.
pub fn conv_apply<T: Element>(
    g: &ConvGeometry,
    batch: usize,
    c_big: usize,
    c_small: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (big_len, small_len) = (g.big_len(), g.small_len());
    let taps_rows = c_big * g.taps();
    let plane = g.small[1] * g.small[2];
    let slab = g.slab_planes();
    let mut y = vec![T::zero(); batch * c_small * small_len];
    y.par_chunks_mut(c_small * small_len)
        .zip(x.par_chunks(c_big * big_len))
        .for_each(|(yb, xb)| {
            let mut cols = vec![T::zero(); taps_rows * slab * plane];
            let mut d0 = 0;
            while d0 < g.small[0] {
                let d1 = (d0 + slab).min(g.small[0]);
                let ncols = (d1 - d0) * plane;
                im2col(g, xb, c_big, d0, d1, &mut cols[..taps_rows * ncols]);
                // SAFETY: weight is c_small×taps_rows, cols taps_rows×ncols, and
                // the output window is c_small rows of stride small_len starting
                // at column d0·plane, inside yb.
                unsafe {
                    T::gemm(
                        c_small,
                        taps_rows,
                        ncols,
                        T::one(),
                        weight.as_ptr(),
                        taps_rows as isize,
                        1,
                        cols.as_ptr(),
                        ncols as isize,
                        1,
                        T::zero(),
                        yb.as_mut_ptr().add(d0 * plane),
                        small_len as isize,
                        1,
                    );
                }
                d0 = d1;
            }
            if let Some(bias) = bias {
                for (co, chan) in yb.chunks_mut(small_len).enumerate() {
                    let b = bias[co];
                    chan.iter_mut().for_each(|v| *v += b);
                }
            }
        });
    y
}

/// `x = col2im(Wᵀ · y) (+ bias)`: the adjoint map, small → big.
pub fn conv_adjoint<T: Element>(
    g: &ConvGeometry,
    batch: usize,
    c_big: usize,
    c_small: usize,
    y: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (big_len, small_len) = (g.big_len(), g.small_len());
    let taps_rows = c_big * g.taps();
    let mut x = vec![T::zero(); batch * c_big * big_len];
    x.par_chunks_mut(c_big * big_len)
        .zip(y.par_chunks(c_small * small_len))
        .for_each(|(xb, yb)| {
            let mut cols = vec![T::zero(); taps_rows * small_len];
            // SAFETY: Wᵀ is read as taps_rows×c_small via swapped strides; yb is
            // c_small×small_len and cols is taps_rows×small_len.
            unsafe {
                T::gemm(
                    taps_rows,
                    c_small,
                    small_len,
                    T::one(),
                    weight.as_ptr(),
                    1,
                    taps_rows as isize,
                    yb.as_ptr(),
                    small_len as isize,
                    1,
                    T::zero(),
                    cols.as_mut_ptr(),
                    small_len as isize,
                    1,
                );
            }
            for (c, xc) in xb.chunks_mut(big_len).enumerate() {
                col2im_channel(g, &cols, c, xc);
                if let Some(bias) = bias {
                    let b = bias[c];
                    xc.iter_mut().for_each(|v| *v += b);
                }
            }
        });
    x
}

/// `Σ_b y_b · im2col(x_b)ᵀ`, the gradient of [`conv_apply`] with respect to
/// its weight (and of [`conv_adjoint`] with the roles of `x` and `y` swapped).
pub fn conv_weight_grad<T: Element>(
    g: &ConvGeometry,
    batch: usize,
    c_big: usize,
    c_small: usize,
    x: &[T],
    y: &[T],
) -> Vec<T> {
    let (big_len, small_len) = (g.big_len(), g.small_len());
    let taps_rows = c_big * g.taps();
    let plane = g.small[1] * g.small[2];
    let slab = g.slab_planes();
    let partials: Vec<Vec<T>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * c_big * big_len..(b + 1) * c_big * big_len];
            let yb = &y[b * c_small * small_len..(b + 1) * c_small * small_len];
            let mut dw = vec![T::zero(); c_small * taps_rows];
            let mut cols = vec![T::zero(); taps_rows * slab * plane];
            let mut d0 = 0;
            while d0 < g.small[0] {
                let d1 = (d0 + slab).min(g.small[0]);
                let ncols = (d1 - d0) * plane;
                im2col(g, xb, c_big, d0, d1, &mut cols[..taps_rows * ncols]);
                // SAFETY: the y window is c_small×ncols with row stride
                // small_len; colsᵀ is ncols×taps_rows via swapped strides.
                unsafe {
                    T::gemm(
                        c_small,
                        ncols,
                        taps_rows,
                        T::one(),
                        yb.as_ptr().add(d0 * plane),
                        small_len as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        ncols as isize,
                        T::one(),
                        dw.as_mut_ptr(),
                        taps_rows as isize,
                        1,
                    );
                }
                d0 = d1;
            }
            dw
        })
        .collect();
    let mut total = vec![T::zero(); c_small * taps_rows];
    for part in &partials {
        total.iter_mut().zip(part).for_each(|(t, p)| *t += *p);
    }
    total
}

/// Per-channel sums over batch and space of a `[B, C, S]` buffer.
pub fn channel_sums<T: Element>(batch: usize, channels: usize, spatial: usize, v: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let start = (b * channels + c) * spatial;
            *o += v[start..start + spatial].iter().copied().sum::<T>();
        }
    }
    out
}

/// 2×2×2 max pooling with stride 2; returns the pooled values and, per
/// output, the winning offset inside its input channel. Ties go to the
/// lowest linear index.
pub fn max_pool2<T: Element>(
    batch: usize,
    channels: usize,
    dims: [usize; 3],
    x: &[T],
) -> Result<(Vec<T>, Vec<u32>)> {
    if dims.iter().any(|e| e % 2 != 0) {
        return Err(Error::Shape(format!("pooling needs even extents, got {dims:?}")));
    }
    let [d, h, w] = dims;
    let [od, oh, ow] = [d / 2, h / 2, w / 2];
    let in_len = d * h * w;
    let out_len = od * oh * ow;
    let mut out = vec![T::zero(); batch * channels * out_len];
    let mut arg = vec![0u32; batch * channels * out_len];
    out.par_chunks_mut(out_len)
        .zip(arg.par_chunks_mut(out_len))
        .zip(x.par_chunks(in_len))
        .for_each(|((oc, ac), xc)| {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best_idx = usize::MAX;
                        let mut best = T::neg_infinity();
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                    let v = xc[idx];
                                    if best_idx == usize::MAX || v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        let o = (z * oh + y) * ow + xx;
                        oc[o] = best;
                        ac[o] = best_idx as u32;
                    }
                }
            }
        });
    Ok((out, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry_extents() {
        let g = ConvGeometry::conv([8, 8, 8], 3, 1, 1).unwrap();
        assert_eq!(g.small, [8, 8, 8]);
        let g = ConvGeometry::conv([8, 8, 8], 3, 1, 2).unwrap();
        assert_eq!((g.small, g.pad), ([8, 8, 8], 2));
        let g = ConvGeometry::conv([80, 48, 80], 3, 2, 1).unwrap();
        assert_eq!(g.small, [40, 24, 40]);
        let g = ConvGeometry::upsample([5, 3, 5], 2).unwrap();
        assert_eq!(g.big, [10, 6, 10]);
        let g = ConvGeometry::conv([6, 6, 6], 1, 2, 1).unwrap();
        assert_eq!(g.small, [3, 3, 3]);
    }

    #[test]
    fn naive_conv_matches() {
        // brute-force 7-loop cross-correlation
        let g = ConvGeometry::conv([5, 4, 6], 3, 2, 1).unwrap();
        let (cb, cs) = (2, 3);
        let x: Vec<f64> = (0..cb * g.big_len()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..cs * cb * 27).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let y = conv_apply(&g, 1, cb, cs, &x, &w, None);
        let [bd, bh, bw] = g.big;
        for co in 0..cs {
            for z in 0..g.small[0] {
                for yy in 0..g.small[1] {
                    for xx in 0..g.small[2] {
                        let mut acc = 0.0;
                        for ci in 0..cb {
                            for kd in 0..3 {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let iz = (z * 2 + kd) as isize - 1;
                                        let iy = (yy * 2 + kh) as isize - 1;
                                        let ix = (xx * 2 + kw) as isize - 1;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= bd as isize || iy >= bh as isize || ix >= bw as isize {
                                            continue;
                                        }
                                        let xi = ((ci * bd + iz as usize) * bh + iy as usize) * bw + ix as usize;
                                        let wi = ((co * cb + ci) * 3 + kd) * 9 + kh * 3 + kw;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        let yi = ((co * g.small[0] + z) * g.small[1] + yy) * g.small[2] + xx;
                        assert_eq!(y[yi], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_ties_lowest_index() {
        let x = vec![1.0f32; 8];
        let (v, a) = max_pool2(1, 1, [2, 2, 2], &x).unwrap();
        assert_eq!((v[0], a[0]), (1.0, 0));
        assert!(max_pool2(1, 1, [3, 2, 2], &[0f32; 12]).is_err());
    }
}
