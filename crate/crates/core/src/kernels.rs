//! Slice-level forward and adjoint kernels used by the tape.
//!
//! Layouts are row-major: feature maps are `[C, H, W]`, convolution kernels
//! `[C_out, C_in, k, k]`, dense weights `[D_out, D_in]`, warp grids `[2, H, W]`
//! with channel 0 holding x and channel 1 holding y.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.k) / self.stride + 1
    }

    /// Output indices `o` whose input tap `o*stride + off - padding` is in bounds.
    fn valid(&self, out_len: usize, in_len: usize, off: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        let start = if p > off { (p - off).div_ceil(s) } else { 0 };
        if in_len + p <= off {
            return (0, 0);
        }
        let end = ((in_len - 1 + p - off) / s + 1).min(out_len);
        (start.min(end), end)
    }
}

/// Unfolds `input` into `[C_in·k·k, H_out·W_out]` patch columns; padding reads as zero.
fn im2col<T: Real>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    let mut cols = vec![T::zero(); g.c_in * g.k * g.k * n];
    for ci in 0..g.c_in {
        let src = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid(oh, g.h, ky);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid(ow, g.w, kx);
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * n..][..n];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut row[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.padding;
                        drow[ox0..ox1].copy_from_slice(&srow[ix0..ix0 + ox1 - ox0]);
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox] = srow[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adds patch columns back onto `[C_in, H, W]`; the adjoint of [`im2col`].
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    for ci in 0..g.c_in {
        let dst = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid(oh, g.h, ky);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid(ow, g.w, kx);
                let row = &cols[((ci * g.k + ky) * g.k + kx) * n..][..n];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let srow = &row[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.padding;
                        for (d, &v) in drow[ix0..ix0 + ox1 - ox0].iter_mut().zip(&srow[ox0..ox1]) {
                            *d = *d + v;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride + kx - g.padding;
                            drow[ix] = drow[ix] + srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Below this many output channels the patch matrix costs more than it saves.
const GEMM_MIN_OUT: usize = 4;

pub fn conv2d<T: Real>(g: &ConvGeom, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let n = g.out_h() * g.out_w();
    let mut out = vec![T::zero(); g.c_out * n];
    if let Some(b) = bias {
        for (plane, &bv) in out.chunks_mut(n).zip(b) {
            plane.iter_mut().for_each(|v| *v = bv);
        }
    }
    if g.c_out < GEMM_MIN_OUT {
        direct(g, |co, ci, ky, kx, iy, oy, ox0, ox1| {
            let wv = kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
            let src = &input[(ci * g.h + iy) * g.w..][..g.w];
            let dst = &mut out[(co * g.out_h() + oy) * g.out_w()..][..g.out_w()];
            if g.stride == 1 {
                let ix0 = ox0 + kx - g.padding;
                for (d, &v) in dst[ox0..ox1].iter_mut().zip(&src[ix0..ix0 + ox1 - ox0]) {
                    *d = *d + wv * v;
                }
                return;
            }
            for ox in ox0..ox1 {
                dst[ox] = dst[ox] + wv * src[ox * g.stride + kx - g.padding];
            }
        });
        return out;
    }
    let cols = im2col(g, input);
    T::gemm(g.c_out, g.c_in * g.k * g.k, n, kernel, false, &cols, false, T::one(), &mut out);
    out
}

/// Calls `f(co, ci, ky, kx, iy, oy, ox0, ox1)` for every in-bounds output row segment.
#[allow(clippy::too_many_arguments)]
fn direct(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize)) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid(oh, g.h, ky);
                for kx in 0..g.k {
                    let (ox0, ox1) = g.valid(ow, g.w, kx);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        f(co, ci, ky, kx, oy * g.stride + ky - g.padding, oy, ox0, ox1);
                    }
                }
            }
        }
    }
}

/// Accumulates the input adjoint of [`conv2d`] into `grad_input`.
pub fn conv2d_grad_input<T: Real>(g: &ConvGeom, kernel: &[T], grad_out: &[T], grad_input: &mut [T]) {
    let n = g.out_h() * g.out_w();
    if g.c_out < GEMM_MIN_OUT {
        direct(g, |co, ci, ky, kx, iy, oy, ox0, ox1| {
            let wv = kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
            let gout = &grad_out[(co * g.out_h() + oy) * g.out_w()..][..g.out_w()];
            let dst = &mut grad_input[(ci * g.h + iy) * g.w..][..g.w];
            if g.stride == 1 {
                let ix0 = ox0 + kx - g.padding;
                for (d, &v) in dst[ix0..ix0 + ox1 - ox0].iter_mut().zip(&gout[ox0..ox1]) {
                    *d = *d + wv * v;
                }
                return;
            }
            for ox in ox0..ox1 {
                let ix = ox * g.stride + kx - g.padding;
                dst[ix] = dst[ix] + wv * gout[ox];
            }
        });
        return;
    }
    let kk = g.c_in * g.k * g.k;
    let mut cols = vec![T::zero(); kk * n];
    T::gemm(kk, g.c_out, n, kernel, true, grad_out, false, T::zero(), &mut cols);
    col2im(g, &cols, grad_input);
}

/// Accumulates the kernel adjoint of [`conv2d`] into `grad_kernel`.
pub fn conv2d_grad_kernel<T: Real>(g: &ConvGeom, input: &[T], grad_out: &[T], grad_kernel: &mut [T]) {
    let n = g.out_h() * g.out_w();
    if g.c_out < GEMM_MIN_OUT {
        direct(g, |co, ci, ky, kx, iy, oy, ox0, ox1| {
            let gout = &grad_out[(co * g.out_h() + oy) * g.out_w()..][..g.out_w()];
            let src = &input[(ci * g.h + iy) * g.w..][..g.w];
            let mut acc = T::zero();
            if g.stride == 1 {
                let ix0 = ox0 + kx - g.padding;
                acc = gout[ox0..ox1].iter().zip(&src[ix0..ix0 + ox1 - ox0]).map(|(&a, &b)| a * b).sum();
            } else {
                for ox in ox0..ox1 {
                    acc = acc + gout[ox] * src[ox * g.stride + kx - g.padding];
                }
            }
            let idx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
            grad_kernel[idx] = grad_kernel[idx] + acc;
        });
        return;
    }
    let cols = im2col(g, input);
    T::gemm(g.c_out, n, g.c_in * g.k * g.k, grad_out, false, &cols, true, T::one(), grad_kernel);
}

/// Max-subtracted softmax over every entry of `x`.
pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_sum_exp<T: Real>(x: &[T]) -> T {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Per-channel standardization. Returns the output and each channel's
/// `1/sqrt(var + eps)`.
pub fn instance_norm<T: Real>(x: &[T], channels: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = x.len() / channels;
    let nf = T::from_usize(n).unwrap();
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(channels);
    for c in x.chunks(n) {
        let mean = c.iter().copied().sum::<T>() / nf;
        let var = c.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        out.extend(c.iter().map(|&v| (v - mean) * is));
        inv.push(is);
    }
    (out, inv)
}

/// Gaussian factors of the sampling regularizer for one axis:
/// `table[o * map_len + m] = exp(-(o/out_len - (m+1)/map_len)^2 / (2 std^2))`,
/// rescaled so every row peaks at 1. Row scaling cancels in the mapping ratio.
pub fn gaussian_table<T: Real>(out_len: usize, map_len: usize, std: f64) -> Vec<T> {
    let mut table = Vec::with_capacity(out_len * map_len);
    for o in 0..out_len {
        let u = o as f64 / out_len as f64;
        let d2: Vec<f64> = (0..map_len)
            .map(|m| {
                let c = (m + 1) as f64 / map_len as f64;
                (u - c) * (u - c) / (2.0 * std * std)
            })
            .collect();
        let min = d2.iter().copied().fold(f64::INFINITY, f64::min);
        table.extend(d2.into_iter().map(|d| T::lit((-(d - min)).exp())));
    }
    table
}

pub struct MappingTables<T> {
    pub gx: Vec<T>,
    pub gy: Vec<T>,
    pub den: Vec<T>,
    /// Coordinates relative to the reference cell, `[2, H, W]`.
    pub rel: Vec<T>,
    /// Reference cell `(column, row)`.
    pub reference: (usize, usize),
}

fn map_coords<T: Real>(len: usize, reference: usize) -> Vec<T> {
    (1..=len).map(|i| T::lit((i as f64 - (reference + 1) as f64) / len as f64)).collect()
}

/// Saliency-weighted coordinate mapping. `map` is `[map_h, map_w]`; the
/// result is `[2, out_h, out_w]` plus the tables needed for the adjoint.
///
/// Coordinates are accumulated relative to the map's heaviest cell, so a
/// one-hot map yields that cell's coordinates without rounding.
pub fn mapping<T: Real>(
    map: &[T],
    map_h: usize,
    map_w: usize,
    out_h: usize,
    out_w: usize,
    std: f64,
) -> (Vec<T>, MappingTables<T>) {
    let gx = gaussian_table::<T>(out_w, map_w, std);
    let gy = gaussian_table::<T>(out_h, map_h, std);
    let peak = map
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > map[best] { i } else { best });
    let reference = (peak % map_w, peak / map_w);
    let cx: Vec<T> = map_coords(map_w, reference.0);
    let cy: Vec<T> = map_coords(map_h, reference.1);
    let base_x = T::lit((reference.0 + 1) as f64 / map_w as f64);
    let base_y = T::lit((reference.1 + 1) as f64 / map_h as f64);
    // p[h][x] = sum_w A[h][w] gx[x][w], px additionally weighted by cx[w]
    let mut p = vec![T::zero(); map_h * out_w];
    let mut px = vec![T::zero(); map_h * out_w];
    for h in 0..map_h {
        let arow = &map[h * map_w..(h + 1) * map_w];
        for x in 0..out_w {
            let grow = &gx[x * map_w..(x + 1) * map_w];
            let mut s = T::zero();
            let mut sx = T::zero();
            for w in 0..map_w {
                let t = arow[w] * grow[w];
                s = s + t;
                sx = sx + t * cx[w];
            }
            p[h * out_w + x] = s;
            px[h * out_w + x] = sx;
        }
    }
    let plane = out_h * out_w;
    let mut out = vec![T::zero(); 2 * plane];
    let mut rel = vec![T::zero(); 2 * plane];
    let mut den = vec![T::zero(); plane];
    for y in 0..out_h {
        let grow = &gy[y * map_h..(y + 1) * map_h];
        for x in 0..out_w {
            let mut d = T::zero();
            let mut nx = T::zero();
            let mut ny = T::zero();
            for h in 0..map_h {
                let g = grow[h];
                let ph = p[h * out_w + x];
                d = d + g * ph;
                nx = nx + g * px[h * out_w + x];
                ny = ny + g * cy[h] * ph;
            }
            assert!(d > T::zero(), "degenerate sampling denominator at ({x}, {y})");
            let i = y * out_w + x;
            den[i] = d;
            rel[i] = nx / d;
            rel[plane + i] = ny / d;
            out[i] = base_x + rel[i];
            out[plane + i] = base_y + rel[plane + i];
        }
    }
    (out, MappingTables { gx, gy, den, rel, reference })
}

/// Adjoint of [`mapping`] with respect to the map.
pub fn mapping_grad<T: Real>(
    tables: &MappingTables<T>,
    grad_grid: &[T],
    map_h: usize,
    map_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let plane = out_h * out_w;
    let cx: Vec<T> = map_coords(map_w, tables.reference.0);
    let cy: Vec<T> = map_coords(map_h, tables.reference.1);
    let rel = &tables.rel;
    let mut g_den = vec![T::zero(); plane];
    let mut g_nx = vec![T::zero(); plane];
    let mut g_ny = vec![T::zero(); plane];
    for i in 0..plane {
        let d = tables.den[i];
        g_nx[i] = grad_grid[i] / d;
        g_ny[i] = grad_grid[plane + i] / d;
        g_den[i] = -(grad_grid[i] * rel[i] + grad_grid[plane + i] * rel[plane + i]) / d;
    }
    // q[h][x] = sum_y gy[y][h] * (g_den + cy[h] g_ny)[y][x]; qx likewise with g_nx
    let mut q = vec![T::zero(); map_h * out_w];
    let mut qx = vec![T::zero(); map_h * out_w];
    for y in 0..out_h {
        let grow = &tables.gy[y * map_h..(y + 1) * map_h];
        for h in 0..map_h {
            let g = grow[h];
            let qrow = &mut q[h * out_w..(h + 1) * out_w];
            let qxrow = &mut qx[h * out_w..(h + 1) * out_w];
            for x in 0..out_w {
                let i = y * out_w + x;
                qrow[x] = qrow[x] + g * (g_den[i] + cy[h] * g_ny[i]);
                qxrow[x] = qxrow[x] + g * g_nx[i];
            }
        }
    }
    let mut grad_map = vec![T::zero(); map_h * map_w];
    for h in 0..map_h {
        for x in 0..out_w {
            let a = q[h * out_w + x];
            let b = qx[h * out_w + x];
            let grow = &tables.gx[x * map_w..(x + 1) * map_w];
            let dst = &mut grad_map[h * map_w..(h + 1) * map_w];
            for w in 0..map_w {
                dst[w] = dst[w] + grow[w] * (a + cx[w] * b);
            }
        }
    }
    grad_map
}

struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    // zero where the coordinate was clamped
    dx: T,
    dy: T,
}

fn tap<T: Real>(mx: T, my: T, h: usize, w: usize) -> Tap<T> {
    let axis = |m: T, len: usize| {
        let scale = T::from_usize(len).unwrap();
        let hi = T::from_usize(len - 1).unwrap();
        let p = m * scale;
        let (p, d) = if p < T::zero() {
            (T::zero(), T::zero())
        } else if p > hi {
            (hi, T::zero())
        } else {
            (p, scale)
        };
        let i0 = p.floor().to_usize().unwrap().min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - T::from_usize(i0).unwrap(), d)
    };
    let (x0, x1, fx, dx) = axis(mx, w);
    let (y0, y1, fy, dy) = axis(my, h);
    Tap { x0, x1, y0, y1, fx, fy, dx, dy }
}

/// Interpolation cell and clamp state of one sample: the piece of the
/// bilinear warp that is active at `(mx, my)`.
pub fn warp_cell<T: Real>(mx: T, my: T, h: usize, w: usize) -> (usize, usize, bool, bool) {
    let t = tap(mx, my, h, w);
    (t.x0, t.y0, t.dx == T::zero(), t.dy == T::zero())
}

/// Bilinear sampling of `image` (`[C, H, W]`) at `grid` (`[2, H, W]`) with
/// source pixel coordinates `(mx * W, my * H)` clamped to the image.
pub fn warp<T: Real>(image: &[T], channels: usize, h: usize, w: usize, grid: &[T]) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); channels * plane];
    for i in 0..plane {
        let t = tap(grid[i], grid[plane + i], h, w);
        let one = T::one();
        let w00 = (one - t.fx) * (one - t.fy);
        let w01 = t.fx * (one - t.fy);
        let w10 = (one - t.fx) * t.fy;
        let w11 = t.fx * t.fy;
        for c in 0..channels {
            let src = &image[c * plane..(c + 1) * plane];
            out[c * plane + i] = w00 * src[t.y0 * w + t.x0]
                + w01 * src[t.y0 * w + t.x1]
                + w10 * src[t.y1 * w + t.x0]
                + w11 * src[t.y1 * w + t.x1];
        }
    }
    out
}

/// Adjoints of [`warp`]; either target may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn warp_grad<T: Real>(
    image: &[T],
    channels: usize,
    h: usize,
    w: usize,
    grid: &[T],
    grad_out: &[T],
    mut grad_image: Option<&mut [T]>,
    mut grad_grid: Option<&mut [T]>,
) {
    let plane = h * w;
    let one = T::one();
    for i in 0..plane {
        let t = tap(grid[i], grid[plane + i], h, w);
        let w00 = (one - t.fx) * (one - t.fy);
        let w01 = t.fx * (one - t.fy);
        let w10 = (one - t.fx) * t.fy;
        let w11 = t.fx * t.fy;
        let mut gpx = T::zero();
        let mut gpy = T::zero();
        for c in 0..channels {
            let g = grad_out[c * plane + i];
            let src = &image[c * plane..(c + 1) * plane];
            let (i00, i01, i10, i11) = (
                t.y0 * w + t.x0,
                t.y0 * w + t.x1,
                t.y1 * w + t.x0,
                t.y1 * w + t.x1,
            );
            if let Some(gi) = grad_image.as_deref_mut() {
                let gi = &mut gi[c * plane..(c + 1) * plane];
                gi[i00] = gi[i00] + g * w00;
                gi[i01] = gi[i01] + g * w01;
                gi[i10] = gi[i10] + g * w10;
                gi[i11] = gi[i11] + g * w11;
            }
            gpx = gpx + g * ((one - t.fy) * (src[i01] - src[i00]) + t.fy * (src[i11] - src[i10]));
            gpy = gpy + g * ((one - t.fx) * (src[i10] - src[i00]) + t.fx * (src[i11] - src[i01]));
        }
        if let Some(gg) = grad_grid.as_deref_mut() {
            gg[i] = gg[i] + gpx * t.dx;
            gg[plane + i] = gg[plane + i] + gpy * t.dy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let v = input[(ci * g.h + iy as usize) * g.w + ix as usize];
                                acc += v * kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn kernel_wider_than_input() {
        for c_out in [1, 5] {
            let g = ConvGeom { c_in: 2, h: 3, w: 4, c_out, k: 9, stride: 1, padding: 4 };
            let input: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
            let kernel: Vec<f64> = (0..c_out * 2 * 81).map(|i| (i as f64 * 0.11).cos()).collect();
            let got = conv2d(&g, &input, &kernel, None);
            let want = naive(&g, &input, &kernel);
            assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
            let mut gi = vec![0.0; input.len()];
            conv2d_grad_input(&g, &kernel, &vec![1.0; got.len()], &mut gi);
        }
    }
}
