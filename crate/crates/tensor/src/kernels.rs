//! Plain slice kernels behind the graph operations.
//!
//! Every function here works on a single `C×H×W` plane stack; batching is
//! handled by the caller. Convolution lowers to im2col followed by an sgemm.

/// Geometry of a shape-preserving (zero padded, stride 1) convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Rows of the im2col matrix: one per (input channel, kernel tap).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn pad(&self) -> isize {
        (self.dilation * (self.kernel / 2)) as isize
    }
}

/// For a tap offset `off`, the range of output coordinates whose source
/// coordinate `o + off` lies inside `[0, len)`.
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

pub fn im2col(x: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let hw = g.pixels();
    debug_assert_eq!(cols.len(), g.patch_len() * hw);
    let pad = g.pad();
    for ci in 0..g.in_channels {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let oy = (ky * g.dilation) as isize - pad;
            let (ylo, yhi) = valid_range(h, oy);
            for kx in 0..k {
                let ox = (kx * g.dilation) as isize - pad;
                let (xlo, xhi) = valid_range(w, ox);
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                dst.fill(0.0);
                if xlo >= xhi {
                    continue;
                }
                for y in ylo..yhi {
                    let sy = (y as isize + oy) as usize;
                    let sx0 = (xlo as isize + ox) as usize;
                    let src = &plane[sy * w + sx0..sy * w + sx0 + (xhi - xlo)];
                    dst[y * w + xlo..y * w + xhi].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(cols: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let hw = g.pixels();
    let pad = g.pad();
    for ci in 0..g.in_channels {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let oy = (ky * g.dilation) as isize - pad;
            let (ylo, yhi) = valid_range(h, oy);
            for kx in 0..k {
                let ox = (kx * g.dilation) as isize - pad;
                let (xlo, xhi) = valid_range(w, ox);
                if xlo >= xhi {
                    continue;
                }
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in ylo..yhi {
                    let sy = (y as isize + oy) as usize;
                    let sx0 = (xlo as isize + ox) as usize;
                    let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (xhi - xlo)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + xlo..y * w + xhi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for row-major `a: m×k` (or its transpose) and `b: k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_forward(x: &[f32], weights: &[f32], bias: &[f32], g: &ConvGeometry, out: &mut [f32]) {
    let hw = g.pixels();
    let mut cols = vec![0.0; g.patch_len() * hw];
    im2col(x, g, &mut cols);
    for (co, b) in bias.iter().enumerate() {
        out[co * hw..(co + 1) * hw].fill(*b);
    }
    gemm(g.out_channels, g.patch_len(), hw, weights, false, &cols, false, 1.0, out);
}

/// Accumulates weight/bias gradients and, when `dx` is given, the input gradient.
pub fn conv_backward(
    x: &[f32],
    weights: &[f32],
    dout: &[f32],
    g: &ConvGeometry,
    dw: &mut [f32],
    db: &mut [f32],
    dx: Option<&mut [f32]>,
) {
    let hw = g.pixels();
    let mut cols = vec![0.0; g.patch_len() * hw];
    im2col(x, g, &mut cols);
    // dW[co, p] += Σ_pix dout[co, pix] · cols[p, pix]
    gemm(g.out_channels, hw, g.patch_len(), dout, false, &cols, true, 1.0, dw);
    for (co, d) in db.iter_mut().enumerate() {
        *d += dout[co * hw..(co + 1) * hw].iter().sum::<f32>();
    }
    if let Some(dx) = dx {
        // dcols[p, pix] = Σ_co W[co, p] · dout[co, pix]
        gemm(g.patch_len(), g.out_channels, hw, weights, true, dout, false, 0.0, &mut cols);
        col2im(&cols, g, dx);
    }
}

/// 2×2 stride-2 max pooling of one plane. `argmax` receives the winning
/// window offset encoded as `dy * 2 + dx`; the first maximum in row-major
/// order wins ties.
pub fn max_pool_plane(x: &[f32], h: usize, w: usize, out: &mut [f32], argmax: &mut [u8]) {
    let (oh, ow) = (h / 2, w / 2);
    for i in 0..oh {
        for j in 0..ow {
            let mut best = x[2 * i * w + 2 * j];
            let mut pos = 0u8;
            for p in 1..4u8 {
                let (dy, dx) = ((p / 2) as usize, (p % 2) as usize);
                let v = x[(2 * i + dy) * w + 2 * j + dx];
                if v > best {
                    best = v;
                    pos = p;
                }
            }
            out[i * ow + j] = best;
            argmax[i * ow + j] = pos;
        }
    }
}

/// Places each value of an `h×w` plane at its recorded offset inside a
/// zeroed `2h×2w` plane.
pub fn unpool_plane(x: &[f32], h: usize, w: usize, argmax: &[u8], out: &mut [f32]) {
    let ow = 2 * w;
    out.fill(0.0);
    for i in 0..h {
        for j in 0..w {
            let p = argmax[i * w + j];
            let (dy, dx) = ((p / 2) as usize, (p % 2) as usize);
            out[(2 * i + dy) * ow + 2 * j + dx] = x[i * w + j];
        }
    }
}

/// Gathers the values at recorded offsets; adjoint of [`unpool_plane`].
pub fn gather_plane(big: &[f32], h: usize, w: usize, argmax: &[u8], out: &mut [f32]) {
    let ow = 2 * w;
    for i in 0..h {
        for j in 0..w {
            let p = argmax[i * w + j];
            let (dy, dx) = ((p / 2) as usize, (p % 2) as usize);
            out[i * w + j] += big[(2 * i + dy) * ow + 2 * j + dx];
        }
    }
}

/// Source taps for align-corners-false 2× upsampling along one axis.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

pub fn upsample_plane(x: &[f32], h: usize, w: usize, out: &mut [f32]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let ow = 2 * w;
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = x[y0 * w + x0] * (1.0 - fx) + x[y0 * w + x1] * fx;
            let bottom = x[y1 * w + x0] * (1.0 - fx) + x[y1 * w + x1] * fx;
            out[oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
}

pub fn upsample_plane_backward(dout: &[f32], h: usize, w: usize, dx: &mut [f32]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let ow = 2 * w;
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = dout[oy * ow + ox];
            dx[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            dx[y0 * w + x1] += g * (1.0 - fy) * fx;
            dx[y1 * w + x0] += g * fy * (1.0 - fx);
            dx[y1 * w + x1] += g * fy * fx;
        }
    }
}

/// Mean over non-overlapping `factor×factor` blocks.
pub fn area_pool_plane(x: &[f32], h: usize, w: usize, factor: usize, out: &mut [f32]) {
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f32;
    out.fill(0.0);
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        let orow = &mut out[(y / factor) * ow..(y / factor + 1) * ow];
        for (xx, v) in row.iter().enumerate() {
            orow[xx / factor] += v;
        }
    }
    debug_assert_eq!(out.len(), oh * ow);
    out.iter_mut().for_each(|v| *v *= inv);
}

pub fn area_pool_plane_backward(dout: &[f32], h: usize, w: usize, factor: usize, dx: &mut [f32]) {
    let ow = w / factor;
    let inv = 1.0 / (factor * factor) as f32;
    for y in 0..h {
        for xx in 0..w {
            dx[y * w + xx] += dout[(y / factor) * ow + xx / factor] * inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation of the dilated cross-correlation sum.
    fn conv_direct(x: &[f32], wts: &[f32], bias: &[f32], g: &ConvGeometry) -> Vec<f32> {
        let (h, w, k, d) = (g.height, g.width, g.kernel, g.dilation as isize);
        let half = (k / 2) as isize;
        let mut out = vec![0.0; g.out_channels * h * w];
        for co in 0..g.out_channels {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = bias[co] as f64;
                    for ci in 0..g.in_channels {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let sy = y + (ky - half) * d;
                                let sx = xx + (kx - half) * d;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wi = ((co * g.in_channels + ci) * k + ky as usize) * k + kx as usize;
                                acc += wts[wi] as f64
                                    * x[ci * h * w + sy as usize * w + sx as usize] as f64;
                            }
                        }
                    }
                    out[co * h * w + y as usize * w + xx as usize] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_direct_sum() {
        let g = ConvGeometry { in_channels: 3, out_channels: 4, height: 7, width: 6, kernel: 3, dilation: 2 };
        let x: Vec<f32> = (0..3 * 42).map(|i| ((i * 37 % 11) as f32 - 5.0) / 7.0).collect();
        let wts: Vec<f32> = (0..4 * 27).map(|i| ((i * 13 % 17) as f32 - 8.0) / 9.0).collect();
        let bias = [0.1, -0.2, 0.3, 0.0];
        let mut out = vec![0.0; 4 * 42];
        conv_forward(&x, &wts, &bias, &g, &mut out);
        let expect = conv_direct(&x, &wts, &bias, &g);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry { in_channels: 2, out_channels: 1, height: 5, width: 4, kernel: 3, dilation: 3 };
        let x: Vec<f32> = (0..40).map(|i| (i as f32).sin()).collect();
        let c: Vec<f32> = (0..g.patch_len() * 20).map(|i| (i as f32 * 0.7).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0; 40];
        col2im(&c, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn area_pool_averages_blocks() {
        let x = [1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0];
        let mut out = [0.0; 2];
        area_pool_plane(&x, 2, 4, 2, &mut out);
        assert_eq!(out, [2.0, 6.0]);
    }
}
