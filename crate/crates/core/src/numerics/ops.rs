//! Forward kernels and their adjoints. The tape in [`super::tape`] calls the
//! same functions, so inference and training share one numeric path.

use crate::error::{config_err, shape_err, Result};

use super::Tensor;

/// Zero padding mode for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Pad with `(k - 1) / 2` zeros so stride-1 output keeps the input extent.
    Same,
    Valid,
}

/// Resolved convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<ConvGeom> {
        let (c_in, h, w) = match input {
            &[c, h, w] => (c, h, w),
            _ => return Err(shape_err!("conv2d input must be [c, h, w], got {input:?}")),
        };
        let (c_out, kc, kh, kw) = match kernel {
            &[o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(shape_err!(
                    "conv2d kernel must be [c_out, c_in, k, k], got {kernel:?}"
                ))
            }
        };
        if kh != kw {
            return Err(config_err!("conv2d kernel must be square, got {kh}x{kw}"));
        }
        if kh % 2 == 0 {
            return Err(config_err!("conv2d kernel size must be odd, got {kh}"));
        }
        if stride == 0 {
            return Err(config_err!("conv2d stride must be positive"));
        }
        if kc != c_in {
            return Err(shape_err!(
                "conv2d kernel expects {kc} input channels, input has {c_in}"
            ));
        }
        let k = kh;
        let pad = match padding {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!(
                "conv2d input {h}x{w} smaller than kernel {k}x{k} under {padding:?} padding"
            ));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Row-major GEMM `c (+)= op(a) * op(b)` where `a` is `m x k` and `b` is
/// `k x n` after the optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths were asserted above and the strides describe
    // row-major (or transposed row-major) layouts inside those slices.
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

/// Matrix product of `[n x k]` and `[k x m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = matmul_raw(a, b)?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.rc()?;
    let (k2, m) = b.rc()?;
    if k != k2 {
        return Err(shape_err!(
            "matmul inner dims differ: {:?} x {:?}",
            a.dims(),
            b.dims()
        ));
    }
    let mut out = vec![0.0; n * m];
    gemm(n, k, m, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![n, m], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.rc()?;
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// Stride-1 2-D cross-correlation.
pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
    conv2d_strided(input, kernel, 1, padding)
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
pub fn conv2d_strided(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let geom = ConvGeom::new(input.dims(), kernel.dims(), stride, padding)?;
    let cols = im2col(input.data(), &geom);
    let out = conv_forward(&cols, kernel.data(), &geom);
    out.ensure_finite("conv2d")?;
    Ok(out)
}

pub(crate) fn im2col(input: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (k, ow, oh) = (g.k, g.out_w, g.out_h);
    let mut cols = vec![0.0; g.patch_len() * g.out_len()];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (k, ow, oh) = (g.k, g.out_w, g.out_h);
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_forward(cols: &[f32], kernel: &[f32], g: &ConvGeom) -> Tensor {
    let mut out = vec![0.0; g.c_out * g.out_len()];
    gemm(
        g.c_out,
        g.patch_len(),
        g.out_len(),
        kernel,
        false,
        cols,
        false,
        &mut out,
        false,
    );
    Tensor::from_parts(vec![g.c_out, g.out_h, g.out_w], out)
}

/// Gradient with respect to the kernel, given the saved im2col matrix.
pub(crate) fn conv_kernel_grad(grad_out: &[f32], cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let mut dk = vec![0.0; g.c_out * g.patch_len()];
    gemm(
        g.c_out,
        g.out_len(),
        g.patch_len(),
        grad_out,
        false,
        cols,
        true,
        &mut dk,
        false,
    );
    dk
}

/// Gradient with respect to the input.
pub(crate) fn conv_input_grad(grad_out: &[f32], kernel: &[f32], g: &ConvGeom) -> Vec<f32> {
    let mut dcols = vec![0.0; g.patch_len() * g.out_len()];
    gemm(
        g.patch_len(),
        g.c_out,
        g.out_len(),
        kernel,
        true,
        grad_out,
        false,
        &mut dcols,
        false,
    );
    col2im(&dcols, g)
}

/// Nearest-neighbour 2x upsampling of a `[c, h, w]` tensor.
pub fn upsample_nearest2x(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let src = input.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src_row = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let dst_row = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for (x, d) in dst_row.iter_mut().enumerate() {
                *d = src_row[x / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Adjoint of [`upsample_nearest2x`]: sums each 2x2 block.
pub(crate) fn upsample_nearest2x_adjoint(grad: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * h + y / 2) * w + x / 2] += grad[(ch * oh + y) * ow + x];
            }
        }
    }
    out
}

pub fn leaky_relu(input: &Tensor, slope: f32) -> Tensor {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    Tensor::from_parts(input.dims().to_vec(), data)
}

/// Channel means of a `[c, h, w]` tensor, returned as `[1, c]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let hw = h * w;
    let data = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f32>() / hw as f32)
        .collect::<Vec<_>>();
    debug_assert_eq!(data.len(), c);
    Ok(Tensor::from_parts(vec![1, c], data))
}

/// Box-filter (area) resampling of a `[c, h, w]` tensor to `[c, out_h, out_w]`.
/// Exact block averaging when the extents divide evenly.
pub fn area_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("area_resize target must be positive"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(input.clone());
    }
    let wy = area_weights(h, out_h);
    let wx = area_weights(w, out_w);
    let src = input.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for (oy, ry) in wy.iter().enumerate() {
            for (ox, rx) in wx.iter().enumerate() {
                let mut acc = 0.0f64;
                for &(iy, fy) in ry {
                    for &(ix, fx) in rx {
                        acc += fy * fx * src[(ch * h + iy) * w + ix] as f64;
                    }
                }
                out[(ch * out_h + oy) * out_w + ox] = acc as f32;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

/// For each output cell, the input cells it overlaps and their normalized weights.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = lo + ratio;
            let mut cells = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    cells.push((i, overlap / ratio));
                }
                i += 1;
            }
            cells
        })
        .collect()
}

/// Centered `out_h x out_w` window of a `[c, h, w]` tensor.
pub fn center_crop(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
        return Err(shape_err!(
            "cannot crop {out_h}x{out_w} out of {h}x{w}"
        ));
    }
    let (y0, x0) = ((h - out_h) / 2, (w - out_w) / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in y0..y0 + out_h {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&src[row + x0..row + x0 + out_w]);
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}
