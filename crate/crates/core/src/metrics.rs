//! Reference-based image quality: PSNR and SSIM.

use std::fmt::Write as _;

use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB: `10 log10(max_val^2 / MSE)`, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    let mse = mse(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err!("metric inputs differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let g: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Mean structural similarity of two `[c, h, w]` images with dynamic range 1.
///
/// Local statistics use an 11x11 Gaussian window (sigma 1.5) evaluated at
/// every fully-contained position; the per-channel means are averaged.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err!("metric inputs differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    let (c, h, w) = a.chw()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        ));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let win = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);

    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let to64 = |p: &[f32]| p.iter().map(|v| *v as f64).collect::<Vec<_>>();
        let (xa, xb) = (to64(pa), to64(pb));
        let xx: Vec<f64> = xa.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = xb.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] =
            [&xa, &xb, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &win));
        let mut sum = 0.0;
        for i in 0..oh * ow {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

/// Separable correlation with `win` over valid positions only.
fn filter_valid(p: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| win[j] * p[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|j| win[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Per-image PSNR/SSIM for one task, with summary statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub task: String,
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl MetricReport {
    pub fn new(task: impl Into<String>) -> Self {
        MetricReport {
            task: task.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, restored: &Tensor, reference: &Tensor) -> Result<()> {
        self.psnr_db.push(psnr(restored, reference, 1.0)?);
        self.ssim.push(ssim(restored, reference)?);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.psnr_db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psnr_db.is_empty()
    }

    pub fn psnr_mean(&self) -> f64 {
        mean(&self.psnr_db)
    }

    pub fn psnr_std(&self) -> f64 {
        stddev(&self.psnr_db)
    }

    pub fn ssim_mean(&self) -> f64 {
        mean(&self.ssim)
    }

    pub fn ssim_std(&self) -> f64 {
        stddev(&self.ssim)
    }

    /// `task<TAB>metric<TAB>mean<TAB>stddev`, one line per metric.
    pub fn to_lines(&self) -> String {
        format!(
            "{}\tpsnr\t{:.6}\t{:.6}\n{}\tssim\t{:.6}\t{:.6}\n",
            self.task,
            self.psnr_mean(),
            self.psnr_std(),
            self.task,
            self.ssim_mean(),
            self.ssim_std()
        )
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn stddev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Aligned human-readable table of several reports.
pub fn format_table(reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.task.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<width$}  {:>5}  {:>16}  {:>16}\n",
        "task", "n", "psnr (dB)", "ssim"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>8.3} ± {:<5.3}  {:>8.4} ± {:<6.4}",
            r.task,
            r.len(),
            r.psnr_mean(),
            r.psnr_std(),
            r.ssim_mean(),
            r.ssim_std()
        );
    }
    out
}
