//! Synthetic paired data: procedural clean images, seeded degradation
//! operators, PPM image files, and text manifests.

mod dataset;
mod ppm;
mod synth;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Error, Result};
use crate::numerics::Tensor;
use crate::seed::rng_for;

pub use dataset::{
    load_pairs, make_dataset, DataConfig, DatasetManifest, DatasetSplits, Pair, TaskConfig,
    TaskEntry, MANIFEST_MIXED, MANIFEST_TEST, MANIFEST_TRAIN,
};
pub use ppm::{read_ppm, write_ppm, decode_ppm, encode_ppm};
pub use synth::gen_clean_image;

/// A degradation operator and its parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Additive i.i.d. Gaussian noise with standard deviation `sigma`.
    GaussianNoise { sigma: f32 },
    /// Separable Gaussian blur, odd `size`, replicated borders.
    GaussianBlur { sigma: f32, size: usize },
    /// `scale * x^gamma`.
    LowLight { scale: f32, gamma: f32 },
    /// Per `block x block` tile and channel: the tile mean is quantized down
    /// to a multiple of `1 / levels` and the deviations from the mean are
    /// rounded to the same step.
    BlockQuantize { block: usize, levels: u32 },
    /// Zero out `block x block` tiles, each with probability `fraction`.
    Masking { fraction: f32, block: usize },
}

impl Degradation {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Degradation::GaussianNoise { .. } => "gaussian_noise",
            Degradation::GaussianBlur { .. } => "gaussian_blur",
            Degradation::LowLight { .. } => "low_light",
            Degradation::BlockQuantize { .. } => "block_quantize",
            Degradation::Masking { .. } => "masking",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Degradation::GaussianNoise { sigma } => sigma.is_finite() && sigma >= 0.0,
            Degradation::GaussianBlur { sigma, size } => {
                sigma.is_finite() && sigma >= 0.0 && size % 2 == 1
            }
            Degradation::LowLight { scale, gamma } => {
                scale > 0.0 && scale <= 1.0 && gamma.is_finite() && gamma > 0.0
            }
            Degradation::BlockQuantize { block, levels } => block >= 1 && levels >= 2,
            Degradation::Masking { fraction, block } => {
                (0.0..1.0).contains(&fraction) && block >= 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(config_err!("invalid degradation parameters: {self}"))
        }
    }

    /// Default parameters of each kind in the standard five-task suite.
    pub fn default_suite() -> Vec<Degradation> {
        vec![
            Degradation::GaussianNoise { sigma: 0.1 },
            Degradation::GaussianBlur {
                sigma: 1.0,
                size: 5,
            },
            Degradation::LowLight {
                scale: 0.35,
                gamma: 1.6,
            },
            Degradation::BlockQuantize {
                block: 8,
                levels: 8,
            },
            Degradation::Masking {
                fraction: 0.25,
                block: 4,
            },
        ]
    }
}

/// `kind:key=value,key=value`, e.g. `gaussian_blur:sigma=1.2,size=7`.
impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.kind_name())?;
        match self {
            Degradation::GaussianNoise { sigma } => write!(f, "sigma={sigma}"),
            Degradation::GaussianBlur { sigma, size } => write!(f, "sigma={sigma},size={size}"),
            Degradation::LowLight { scale, gamma } => write!(f, "scale={scale},gamma={gamma}"),
            Degradation::BlockQuantize { block, levels } => {
                write!(f, "block={block},levels={levels}")
            }
            Degradation::Masking { fraction, block } => {
                write!(f, "fraction={fraction},block={block}")
            }
        }
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, params) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        let mut kv = std::collections::BTreeMap::new();
        for part in params.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| config_err!("expected key=value in degradation, got {part:?}"))?;
            kv.insert(k.trim(), v.trim());
        }
        let num = |key: &str| -> Result<f64> {
            let v = kv
                .get(key)
                .ok_or_else(|| config_err!("degradation {kind} needs {key}"))?;
            v.parse::<f64>()
                .map_err(|_| config_err!("bad number for {key}: {v:?}"))
        };
        let d = match kind {
            "gaussian_noise" => Degradation::GaussianNoise {
                sigma: num("sigma")? as f32,
            },
            "gaussian_blur" => Degradation::GaussianBlur {
                sigma: num("sigma")? as f32,
                size: num("size")? as usize,
            },
            "low_light" => Degradation::LowLight {
                scale: num("scale")? as f32,
                gamma: num("gamma")? as f32,
            },
            "block_quantize" => Degradation::BlockQuantize {
                block: num("block")? as usize,
                levels: num("levels")? as u32,
            },
            "masking" => Degradation::Masking {
                fraction: num("fraction")? as f32,
                block: num("block")? as usize,
            },
            other => return Err(config_err!("unknown degradation kind {other:?}")),
        };
        d.validate()?;
        Ok(d)
    }
}

/// An operator together with the seed of its random stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub degradation: Degradation,
    pub seed: u64,
}

/// Applies `spec` to a `[3, h, w]` image in `[0, 1]`. The result is clipped
/// to `[0, 1]` and depends only on the input and `spec`.
pub fn apply_degradation(clean: &Tensor, spec: &DegradationSpec) -> Result<Tensor> {
    spec.degradation.validate()?;
    let (c, h, w) = clean.chw()?;
    let mut rng = rng_for(spec.seed, "degradation", &[]);
    let src = clean.data();
    let mut out = match spec.degradation {
        Degradation::GaussianNoise { sigma } => {
            if sigma == 0.0 {
                return Ok(clean.clone());
            }
            let normal = Normal::new(0.0f32, sigma).map_err(|e| config_err!("{e}"))?;
            src.iter().map(|v| v + normal.sample(&mut rng)).collect()
        }
        Degradation::GaussianBlur { sigma, size } => {
            if sigma == 0.0 || size == 1 {
                return Ok(clean.clone());
            }
            blur(src, c, h, w, sigma, size)
        }
        Degradation::LowLight { scale, gamma } => {
            src.iter().map(|v| scale * v.powf(gamma)).collect::<Vec<_>>()
        }
        Degradation::BlockQuantize { block, levels } => {
            let step = 1.0 / levels as f32;
            let mut out = src.to_vec();
            for ch in 0..c {
                for y0 in (0..h).step_by(block) {
                    for x0 in (0..w).step_by(block) {
                        let (y1, x1) = ((y0 + block).min(h), (x0 + block).min(w));
                        let idx = |y: usize, x: usize| (ch * h + y) * w + x;
                        let n = ((y1 - y0) * (x1 - x0)) as f32;
                        let mut sum = 0.0f32;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                sum += src[idx(y, x)];
                            }
                        }
                        let mean = sum / n;
                        let dc = (mean / step).floor() * step;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                let i = idx(y, x);
                                out[i] = dc + ((src[i] - mean) / step).round() * step;
                            }
                        }
                    }
                }
            }
            out
        }
        Degradation::Masking { fraction, block } => {
            let (by, bx) = (h.div_ceil(block), w.div_ceil(block));
            let masked: Vec<bool> = (0..by * bx).map(|_| rng.gen::<f32>() < fraction).collect();
            let mut out = src.to_vec();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        if masked[(y / block) * bx + x / block] {
                            out[(ch * h + y) * w + x] = 0.0;
                        }
                    }
                }
            }
            out
        }
    };
    for v in &mut out {
        *v = clip01(*v);
    }
    Tensor::new(clean.dims(), out)
}

/// Applies `specs` left to right.
pub fn apply_chain(clean: &Tensor, specs: &[DegradationSpec]) -> Result<Tensor> {
    specs
        .iter()
        .try_fold(clean.clone(), |img, spec| apply_degradation(&img, spec))
}

/// Clamp to `[0, 1]` with `-0.0` mapped to `+0.0`.
pub fn clip01(v: f32) -> f32 {
    if v > 1.0 {
        1.0
    } else if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn gaussian_kernel(sigma: f32, size: usize) -> Vec<f32> {
    let r = (size / 2) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

fn blur(src: &[f32], c: usize, h: usize, w: usize, sigma: f32, size: usize) -> Vec<f32> {
    let k = gaussian_kernel(sigma, size);
    let r = (size / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xi = clampi(x as isize + j as isize - r, w);
                    acc += kv * src[(ch * h + y) * w + xi];
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yi = clampi(y as isize + j as isize - r, h);
                    acc += kv * tmp[(ch * h + yi) * w + x];
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn spec(d: Degradation, seed: u64) -> DegradationSpec {
        DegradationSpec { degradation: d, seed }
    }

    fn clean() -> Tensor {
        gen_clean_image(5, 32, 32).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let x = clean();
        let y = apply_degradation(&x, &spec(Degradation::GaussianNoise { sigma: 0.0 }, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn delta_blur_is_identity() {
        let x = clean();
        for d in [
            Degradation::GaussianBlur { sigma: 1.0, size: 1 },
            Degradation::GaussianBlur { sigma: 0.0, size: 5 },
            Degradation::GaussianBlur { sigma: 1e-3, size: 5 },
        ] {
            assert_eq!(apply_degradation(&x, &spec(d, 1)).unwrap(), x, "{d}");
        }
    }

    #[test]
    fn noise_psnr_matches_sigma() {
        // mid-gray keeps clipping negligible at sigma = 0.1, so E[MSE] = 0.01
        let gray = Tensor::full(&[3, 32, 32], 0.5);
        let mut total = 0.0;
        for seed in 0..100 {
            let y = apply_degradation(&gray, &spec(Degradation::GaussianNoise { sigma: 0.1 }, seed))
                .unwrap();
            total += psnr(&y, &gray, 1.0).unwrap();
        }
        let mean = total / 100.0;
        assert!((mean - 20.0).abs() <= 0.5, "mean psnr {mean}");
    }

    #[test]
    fn outputs_stay_in_range_and_reduce_psnr() {
        let x = clean();
        for (i, d) in Degradation::default_suite().into_iter().enumerate() {
            let y = apply_degradation(&x, &spec(d, i as u64)).unwrap();
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)), "{d}");
            assert!(psnr(&y, &x, 1.0).unwrap() < 45.0, "{d}");
            assert_eq!(y, apply_degradation(&x, &spec(d, i as u64)).unwrap());
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let x = clean();
        for d in [
            Degradation::GaussianNoise { sigma: -0.1 },
            Degradation::GaussianBlur { sigma: 1.0, size: 4 },
            Degradation::LowLight { scale: 0.0, gamma: 1.0 },
            Degradation::LowLight { scale: 1.5, gamma: 1.0 },
            Degradation::BlockQuantize { block: 0, levels: 4 },
            Degradation::BlockQuantize { block: 8, levels: 1 },
            Degradation::Masking { fraction: 1.0, block: 4 },
        ] {
            assert!(
                matches!(apply_degradation(&x, &spec(d, 0)), Err(Error::Config(_))),
                "{d:?}"
            );
        }
    }

    #[test]
    fn text_form_roundtrips() {
        for d in Degradation::default_suite() {
            assert_eq!(d.to_string().parse::<Degradation>().unwrap(), d);
        }
        assert!("rain:amount=1".parse::<Degradation>().is_err());
    }

    #[test]
    fn block_quantize_splits_tile_mean_and_detail() {
        // One channel, two 2x2 tiles side by side. Left tile: mean 0.3 -> 0.25,
        // deviations -0.2, 0, -0.1, 0.3 -> -0.25, 0, 0, 0.25. Right tile: mean
        // 0.7625 -> 0.75, deviations 0.1375, 0.1875, -0.2625, -0.0625.
        let x = Tensor::new(&[1, 2, 4], vec![0.1, 0.3, 0.9, 0.95, 0.2, 0.6, 0.5, 0.7]).unwrap();
        let d = Degradation::BlockQuantize { block: 2, levels: 4 };
        let y = apply_degradation(&x, &spec(d, 0)).unwrap();
        let want = [0.0, 0.25, 1.0, 1.0, 0.25, 0.5, 0.5, 0.75];
        for (got, w) in y.data().iter().zip(want) {
            assert!((got - w).abs() < 1e-6, "{:?}", y.data());
        }
    }
}
