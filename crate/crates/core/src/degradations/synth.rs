use rand::Rng;

use crate::error::{config_err, Result};
use crate::numerics::Tensor;
use crate::seed::rng_for;

/// Procedural clean RGB image in `[0, 1]`: a smooth two-color gradient,
/// a few soft Gaussian blobs, and hard-edged discs and rectangles.
///
/// Geometry is expressed in fractions of the image extent, so a larger
/// render of the same seed is the same scene at a finer sampling.
pub fn gen_clean_image(seed: u64, h: usize, w: usize) -> Result<Tensor> {
    if h < 16 || w < 16 {
        return Err(config_err!("clean images must be at least 16x16, got {h}x{w}"));
    }
    let mut rng = rng_for(seed, "clean-image", &[]);
    let mut img = vec![0.0f32; 3 * h * w];

    let c0: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());

    let n_blobs = rng.gen_range(2..=4);
    let blobs: Vec<([f32; 2], f32, [f32; 3])> = (0..n_blobs)
        .map(|_| {
            let center = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let sigma = rng.gen_range(0.08..0.25);
            let amp = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
            (center, sigma, amp)
        })
        .collect();

    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f32 + 0.5) / w as f32, (y as f32 + 0.5) / h as f32);
            let t = (((u - 0.5) * dx + (v - 0.5) * dy) / std::f32::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                let mut val = c0[c] + (c1[c] - c0[c]) * t;
                for (center, sigma, amp) in &blobs {
                    let r2 = (u - center[0]).powi(2) + (v - center[1]).powi(2);
                    val += amp[c] * (-r2 / (2.0 * sigma * sigma)).exp();
                }
                img[(c * h + y) * w + x] = val;
            }
        }
    }

    let n_shapes = rng.gen_range(2..=4);
    for _ in 0..n_shapes {
        let color: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
        let disc = rng.gen_bool(0.5);
        let (cx, cy) = (rng.gen_range(0.1..0.9f32), rng.gen_range(0.1..0.9f32));
        let (sx, sy) = (rng.gen_range(0.08..0.3f32), rng.gen_range(0.08..0.3f32));
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((x as f32 + 0.5) / w as f32, (y as f32 + 0.5) / h as f32);
                let inside = if disc {
                    (u - cx).powi(2) + (v - cy).powi(2) <= sx * sx
                } else {
                    (u - cx).abs() <= sx && (v - cy).abs() <= sy
                };
                if inside {
                    for (c, col) in color.iter().enumerate() {
                        img[(c * h + y) * w + x] = *col;
                    }
                }
            }
        }
    }

    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(&[3, h, w], img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = gen_clean_image(11, 32, 32).unwrap();
        assert_eq!(a, gen_clean_image(11, 32, 32).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gen_clean_image(11, 8, 32).is_err());
    }

    #[test]
    fn different_seeds_differ() {
        for s in 0..100u64 {
            let a = gen_clean_image(2 * s, 32, 32).unwrap();
            let b = gen_clean_image(2 * s + 1, 32, 32).unwrap();
            let mad: f32 =
                a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.len() as f32;
            assert!(mad > 0.01, "seeds {} and {} too similar: {mad}", 2 * s, 2 * s + 1);
        }
    }
}
