//! Image quality metrics on spectral cubes.

use crate::error::{Error, Result};
use crate::optics::Cube;

/// Reported in place of +inf when the two cubes are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check(op: &'static str, x: &Cube, r: &Cube) -> Result<()> {
    if (x.h, x.w, x.c) != (r.h, r.w, r.c) {
        return Err(Error::shape(op, format!("{}x{}x{} vs {}x{}x{}", x.h, x.w, x.c, r.h, r.w, r.c)));
    }
    Ok(())
}

pub fn mse(x: &Cube, reference: &Cube) -> Result<f64> {
    check("mse", x, reference)?;
    let s: f64 = x.data.iter().zip(&reference.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.data.len() as f64)
}

/// `10 log10(peak^2 / MSE)` over all entries, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Cube, reference: &Cube, peak: f64) -> Result<f64> {
    let m = mse(x, reference)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    let g1: Vec<f64> = g.iter().map(|v| v / s).collect();
    g1.iter().flat_map(|a| g1.iter().map(move |b| a * b)).collect()
}

/// Mean SSIM of one `h x w` band over all fully-contained windows.
fn ssim_band(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let (c1, c2) = ((SSIM_K1 * 1.0f64).powi(2), (SSIM_K2 * 1.0f64).powi(2));
    let (wh, ww, weights) = if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        (SSIM_WINDOW, SSIM_WINDOW, gaussian_window())
    } else {
        // band smaller than the window: one uniform window over the whole band
        (h, w, vec![1.0 / (h * w) as f64; h * w])
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - wh {
        for ox in 0..=w - ww {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..wh {
                for dx in 0..ww {
                    let k = (oy + dy) * w + ox + dx;
                    let wt = weights[dy * ww + dx];
                    let (a, b) = (x[k], y[k]);
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Structural similarity (11x11 Gaussian window, sigma 1.5, K1 = 0.01,
/// K2 = 0.03, dynamic range 1) computed per band and averaged over bands.
/// Bands smaller than the window use a single uniform window covering the
/// whole band.
pub fn ssim(x: &Cube, reference: &Cube) -> Result<f64> {
    check("ssim", x, reference)?;
    let s: f64 = (0..x.c).map(|i| ssim_band(x.band(i), reference.band(i), x.h, x.w)).sum();
    Ok(s / x.c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_cube(h: usize, w: usize, c: usize, seed: u64) -> Cube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = crate::Tensor::rand_uniform(&[1, c, h, w], 0.0, 1.0, &mut rng);
        Cube::from_tensor(&t).unwrap()
    }

    #[test]
    fn psnr_fixtures() {
        let x = random_cube(8, 8, 3, 1);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        let zero = Cube::zeros(8, 8, 3);
        let half = Cube { data: vec![0.5; 192], ..zero.clone() };
        let v = psnr(&half, &zero, 1.0).unwrap();
        assert!((v - 6.0206).abs() < 1e-4, "{v}");
        assert!(psnr(&x, &Cube::zeros(8, 8, 2), 1.0).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let x = random_cube(16, 16, 2, 2);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let small = random_cube(5, 6, 2, 3);
        assert_eq!(ssim(&small, &small).unwrap(), 1.0);
    }

    #[test]
    fn ssim_checkerboard_inverse_is_negative() {
        let data: Vec<f64> = (0..16 * 16).map(|k| ((k / 16 + k % 16) % 2) as f64).collect();
        let x = Cube::new(16, 16, 1, data.clone()).unwrap();
        let inv = Cube::new(16, 16, 1, data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&x, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let base = random_cube(24, 24, 2, 4);
        let mut prev = 1.0;
        for (i, &sigma) in [0.01, 0.05, 0.1].iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let n = Normal::new(0.0, sigma).unwrap();
            let noisy = Cube { data: base.data.iter().map(|v| v + n.sample(&mut rng)).collect(), ..base.clone() };
            let s = ssim(&noisy, &base).unwrap();
            assert!(s < prev, "sigma {sigma}: {s} !< {prev}");
            prev = s;
        }
    }

    #[test]
    fn metrics_are_band_permutation_invariant() {
        let x = random_cube(12, 12, 3, 5);
        let y = random_cube(12, 12, 3, 6);
        let perm = |c: &Cube| {
            let mut d = Vec::new();
            for b in [2, 0, 1] {
                d.extend_from_slice(c.band(b));
            }
            Cube { data: d, ..c.clone() }
        };
        assert!((psnr(&x, &y, 1.0).unwrap() - psnr(&perm(&x), &perm(&y), 1.0).unwrap()).abs() < 1e-12);
        assert!((ssim(&x, &y).unwrap() - ssim(&perm(&x), &perm(&y)).unwrap()).abs() < 1e-12);
    }
}
