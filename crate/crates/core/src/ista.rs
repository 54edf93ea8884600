//! Classical ISTA baseline and spectral-norm estimation for the sensing
//! operator.

use crate::error::{Error, Result};
use crate::optics::{self, Cube, DispersionRule, Mask, Measurement};

/// Exact proximal map of `tau * |.|_1`.
pub fn soft_threshold(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau >= 0.0) {
        return Err(Error::Usage(format!("threshold must be >= 0, got {tau}")));
    }
    Ok(v.iter().map(|&x| shrink(x, tau)).collect())
}

#[inline]
fn shrink(x: f64, tau: f64) -> f64 {
    x.signum() * (x.abs() - tau).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormStatus {
    Converged,
    MaxIterations,
    /// The operator is identically zero (e.g. an all-zero mask).
    ZeroOperator,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormEstimate {
    /// Estimate of the largest eigenvalue of `Phi^T Phi`.
    pub value: f64,
    pub iterations: usize,
    pub status: NormStatus,
}

/// Power iteration on `Phi^T Phi` using only forward/adjoint applications.
/// Stops when the Rayleigh quotient changes by less than `1e-8` relatively.
pub fn power_iteration_norm(mask: &Mask, rule: &DispersionRule, iters: usize) -> Result<NormEstimate> {
    let (h, w, c) = (mask.h, mask.w, rule.channels());
    // deterministic, strictly positive start vector so no eigendirection is missed
    let mut v = Cube::new(h, w, c, (0..h * w * c).map(|k| 1.0 + ((k * 7919) % 101) as f64 / 101.0).collect())?;
    let norm = |x: &Cube| x.dot(x).sqrt();
    let n0 = norm(&v);
    v.data.iter_mut().for_each(|x| *x /= n0);
    let mut prev = 0.0;
    for it in 1..=iters.max(1) {
        let y = optics::apply_phi(&v, mask, rule)?;
        let rq = y.dot(&y);
        let z = optics::adjoint(&y, mask, rule)?;
        let nz = norm(&z);
        if nz == 0.0 {
            return Ok(NormEstimate { value: 0.0, iterations: it, status: NormStatus::ZeroOperator });
        }
        if it > 1 && (rq - prev).abs() <= 1e-8 * rq.abs() {
            return Ok(NormEstimate { value: rq, iterations: it, status: NormStatus::Converged });
        }
        prev = rq;
        v = Cube { data: z.data.iter().map(|x| x / nz).collect(), ..z };
    }
    Ok(NormEstimate { value: prev, iterations: iters, status: NormStatus::MaxIterations })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxKind {
    /// `psi(x) = |x|_1`.
    SoftThresholdIdentity,
    /// `psi(x) = |D x|_1` with `D` the detail part of a one-level orthonormal
    /// 2D Haar transform per band (scaled horizontal, vertical and diagonal
    /// differences of 2x2 blocks). The prox is exact because the transform is
    /// orthonormal. Requires even height and width.
    SoftThresholdDiff,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IstaConfig {
    pub iterations: usize,
    pub lambda: f64,
    pub rho: f64,
    pub prox: ProxKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IstaStatus {
    Ok,
    /// `rho > 1 / |Phi|^2`: the objective is not guaranteed to decrease.
    StepTooLarge,
}

#[derive(Clone, Debug)]
pub struct IstaResult {
    pub x: Cube,
    /// `F(x_k) = 0.5 |y - Phi x_k|^2 + lambda psi(x_k)` for `k = 0..=iterations`.
    pub objective: Vec<f64>,
    pub status: IstaStatus,
}

/// In-place one-level orthonormal Haar analysis per 2x2 block:
/// `(a, b, c, d) -> (avg, horiz, vert, diag)`.
fn haar_forward(band: &mut [f64], h: usize, w: usize) {
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            let (i0, i1, i2, i3) = (y * w + x, y * w + x + 1, (y + 1) * w + x, (y + 1) * w + x + 1);
            let (a, b, c, d) = (band[i0], band[i1], band[i2], band[i3]);
            band[i0] = 0.5 * (a + b + c + d);
            band[i1] = 0.5 * (a - b + c - d);
            band[i2] = 0.5 * (a + b - c - d);
            band[i3] = 0.5 * (a - b - c + d);
        }
    }
}

/// The block transform above is symmetric and orthonormal, so it is its own inverse.
fn haar_inverse(band: &mut [f64], h: usize, w: usize) {
    haar_forward(band, h, w);
}

fn is_detail(k: usize, w: usize) -> bool {
    let (y, x) = (k / w, k % w);
    !(y % 2 == 0 && x % 2 == 0)
}

fn prior(x: &Cube, kind: ProxKind) -> f64 {
    match kind {
        ProxKind::SoftThresholdIdentity => x.data.iter().map(|v| v.abs()).sum(),
        ProxKind::SoftThresholdDiff => {
            let mut d = x.data.clone();
            let mut s = 0.0;
            for band in d.chunks_mut(x.h * x.w) {
                haar_forward(band, x.h, x.w);
                s += band.iter().enumerate().filter(|(k, _)| is_detail(*k, x.w)).map(|(_, v)| v.abs()).sum::<f64>();
            }
            s
        }
    }
}

fn prox(x: &mut Cube, tau: f64, kind: ProxKind) {
    match kind {
        ProxKind::SoftThresholdIdentity => x.data.iter_mut().for_each(|v| *v = shrink(*v, tau)),
        ProxKind::SoftThresholdDiff => {
            let (h, w) = (x.h, x.w);
            for band in x.data.chunks_mut(h * w) {
                haar_forward(band, h, w);
                for (k, v) in band.iter_mut().enumerate() {
                    if is_detail(k, w) {
                        *v = shrink(*v, tau);
                    }
                }
                haar_inverse(band, h, w);
            }
        }
    }
}

/// `0.5 |y - Phi x|^2 + lambda psi(x)`.
pub fn objective(x: &Cube, y: &Measurement, mask: &Mask, rule: &DispersionRule, lambda: f64, kind: ProxKind) -> Result<f64> {
    let r = optics::apply_phi(x, mask, rule)?;
    let fit: f64 = r.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5;
    Ok(fit + if lambda > 0.0 { lambda * prior(x, kind) } else { 0.0 })
}

/// `x_k = prox_{rho lambda psi}(x_{k-1} - rho Phi^T (Phi x_{k-1} - y))`,
/// starting from the initialization split of `y`.
pub fn ista_reconstruct(y: &Measurement, mask: &Mask, rule: &DispersionRule, cfg: &IstaConfig) -> Result<IstaResult> {
    if !(cfg.rho > 0.0) || !(cfg.lambda >= 0.0) {
        return Err(Error::Usage(format!("need rho > 0 and lambda >= 0, got {cfg:?}")));
    }
    if cfg.prox == ProxKind::SoftThresholdDiff && (mask.h % 2 != 0 || mask.w % 2 != 0) {
        return Err(Error::Usage("difference prior needs even height and width".into()));
    }
    let norm = power_iteration_norm(mask, rule, 1000)?;
    let status = if cfg.rho * norm.value > 1.0 + 1e-12 { IstaStatus::StepTooLarge } else { IstaStatus::Ok };
    let mut x = optics::init_split(y, rule)?;
    if (x.h, x.w) != (mask.h, mask.w) {
        return Err(Error::shape("ista", format!("measurement implies {}x{}, mask is {}x{}", x.h, x.w, mask.h, mask.w)));
    }
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(objective(&x, y, mask, rule, cfg.lambda, cfg.prox)?);
    for _ in 0..cfg.iterations {
        let mut resid = optics::apply_phi(&x, mask, rule)?;
        resid.data.iter_mut().zip(&y.data).for_each(|(r, yv)| *r -= yv);
        let g = optics::adjoint(&resid, mask, rule)?;
        x.data.iter_mut().zip(&g.data).for_each(|(xv, gv)| *xv -= cfg.rho * gv);
        if cfg.lambda > 0.0 {
            prox(&mut x, cfg.rho * cfg.lambda, cfg.prox);
        }
        trace.push(objective(&x, y, mask, rule, cfg.lambda, cfg.prox)?);
    }
    Ok(IstaResult { x, objective: trace, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_threshold_cases() {
        let out = soft_threshold(&[0.5, -0.5, 0.1, -0.2, 0.0], 0.2).unwrap();
        let want = [0.3, -0.3, 0.0, 0.0, 0.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(soft_threshold(&[1.5, -2.0], 0.0).unwrap(), vec![1.5, -2.0]);
        assert!(soft_threshold(&[1.0], -0.1).is_err());
    }

    #[test]
    fn soft_threshold_minimizes_by_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v: f64 = rng.random_range(-2.0..2.0);
            let tau: f64 = rng.random_range(0.0..1.0);
            let f = |z: f64| 0.5 * (z - v) * (z - v) + tau * z.abs();
            let z_star = soft_threshold(&[v], tau).unwrap()[0];
            let best = (0..=40_000).map(|i| -3.0 + 6.0 * i as f64 / 40_000.0).map(f).fold(f64::INFINITY, f64::min);
            assert!(f(z_star) <= best + 1e-12);
        }
    }

    #[test]
    fn haar_transform_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let orig: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = orig.clone();
        haar_forward(&mut t, 4, 6);
        let n0: f64 = orig.iter().map(|v| v * v).sum();
        let n1: f64 = t.iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-12);
        haar_inverse(&mut t, 4, 6);
        for (a, b) in t.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn all_ones_single_band_norm_is_one() {
        let e = power_iteration_norm(&Mask::ones(4, 5), &DispersionRule::unit(1), 100).unwrap();
        assert!((e.value - 1.0).abs() < 1e-12);
        assert_eq!(e.status, NormStatus::Converged);
    }

    #[test]
    fn zero_mask_reports_zero_operator() {
        let e = power_iteration_norm(&Mask::zeros(3, 3), &DispersionRule::unit(2), 100).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.status, NormStatus::ZeroOperator);
    }

    #[test]
    fn norm_grows_with_band_overlap() {
        let one = power_iteration_norm(&Mask::ones(4, 8), &DispersionRule::unit(2), 500).unwrap().value;
        let two = power_iteration_norm(&Mask::ones(4, 8), &DispersionRule::unit(4), 500).unwrap().value;
        assert!(two > one);
    }

    #[test]
    fn zero_measurement_converges_to_zero() {
        let rule = DispersionRule::unit(3);
        let mask = Mask::ones(4, 4);
        let y = Measurement::new(4, 6, vec![0.0; 24]).unwrap();
        let cfg = IstaConfig { iterations: 20, lambda: 0.1, rho: 0.3, prox: ProxKind::SoftThresholdIdentity };
        let r = ista_reconstruct(&y, &mask, &rule, &cfg).unwrap();
        assert!(r.x.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oversized_step_is_flagged() {
        let rule = DispersionRule::unit(3);
        let mask = Mask::ones(4, 4);
        let y = Measurement::new(4, 6, vec![1.0; 24]).unwrap();
        let cfg = IstaConfig { iterations: 2, lambda: 0.0, rho: 1.0, prox: ProxKind::SoftThresholdIdentity };
        assert_eq!(ista_reconstruct(&y, &mask, &rule, &cfg).unwrap().status, IstaStatus::StepTooLarge);
    }

    #[test]
    fn difference_prior_objective_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rule = DispersionRule::unit(3);
        let mask = Mask::bernoulli(6, 8, 0.5, &mut rng);
        let x = Cube::new(6, 8, 3, (0..144).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let y = optics::apply_phi(&x, &mask, &rule).unwrap();
        let rho = 1.0 / power_iteration_norm(&mask, &rule, 1000).unwrap().value;
        let cfg = IstaConfig { iterations: 100, lambda: 0.05, rho, prox: ProxKind::SoftThresholdDiff };
        let r = ista_reconstruct(&y, &mask, &rule, &cfg).unwrap();
        assert_eq!(r.status, IstaStatus::Ok);
        for w in r.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }
}
