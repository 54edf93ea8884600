//! The coded-aperture dispersive sensing model.
//!
//! A cube is modulated band-by-band by a binary mask, each band is shifted
//! along the width axis by its dispersion offset, and the shifted bands are
//! summed on the detector. Everything here is linear in the cube, so the
//! adjoint, the dense sensing matrix, and the window-splitting initializer
//! are all available as plain functions.
//!
//! The per-band shift is not given explicitly by the optics; a unit shift
//! per band is the only integer rule that yields the `W + C - 1` detector
//! width, and [`DispersionRule::unit`] is what the rest of the crate uses.

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `H x W x C` spectral cube stored band-major (band slowest, then rows).
#[derive(Clone, Debug, PartialEq)]
pub struct Cube {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

/// `H x (W + C - 1)` detector image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub h: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Binary coded aperture, row-major `H x W` of exact 0.0 / 1.0 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// Integer column offset per band.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DispersionRule {
    shifts: Vec<usize>,
}

impl DispersionRule {
    /// `d_i = i` for bands `0..c`.
    pub fn unit(c: usize) -> Self {
        Self { shifts: (0..c).collect() }
    }

    pub fn new(shifts: Vec<usize>) -> Result<Self> {
        if shifts.is_empty() || shifts[0] != 0 || shifts.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Usage(format!("dispersion shifts must start at 0 and be nondecreasing: {shifts:?}")));
        }
        Ok(Self { shifts })
    }

    pub fn shifts(&self) -> &[usize] {
        &self.shifts
    }

    pub fn channels(&self) -> usize {
        self.shifts.len()
    }

    pub fn max_shift(&self) -> usize {
        *self.shifts.last().unwrap_or(&0)
    }

    pub fn measurement_width(&self, w: usize) -> usize {
        w + self.max_shift()
    }
}

impl Cube {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 || data.len() != h * w * c {
            return Err(Error::shape("cube", format!("{h}x{w}x{c} with {} values", data.len())));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn band(&self, i: usize) -> &[f64] {
        &self.data[i * self.h * self.w..(i + 1) * self.h * self.w]
    }

    /// `[1, C, H, W]` view for the network.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.c, self.h, self.w], self.data.clone()).expect("cube extents are positive")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[1, c, h, w] => Cube::new(h, w, c, t.data().to_vec()),
            s => Err(Error::shape("cube", format!("expected [1,C,H,W], got {s:?}"))),
        }
    }

    pub fn clamped(&self) -> Self {
        Self { data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..self.clone() }
    }

    pub fn dot(&self, other: &Cube) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

impl Measurement {
    pub fn new(h: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || width == 0 || data.len() != h * width {
            return Err(Error::shape("measurement", format!("{h}x{width} with {} values", data.len())));
        }
        Ok(Self { h, width, data })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.h, self.width], self.data.clone()).expect("positive extents")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[1, 1, h, w] => Measurement::new(h, w, t.data().to_vec()),
            s => Err(Error::shape("measurement", format!("expected [1,1,H,W'], got {s:?}"))),
        }
    }

    pub fn dot(&self, other: &Measurement) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::shape("mask", format!("{h}x{w} with {} values", data.len())));
        }
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Usage("mask entries must be exactly 0 or 1".into()));
        }
        Ok(Self { h, w, data })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![1.0; h * w] }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w] }
    }

    /// Independent Bernoulli(p) entries.
    pub fn bernoulli<R: Rng + ?Sized>(h: usize, w: usize, p: f64, rng: &mut R) -> Self {
        let data = (0..h * w).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect();
        Self { h, w, data }
    }

    /// `[1, 1, H, W]` view for broadcasting over cube tensors.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.h, self.w], self.data.clone()).expect("positive extents")
    }

    pub fn fill_fraction(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

fn check_mask(op: &'static str, cube_h: usize, cube_w: usize, mask: &Mask) -> Result<()> {
    if mask.h != cube_h || mask.w != cube_w {
        return Err(Error::shape(op, format!("mask {}x{} vs cube {cube_h}x{cube_w}", mask.h, mask.w)));
    }
    Ok(())
}

fn check_rule(op: &'static str, c: usize, rule: &DispersionRule) -> Result<()> {
    if rule.channels() != c {
        return Err(Error::shape(op, format!("rule has {} bands, cube has {c}", rule.channels())));
    }
    Ok(())
}

/// Hadamard product of every band with the mask.
pub fn modulate(cube: &Cube, mask: &Mask) -> Result<Cube> {
    check_mask("modulate", cube.h, cube.w, mask)?;
    let mut out = cube.clone();
    for band in out.data.chunks_mut(cube.h * cube.w) {
        band.iter_mut().zip(&mask.data).for_each(|(v, m)| *v *= m);
    }
    Ok(out)
}

/// Shift each band by its offset and sum on the detector.
pub fn disperse_sum(cube: &Cube, rule: &DispersionRule) -> Result<Measurement> {
    check_rule("disperse_sum", cube.c, rule)?;
    let y = kernels::disperse_sum(&cube.data, 1, cube.c, cube.h, cube.w, rule.shifts());
    Measurement::new(cube.h, rule.measurement_width(cube.w), y)
}

/// `y = Phi x + n` with i.i.d. Gaussian noise of standard deviation `noise_sigma`.
pub fn forward<R: Rng + ?Sized>(
    cube: &Cube,
    mask: &Mask,
    rule: &DispersionRule,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Measurement> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::Usage(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut y = disperse_sum(&modulate(cube, mask)?, rule)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        y.data.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Ok(y)
}

/// Noise-free `Phi x`.
pub fn apply_phi(cube: &Cube, mask: &Mask, rule: &DispersionRule) -> Result<Measurement> {
    disperse_sum(&modulate(cube, mask)?, rule)
}

fn check_meas(op: &'static str, meas: &Measurement, w: usize, rule: &DispersionRule) -> Result<()> {
    if meas.width != rule.measurement_width(w) {
        return Err(Error::shape(
            op,
            format!("measurement width {} != W + C - 1 = {}", meas.width, rule.measurement_width(w)),
        ));
    }
    Ok(())
}

/// Exact adjoint of the noise-free forward model: band `i` reads columns
/// `[d_i, d_i + W)` of the measurement and is multiplied by the mask.
pub fn adjoint(meas: &Measurement, mask: &Mask, rule: &DispersionRule) -> Result<Cube> {
    if meas.h != mask.h {
        return Err(Error::shape("adjoint", format!("measurement height {} vs mask {}", meas.h, mask.h)));
    }
    check_meas("adjoint", meas, mask.w, rule)?;
    let split = init_split(meas, rule)?;
    modulate(&split, mask)
}

/// Initialization split: band `i` is the window of width `W` starting at
/// column `d_i` of the measurement.
pub fn init_split(meas: &Measurement, rule: &DispersionRule) -> Result<Cube> {
    let c = rule.channels();
    let w = meas
        .width
        .checked_sub(rule.max_shift())
        .filter(|&w| w > 0)
        .ok_or_else(|| Error::shape("init_split", format!("width {} too small for {c} bands", meas.width)))?;
    let x = kernels::disperse_adjoint(&meas.data, 1, c, meas.h, w, rule.shifts());
    Cube::new(meas.h, w, c, x)
}

/// Row-major dense sensing matrix, `H(W+C-1)` rows by `HWC` columns, with the
/// cube vectorized band-major and the measurement row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.data.chunks(self.cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn matvec_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &yv) in self.data.chunks(self.cols).zip(y) {
            out.iter_mut().zip(row).for_each(|(o, a)| *o += a * yv);
        }
        out
    }
}

pub const DENSE_PHI_LIMIT: usize = 65536;

/// Materializes the sensing matrix entry by entry from the placement rule:
/// the column for (band `i`, pixel `(m, n)`) holds `M(m, n)` at detector
/// row `(m, n + d_i)`.
pub fn dense_phi(mask: &Mask, rule: &DispersionRule, h: usize, w: usize, c: usize) -> Result<DenseMatrix> {
    if h * w * c > DENSE_PHI_LIMIT {
        return Err(Error::Usage(format!("dense sensing matrix too large: HWC = {} > {DENSE_PHI_LIMIT}", h * w * c)));
    }
    check_mask("dense_phi", h, w, mask)?;
    check_rule("dense_phi", c, rule)?;
    let wm = rule.measurement_width(w);
    let (rows, cols) = (h * wm, h * w * c);
    let mut data = vec![0.0; rows * cols];
    for (i, &d) in rule.shifts().iter().enumerate() {
        for m in 0..h {
            for n in 0..w {
                let col = (i * h + m) * w + n;
                let row = m * wm + n + d;
                data[row * cols + col] = mask.data[m * w + n];
            }
        }
    }
    Ok(DenseMatrix { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_band_toy_instance() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let cube = Cube::new(1, 2, 2, vec![a, b, c, d]).unwrap();
        let rule = DispersionRule::unit(2);
        let y = disperse_sum(&cube, &rule).unwrap();
        assert_eq!(y.data, vec![a, b + c, d]);
        let phi = dense_phi(&Mask::ones(1, 2), &rule, 1, 2, 2).unwrap();
        assert_eq!(phi.matvec(&cube.data), y.data);
        let x0 = init_split(&y, &rule).unwrap();
        assert_eq!(x0.data, vec![a, b + c, b + c, d]);
    }

    #[test]
    fn single_band_is_identity_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cube = Cube::new(3, 4, 1, (0..12).map(|v| v as f64 / 12.0).collect()).unwrap();
        let rule = DispersionRule::unit(1);
        let y = forward(&cube, &Mask::ones(3, 4), &rule, 0.0, &mut rng).unwrap();
        assert_eq!(y.data, cube.data);
        assert_eq!(init_split(&y, &rule).unwrap(), cube);
    }

    #[test]
    fn modulate_hadamard() {
        let cube = Cube::new(1, 2, 1, vec![0.3, 0.7]).unwrap();
        let m = Mask::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(modulate(&cube, &m).unwrap().data, vec![0.3, 0.0]);
        assert_eq!(modulate(&cube, &Mask::zeros(1, 2)).unwrap().data, vec![0.0, 0.0]);
        assert!(modulate(&cube, &Mask::ones(2, 2)).is_err());
    }

    #[test]
    fn dense_phi_hand_enumeration_and_structure() {
        let rule = DispersionRule::unit(2);
        let phi = dense_phi(&Mask::ones(1, 1), &rule, 1, 1, 2).unwrap();
        assert_eq!((phi.rows, phi.cols), (2, 2));
        assert_eq!(phi.data, vec![1.0, 0.0, 0.0, 1.0]);
        let zero = dense_phi(&Mask::zeros(2, 3), &DispersionRule::unit(3), 2, 3, 3).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mask::bernoulli(3, 4, 0.5, &mut rng);
        let phi = dense_phi(&m, &DispersionRule::unit(3), 3, 4, 3).unwrap();
        for col in 0..phi.cols {
            let nnz = (0..phi.rows).filter(|&r| phi.get(r, col) != 0.0).count();
            assert!(nnz <= 1);
        }
    }

    #[test]
    fn dense_phi_size_guard() {
        let m = Mask::ones(64, 64);
        assert!(matches!(dense_phi(&m, &DispersionRule::unit(17), 64, 64, 17), Err(Error::Usage(_))));
    }

    #[test]
    fn negative_noise_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cube = Cube::zeros(2, 2, 2);
        let r = forward(&cube, &Mask::ones(2, 2), &DispersionRule::unit(2), -0.1, &mut rng);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn noise_mean_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = 0.1;
        // 100 x (1000 + 1 - 1) = 1e5 detector entries
        let cube = Cube::zeros(100, 1000, 1);
        let y = forward(&cube, &Mask::ones(100, 1000), &DispersionRule::unit(1), sigma, &mut rng).unwrap();
        assert_eq!(y.data.len(), 100_000);
        let mean = y.data.iter().sum::<f64>() / y.data.len() as f64;
        assert!(mean.abs() <= 5.0 * sigma * 10f64.powf(-2.5), "mean {mean}");
    }

    #[test]
    fn init_split_rejects_bad_width() {
        let y = Measurement::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(init_split(&y, &DispersionRule::unit(3)).is_err());
        let m = Measurement::new(2, 5, vec![0.0; 10]).unwrap();
        assert!(adjoint(&m, &Mask::ones(2, 4), &DispersionRule::unit(3)).is_err());
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let rule = DispersionRule::unit(3);
        let y = disperse_sum(&Cube::zeros(2, 4, 3), &rule).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
        let x = adjoint(&Measurement::new(2, 6, vec![0.0; 12]).unwrap(), &Mask::ones(2, 4), &rule).unwrap();
        assert!(x.data.iter().all(|&v| v == 0.0));
    }
}
