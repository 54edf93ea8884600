//! Learnable binary coded apertures.
//!
//! A [`MaskPair`] keeps a continuous latent mask and its thresholded binary
//! mask in lockstep. During training the threshold is bypassed in the
//! backward pass (straight-through), so the latent receives exactly the
//! gradient that lands on the binary mask.
//!
//! Latent values are never clipped; with long training they can drift far
//! from the threshold, which only slows further flips.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optics::{DispersionRule, Mask};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

/// 1 when `z >= threshold`, else 0.
pub fn binary_sign(z: f64, threshold: f64) -> f64 {
    if z >= threshold {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    latent: Tensor,
    binary: Mask,
    /// Gaussian mean of the latent initialization and binarization threshold.
    pub mu_b: f64,
    pub sigma_b: f64,
}

pub const DEFAULT_MU_B: f64 = 0.0;
pub const DEFAULT_SIGMA_B: f64 = 0.1;

impl MaskPair {
    /// Latent drawn i.i.d. from `N(mu_b, sigma_b^2)`.
    pub fn init_latent(h: usize, w: usize, mu_b: f64, sigma_b: f64, seed: u64) -> Result<Self> {
        if !(sigma_b > 0.0) {
            return Err(Error::Usage(format!("sigma_b must be positive, got {sigma_b}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = Tensor::randn(&[h, w], mu_b, sigma_b, &mut rng);
        Ok(Self::from_latent(latent, mu_b, sigma_b))
    }

    pub fn from_latent(latent: Tensor, mu_b: f64, sigma_b: f64) -> Self {
        let (h, w) = (latent.shape()[0], latent.shape()[1]);
        let data = latent.data().iter().map(|&z| binary_sign(z, mu_b)).collect();
        Self { latent, binary: Mask { h, w, data }, mu_b, sigma_b }
    }

    pub fn latent(&self) -> &Tensor {
        &self.latent
    }

    pub fn binary(&self) -> &Mask {
        &self.binary
    }

    /// Replaces the latent and re-derives the binary mask.
    pub fn set_latent(&mut self, latent: Tensor) {
        *self = Self::from_latent(latent, self.mu_b, self.sigma_b);
    }

    pub fn latent_mut_apply(&mut self, f: impl FnOnce(&mut [f64])) {
        f(self.latent.data_mut());
        let mu = self.mu_b;
        self.binary.data = self.latent.data().iter().map(|&z| binary_sign(z, mu)).collect();
    }

    /// Puts the latent on the graph (tracked when `learn` is set) and returns
    /// `(latent, binary)` with the binary mask shaped `[1,1,H,W]`.
    pub fn bind(&self, g: &mut Graph, learn: bool) -> Result<(Var, Var)> {
        let (h, w) = (self.binary.h, self.binary.w);
        let latent = g.leaf(self.latent.clone().reshape(&[1, 1, h, w])?.with_requires_grad(learn));
        let bin = g.binarize_ste(latent, self.mu_b);
        Ok((latent, bin))
    }
}

/// Differentiable forward model on the graph: modulate a `[B,C,H,W]` cube by a
/// `[1,1,H,W]` mask, then shift-and-sum.
pub fn compress(g: &mut Graph, cube: Var, mask: Var, rule: &DispersionRule) -> Result<Var> {
    let modulated = g.mul(cube, mask)?;
    g.disperse_sum(modulated, rule.shifts())
}

/// Writes the `MASK1` text format: header line, `H W` line, then one row of
/// space-separated 0/1 per line.
pub fn mask_to_text(mask: &Mask) -> String {
    let mut s = String::with_capacity(mask.h * (2 * mask.w + 1) + 16);
    let _ = writeln!(s, "MASK1");
    let _ = writeln!(s, "{} {}", mask.h, mask.w);
    for row in mask.data.chunks(mask.w) {
        let line: Vec<&str> = row.iter().map(|&v| if v == 1.0 { "1" } else { "0" }).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn mask_from_text(text: &str) -> Result<Mask> {
    let mut lines = text.lines();
    match lines.next() {
        Some("MASK1") => {}
        other => return Err(Error::format("magic", format!("expected MASK1, found {other:?}"))),
    }
    let dims = lines.next().ok_or_else(|| Error::format("dims", "missing H W line"))?;
    let dims: Vec<usize> = dims
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::format("dims", format!("bad integer {t:?}"))))
        .collect::<Result<_>>()?;
    let [h, w] = dims[..] else {
        return Err(Error::format("dims", "expected exactly H and W"));
    };
    if h == 0 || w == 0 {
        return Err(Error::format("dims", "zero extent"));
    }
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let line = lines.next().ok_or_else(|| Error::format("rows", format!("missing row {r}")))?;
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(match tok {
                "0" => 0.0,
                "1" => 1.0,
                _ => return Err(Error::format("rows", format!("row {r}: bad entry {tok:?}"))),
            });
        }
        if data.len() - before != w {
            return Err(Error::format("rows", format!("row {r} has {} entries, expected {w}", data.len() - before)));
        }
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::format("rows", "trailing content after last row"));
    }
    Mask::new(h, w, data)
}
