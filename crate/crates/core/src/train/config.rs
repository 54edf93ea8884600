//! Flat `key=value` experiment configuration.
//!
//! Keys are the field names of [`TrainConfig`] and [`RecoveryConfig`]; `#`
//! starts a comment. The ablation switches `mo`, `hfim`, `rm` and `dyrho`
//! are accepted as booleans: `mo=false` is `mask_mode=fixed`, `rm=false` sets
//! `res_blocks=0`, `dyrho=false` sets `theta=0`.

use crate::error::{Error, Result};
use crate::net::RecoveryConfig;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Latent mask optimized jointly with the network.
    Learned,
    /// Mask held constant (the `-base` variant).
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedMask {
    /// Binarization of the seeded Gaussian latent, i.e. Bernoulli(0.5) at `mu_b = 0`.
    Random,
    /// All ones.
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub beta_loss: f64,
    /// Apply `beta_loss` to both intermediate terms (otherwise only to `x_{K-1}`).
    pub beta_applies_to_both: bool,
    pub batch: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub mask_mode: MaskMode,
    pub fixed_mask: FixedMask,
    pub mu_b: f64,
    pub sigma_b: f64,
    pub val_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: 1e-4,
            decay: 0.9,
            decay_every: 10,
            beta_loss: 0.5,
            beta_applies_to_both: true,
            batch: 4,
            seed: 0,
            noise_sigma: 0.0,
            mask_mode: MaskMode::Learned,
            fixed_mask: FixedMask::Random,
            mu_b: crate::mask::DEFAULT_MU_B,
            sigma_b: crate::mask::DEFAULT_SIGMA_B,
            val_fraction: 0.2,
            grad_clip: 0.0,
            eval_every: 1,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch == 0 || self.decay_every == 0 || self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("batch, decay_every, eval_every and checkpoint_every must be positive");
        }
        if !(self.lr0 > 0.0) || !(self.decay > 0.0) {
            return bad("lr0 and decay must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !(self.sigma_b > 0.0) || !(self.grad_clip >= 0.0) {
            return bad("noise_sigma and grad_clip must be >= 0 and sigma_b > 0");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Training plus architecture settings, as read from one config file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub recovery: RecoveryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), recovery: RecoveryConfig::toy() }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl ExperimentConfig {
    /// Parses `key=value` lines on top of the defaults. All unknown keys are
    /// reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut unknown = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1)))?;
            if !cfg.set(key, value)? {
                unknown.push(key.to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        cfg.train.validate()?;
        cfg.recovery.validate()?;
        Ok(cfg)
    }

    /// Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let (t, r) = (&mut self.train, &mut self.recovery);
        match key {
            "epochs" => t.epochs = parse_num(key, v)?,
            "lr0" => t.lr0 = parse_num(key, v)?,
            "decay" => t.decay = parse_num(key, v)?,
            "decay_every" => t.decay_every = parse_num(key, v)?,
            "beta_loss" => t.beta_loss = parse_num(key, v)?,
            "beta_applies_to_both" => t.beta_applies_to_both = parse_bool(key, v)?,
            "batch" => t.batch = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "noise_sigma" => t.noise_sigma = parse_num(key, v)?,
            "mask_mode" => {
                t.mask_mode = match v {
                    "learned" => MaskMode::Learned,
                    "fixed" => MaskMode::Fixed,
                    _ => return Err(Error::Config(format!("mask_mode: expected learned|fixed, got {v:?}"))),
                }
            }
            "fixed_mask" => {
                t.fixed_mask = match v {
                    "random" => FixedMask::Random,
                    "ones" => FixedMask::Ones,
                    _ => return Err(Error::Config(format!("fixed_mask: expected random|ones, got {v:?}"))),
                }
            }
            "mu_b" => t.mu_b = parse_num(key, v)?,
            "sigma_b" => t.sigma_b = parse_num(key, v)?,
            "val_fraction" => t.val_fraction = parse_num(key, v)?,
            "grad_clip" => t.grad_clip = parse_num(key, v)?,
            "eval_every" => t.eval_every = parse_num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "mo" => t.mask_mode = if parse_bool(key, v)? { MaskMode::Learned } else { MaskMode::Fixed },
            "k" => r.k = parse_num(key, v)?,
            "n" => r.n = parse_num(key, v)?,
            "c" => r.c = parse_num(key, v)?,
            "enc_levels" => r.enc_levels = parse_num(key, v)?,
            "res_blocks" => r.res_blocks = parse_num(key, v)?,
            "theta" => r.theta = parse_num(key, v)?,
            "hfim" => r.hfim = parse_bool(key, v)?,
            "rm" => {
                if !parse_bool(key, v)? {
                    r.res_blocks = 0
                }
            }
            "dyrho" => {
                if !parse_bool(key, v)? {
                    r.theta = 0.0
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Serializes every field so that `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let (t, r) = (&self.train, &self.recovery);
        let mut s = String::new();
        let mode = match t.mask_mode {
            MaskMode::Learned => "learned",
            MaskMode::Fixed => "fixed",
        };
        let fixed = match t.fixed_mask {
            FixedMask::Random => "random",
            FixedMask::Ones => "ones",
        };
        let _ = write!(
            s,
            "epochs={}\nlr0={}\ndecay={}\ndecay_every={}\nbeta_loss={}\nbeta_applies_to_both={}\nbatch={}\nseed={}\n\
             noise_sigma={}\nmask_mode={mode}\nfixed_mask={fixed}\nmu_b={}\nsigma_b={}\nval_fraction={}\ngrad_clip={}\n\
             eval_every={}\ncheckpoint_every={}\nk={}\nn={}\nc={}\nenc_levels={}\nres_blocks={}\ntheta={}\nhfim={}\n",
            t.epochs,
            t.lr0,
            t.decay,
            t.decay_every,
            t.beta_loss,
            t.beta_applies_to_both,
            t.batch,
            t.seed,
            t.noise_sigma,
            t.mu_b,
            t.sigma_b,
            t.val_fraction,
            t.grad_clip,
            t.eval_every,
            t.checkpoint_every,
            r.k,
            r.n,
            r.c,
            r.enc_levels,
            r.res_blocks,
            r.theta,
            r.hfim
        );
        s
    }
}
