//! Mask-comparison and ablation drivers.

use super::config::{ExperimentConfig, FixedMask, MaskMode};
use super::trainer::{train, TrainOptions};
use crate::error::Result;
use crate::optics::Cube;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskVariant {
    /// All-ones aperture.
    Uniform,
    /// Fixed Bernoulli(0.5) aperture.
    Random,
    /// Jointly optimized binary aperture.
    Learned,
}

impl MaskVariant {
    pub const ALL: [MaskVariant; 3] = [MaskVariant::Uniform, MaskVariant::Random, MaskVariant::Learned];

    pub fn label(self) -> &'static str {
        match self {
            MaskVariant::Uniform => "uniform",
            MaskVariant::Random => "random",
            MaskVariant::Learned => "learned",
        }
    }

    pub fn apply(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            MaskVariant::Uniform => {
                c.train.mask_mode = MaskMode::Fixed;
                c.train.fixed_mask = FixedMask::Ones;
            }
            MaskVariant::Random => {
                c.train.mask_mode = MaskMode::Fixed;
                c.train.fixed_mask = FixedMask::Random;
            }
            MaskVariant::Learned => c.train.mask_mode = MaskMode::Learned,
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoMaskOptimization,
    NoInteraction,
    NoResidualModule,
    NoDynamicStep,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoMaskOptimization,
        Ablation::NoInteraction,
        Ablation::NoResidualModule,
        Ablation::NoDynamicStep,
        Ablation::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMaskOptimization => "no-mask-opt",
            Ablation::NoInteraction => "no-hfim",
            Ablation::NoResidualModule => "no-res-module",
            Ablation::NoDynamicStep => "no-dyn-step",
        }
    }

    pub fn apply(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoMaskOptimization => c.train.mask_mode = MaskMode::Fixed,
            Ablation::NoInteraction => c.recovery.hfim = false,
            Ablation::NoResidualModule => c.recovery.res_blocks = 0,
            Ablation::NoDynamicStep => c.recovery.theta = 0.0,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub label: String,
    /// Held-out (psnr, ssim) for each seed.
    pub runs: Vec<(u64, f64, f64)>,
}

impl StudyRow {
    pub fn mean_psnr(&self) -> f64 {
        self.runs.iter().map(|r| r.1).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.runs.iter().map(|r| r.2).sum::<f64>() / self.runs.len() as f64
    }
}

fn run_variant(data: &[Cube], cfg: &ExperimentConfig, label: &str, seeds: &[u64]) -> Result<StudyRow> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = cfg.clone();
        c.train.seed = seed;
        let out = train(data, &c, &TrainOptions::default())?;
        let (p, s) = out.final_eval(data)?;
        runs.push((seed, p, s));
    }
    Ok(StudyRow { label: label.to_string(), runs })
}

/// Trains once per mask variant and seed and reports held-out metrics.
pub fn run_mask_study(data: &[Cube], cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<StudyRow>> {
    MaskVariant::ALL.iter().map(|v| run_variant(data, &v.apply(cfg), v.label(), seeds)).collect()
}

pub fn run_ablation(data: &[Cube], cfg: &ExperimentConfig, variants: &[Ablation], seeds: &[u64]) -> Result<Vec<StudyRow>> {
    variants.iter().map(|v| run_variant(data, &v.apply(cfg), v.label(), seeds)).collect()
}

pub fn format_table(rows: &[StudyRow]) -> String {
    let mut s = String::from("variant          psnr_db   ssim\n");
    for r in rows {
        let _ = writeln!(s, "{:<16} {:>8.3} {:>6.4}", r.label, r.mean_psnr(), r.mean_ssim());
    }
    s
}
