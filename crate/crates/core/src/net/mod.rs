//! The unrolled recovery network.
//!
//! Each of the `K` phases performs one learned gradient step followed by one
//! learned proximal refinement:
//!
//! ```text
//! r_k = x_{k-1} - rho_k(x_{k-1}) * H_phi_t(H_phi(x_{k-1}) - y)
//! F   = EM(Conv2([h_{k-1}, ..., h_0, Conv1(r_k)]))
//! x_k = Conv4(F) + x_0
//! h_k = Conv3(F) * sigmoid(Conv5(x_k)) + F
//! ```
//!
//! `rho_k(x) = rho_static + theta * Lambda(x)` where `Lambda` is a channel
//! attention vector in `(0, 1)^C`. `H_phi` is a learned cube-domain stack
//! followed by the physical modulate-and-disperse; `H_phi_t` is the physical
//! adjoint followed by another learned stack, so both keep their exact
//! physical shapes. `h_0` is a 3x3 convolution of `x_0`.
//!
//! Note that `x_k` is residual on the initialization `x_0`, not on `r_k`.

pub mod checkpoint;
pub mod layers;
pub mod params;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optics::{Cube, DispersionRule, Mask, Measurement};
use crate::tensor::Tensor;
use layers::{Conv, ConvInit, Enhancement, FeatureStack};
use params::{Bound, ParamId, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryConfig {
    /// Number of unrolled phases.
    pub k: usize,
    /// Hidden feature channels.
    pub n: usize,
    /// Spectral channels.
    pub c: usize,
    pub enc_levels: usize,
    pub res_blocks: usize,
    /// Weight of the dynamic step component; 0 disables it.
    pub theta: f64,
    /// Cross-phase hidden-state interaction. When off, each phase refines
    /// `Conv1(r_k)` with the encoder/decoder alone and no hidden state is kept.
    pub hfim: bool,
}

impl RecoveryConfig {
    /// Full-size configuration (28 bands, 8 phases).
    pub fn full_scale() -> Self {
        Self { k: 8, n: 32, c: 28, enc_levels: 4, res_blocks: 16, theta: 0.5, hfim: true }
    }

    /// CPU-friendly configuration for 32x32x8 cubes.
    pub fn toy() -> Self {
        Self { k: 3, n: 8, c: 8, enc_levels: 2, res_blocks: 2, theta: 0.5, hfim: true }
    }

    /// Smallest configuration used by the whole-network gradient check.
    pub fn micro() -> Self {
        Self { k: 2, n: 4, c: 2, enc_levels: 1, res_blocks: 1, theta: 0.5, hfim: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 || self.c == 0 {
            return Err(Error::Config(format!("k, n and c must be positive: {self:?}")));
        }
        if !self.theta.is_finite() {
            return Err(Error::Config("theta must be finite".into()));
        }
        Ok(())
    }

    /// Checks that an `h x w` cube fits the encoder depth.
    pub fn check_geometry(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.enc_levels;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Geometry(format!(
                "spatial extents {h}x{w} must be divisible by 2^enc_levels = {f}"
            )));
        }
        Ok(())
    }
}

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Sensing stacks start as identity maps (each phase starts as a classical
    /// gradient step) and `Conv4` starts at zero (each `x_k` starts at `x_0`).
    /// Everything else is He-initialized.
    Standard,
    /// He initialization for every convolution.
    Random,
}

/// Parameters owned by one phase.
#[derive(Clone, Debug)]
pub struct Phase {
    pub h_phi: FeatureStack,
    pub h_phi_t: FeatureStack,
    /// Static step, shape `[1, C, 1, 1]`.
    pub rho: ParamId,
    pub attn_a: Conv,
    pub attn_b: Conv,
    pub conv1: Conv,
    pub conv2: Option<Conv>,
    pub enhance: Enhancement,
    pub conv3: Option<Conv>,
    pub conv4: Conv,
    pub conv5: Option<Conv>,
}

#[derive(Clone, Debug)]
pub struct RecoveryNet {
    pub config: RecoveryConfig,
    pub params: ParamSet,
    pub init_conv: Option<Conv>,
    pub phases: Vec<Phase>,
}

/// Graph handles produced by one unrolled forward pass.
pub struct Unrolled {
    pub x0: Var,
    /// `x_1 ..= x_K`, unclamped.
    pub estimates: Vec<Var>,
    /// Hidden states `h_0 ..= h_K` (empty when the interaction module is off).
    pub hidden: Vec<Var>,
    /// Dynamic step vectors per phase, `[B, C, 1, 1]`.
    pub steps: Vec<Var>,
    /// Attention vectors `Lambda_k` per phase.
    pub attention: Vec<Var>,
    /// Pixel attention `sigmoid(Conv5(x_k))` per phase (interaction module only).
    pub pixel_attention: Vec<Var>,
}

impl Unrolled {
    pub fn last(&self) -> Var {
        *self.estimates.last().expect("at least one phase")
    }
}

impl RecoveryNet {
    pub fn new(config: RecoveryConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, seed, InitScheme::Standard)
    }

    pub fn with_init(config: RecoveryConfig, seed: u64, init: InitScheme) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        let (c, n) = (config.c, config.n);
        let identity = init == InitScheme::Standard;
        let init_conv = config
            .hfim
            .then(|| Conv::new(&mut ps, "init", "init.conv", c, n, 3, 1, ConvInit::He, &mut rng));
        let mut phases = Vec::with_capacity(config.k);
        for k in 1..=config.k {
            let pre = format!("phase{k}");
            let grp = |s: &str| format!("{pre}.{s}");
            let h_phi = FeatureStack::new(&mut ps, &grp("h_phi"), c, identity, &mut rng);
            let h_phi_t = FeatureStack::new(&mut ps, &grp("h_phi_t"), c, identity, &mut rng);
            let rho = ps.add(&grp("rho"), &grp("rho"), Tensor::ones(&[1, c, 1, 1]));
            let g_att = grp("attention");
            let attn_a = Conv::new(&mut ps, &g_att, &format!("{g_att}.a"), c, c, 1, 1, ConvInit::He, &mut rng);
            let attn_b = Conv::new(&mut ps, &g_att, &format!("{g_att}.b"), c, c, 1, 1, ConvInit::He, &mut rng);
            let conv = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin, cout, ks, init| {
                let g = grp(name);
                Conv::new(ps, &g, &g, cin, cout, ks, 1, init, rng)
            };
            let he = ConvInit::He;
            let out_init = if identity { ConvInit::Zero } else { ConvInit::He };
            let conv1 = conv(&mut ps, &mut rng, "conv1", c, n, 3, he);
            let conv2 = config.hfim.then(|| conv(&mut ps, &mut rng, "conv2", (k + 1) * n, n, 1, he));
            let enhance = Enhancement::new(&mut ps, &grp("enhance"), n, config.enc_levels, config.res_blocks, &mut rng);
            let conv3 = config.hfim.then(|| conv(&mut ps, &mut rng, "conv3", n, n, 3, he));
            let conv4 = conv(&mut ps, &mut rng, "conv4", n, c, 3, out_init);
            let conv5 = config.hfim.then(|| conv(&mut ps, &mut rng, "conv5", c, n, 3, he));
            phases.push(Phase { h_phi, h_phi_t, rho, attn_a, attn_b, conv1, conv2, enhance, conv3, conv4, conv5 });
        }
        Ok(Self { config, params: ps, init_conv, phases })
    }

    pub fn rule(&self) -> DispersionRule {
        DispersionRule::unit(self.config.c)
    }

    /// Learned stack then physical modulate + shift-sum.
    pub fn h_phi(&self, g: &mut Graph, p: &Bound, phase: &Phase, x: Var, mask: Var, rule: &DispersionRule) -> Result<Var> {
        let f = phase.h_phi.apply(g, p, x)?;
        crate::mask::compress(g, f, mask, rule)
    }

    /// Physical adjoint then learned stack.
    pub fn h_phi_t(&self, g: &mut Graph, p: &Bound, phase: &Phase, e: Var, mask: Var, rule: &DispersionRule) -> Result<Var> {
        let s = g.shape(e).to_vec();
        if s.len() != 4 || s[3] < rule.max_shift() + 1 {
            return Err(Error::shape("h_phi_t", format!("bad measurement shape {s:?}")));
        }
        let width = s[3] - rule.max_shift();
        let back = g.disperse_adjoint(e, width, rule.shifts())?;
        let back = g.mul(back, mask)?;
        phase.h_phi_t.apply(g, p, back)
    }

    /// Returns `(rho_tilde, Lambda)`, both `[B, C, 1, 1]`.
    pub fn dynamic_step(&self, g: &mut Graph, p: &Bound, phase: &Phase, x_prev: Var) -> Result<(Var, Var)> {
        let pooled = g.global_avg_pool(x_prev)?;
        let a = phase.attn_a.apply(g, p, pooled)?;
        let a = g.relu(a);
        let b = phase.attn_b.apply(g, p, a)?;
        let lambda = g.sigmoid(b);
        let scaled = g.scale(lambda, self.config.theta);
        let rho = g.add(p.var(phase.rho), scaled)?;
        Ok((rho, lambda))
    }

    /// One learned gradient step. Returns `(r_k, rho_tilde, Lambda)`.
    #[allow(clippy::too_many_arguments)]
    pub fn dgdm(
        &self,
        g: &mut Graph,
        p: &Bound,
        phase: &Phase,
        x_prev: Var,
        y: Var,
        mask: Var,
        rule: &DispersionRule,
    ) -> Result<(Var, Var, Var)> {
        let sim = self.h_phi(g, p, phase, x_prev, mask, rule)?;
        let resid = g.sub(sim, y)?;
        let grad = self.h_phi_t(g, p, phase, resid, mask, rule)?;
        let (rho, lambda) = self.dynamic_step(g, p, phase, x_prev)?;
        let step = g.mul(rho, grad)?;
        Ok((g.sub(x_prev, step)?, rho, lambda))
    }

    /// Proximal refinement. Returns `(x_k, h_k, pixel_attention)`; the
    /// hidden-state parts are `None` when the interaction module is off.
    pub fn hfim(
        &self,
        g: &mut Graph,
        p: &Bound,
        phase: &Phase,
        r: Var,
        x0: Var,
        stack: &[Var],
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        let f1 = phase.conv1.apply(g, p, r)?;
        let fused = match &phase.conv2 {
            Some(conv2) => {
                let n = self.config.n;
                let mut parts: Vec<Var> = Vec::with_capacity(stack.len() + 1);
                for &h in stack.iter().rev() {
                    if g.shape(h).get(1) != Some(&n) {
                        return Err(Error::shape("hfim", format!("hidden state {:?} must have {n} channels", g.shape(h))));
                    }
                    parts.push(h);
                }
                parts.push(f1);
                let cat = g.concat(&parts)?;
                conv2.apply(g, p, cat)?
            }
            None => f1,
        };
        let f_em = phase.enhance.apply(g, p, fused)?;
        let out = phase.conv4.apply(g, p, f_em)?;
        let x_k = g.add(out, x0)?;
        match (&phase.conv3, &phase.conv5) {
            (Some(conv3), Some(conv5)) => {
                let a = conv3.apply(g, p, f_em)?;
                let gate = conv5.apply(g, p, x_k)?;
                let gate = g.sigmoid(gate);
                let inter = g.mul(a, gate)?;
                let h_k = g.add(inter, f_em)?;
                Ok((x_k, Some(h_k), Some(gate)))
            }
            _ => Ok((x_k, None, None)),
        }
    }

    /// Unrolls all phases on `g` for measurement `y` (`[B,1,H,W+C-1]`) and
    /// mask (`[1,1,H,W]`).
    pub fn unroll(&self, g: &mut Graph, p: &Bound, y: Var, mask: Var) -> Result<Unrolled> {
        let rule = self.rule();
        let ys = g.shape(y).to_vec();
        let ms = g.shape(mask).to_vec();
        if ys.len() != 4 || ms.len() != 4 || ys[1] != 1 || ys[2] != ms[2] || ys[3] != rule.measurement_width(ms[3]) {
            return Err(Error::shape(
                "reconstruct",
                format!("measurement {ys:?} incompatible with mask {ms:?} and {} bands", self.config.c),
            ));
        }
        self.config.check_geometry(ms[2], ms[3])?;
        let x0 = g.disperse_adjoint(y, ms[3], rule.shifts())?;
        let mut hidden = Vec::new();
        if let Some(conv) = &self.init_conv {
            hidden.push(conv.apply(g, p, x0)?);
        }
        let mut out = Unrolled {
            x0,
            estimates: Vec::with_capacity(self.config.k),
            hidden,
            steps: vec![],
            attention: vec![],
            pixel_attention: vec![],
        };
        let mut x = x0;
        for phase in &self.phases {
            let (r, rho, lambda) = self.dgdm(g, p, phase, x, y, mask, &rule)?;
            let (x_k, h_k, gate) = self.hfim(g, p, phase, r, x0, &out.hidden)?;
            out.estimates.push(x_k);
            out.steps.push(rho);
            out.attention.push(lambda);
            out.hidden.extend(h_k);
            out.pixel_attention.extend(gate);
            x = x_k;
        }
        Ok(out)
    }

    /// Evaluation-mode reconstruction, clamped to `[0, 1]`.
    pub fn reconstruct(&self, y: &Measurement, mask: &Mask) -> Result<Cube> {
        Ok(self.reconstruct_raw(y, mask)?.clamped())
    }

    /// Final estimate without clamping.
    pub fn reconstruct_raw(&self, y: &Measurement, mask: &Mask) -> Result<Cube> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let yv = g.constant(y.to_tensor());
        let mv = g.constant(mask.to_tensor());
        let u = self.unroll(&mut g, &p, yv, mv)?;
        Cube::from_tensor(g.value(u.last()))
    }
}
