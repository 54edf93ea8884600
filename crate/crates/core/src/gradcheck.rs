//! Central finite-difference checks of the autodiff engine.
//!
//! Errors are norm-based: `||a - n|| / max(||a||, ||n||)` over the checked
//! coordinates, where `a` is the autodiff gradient and `n` the numerical one.
//! Two gradients that are both below `1e-12` in norm count as agreeing.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::mask::{compress, MaskPair};
use crate::net::{InitScheme, RecoveryConfig, RecoveryNet};
use crate::tensor::Tensor;
use crate::train::{loss_on_graph, LossWeights};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const NET_TOLERANCE: f64 = 1e-3;
/// Name of the pseudo-group holding the mask gradient.
pub const MASK_GROUP: &str = "mask";

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub trials: usize,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub lines: Vec<CheckLine>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(CheckLine::passed)
    }

    pub fn worst(&self) -> f64 {
        self.lines.iter().map(|l| l.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.lines.iter().filter(|l| !l.passed()).map(|l| l.name.as_str()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let verdict = if l.passed() { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{verdict} {:<28} rel_err={:.3e} tol={:.0e} n={}", l.name, l.rel_error, l.tolerance, l.trials);
        }
        let _ = writeln!(s, "{} worst={:.3e}", if self.passed() { "ALL PASS" } else { "FAILED" }, self.worst());
        s
    }
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Value of `sum(weights * build(inputs))`.
fn projected(inputs: &[Tensor], weights: &Tensor, build: &Build, track: bool) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(track))).collect();
    let out = build(&mut g, &vars)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let l = g.sum(prod);
    Ok((g, vars, l))
}

/// Relative error of one randomized instance of an op.
fn check_instance<R: Rng + ?Sized>(inputs: Vec<Tensor>, build: &Build, rng: &mut R) -> Result<f64> {
    let mut g0 = Graph::new();
    let v0: Vec<Var> = inputs.iter().map(|t| g0.leaf(t.clone())).collect();
    let out0 = build(&mut g0, &v0)?;
    let weights = Tensor::rand_uniform(g0.shape(out0), -1.0, 1.0, rng);
    let (mut g, vars, l) = projected(&inputs, &weights, build, true)?;
    g.backward(l)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        let grad = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        analytic.extend_from_slice(&grad);
        for j in 0..inputs[k].len() {
            let f = |delta: f64| -> Result<f64> {
                let mut moved = inputs.clone();
                moved[k].data_mut()[j] += delta;
                let (gm, _, lm) = projected(&moved, &weights, build, false)?;
                Ok(gm.value(lm).data()[0])
            };
            numeric.push((f(FD_STEP)? - f(-FD_STEP)?) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 0.0, 1.0, rng)
}

/// Normal entries pushed at least `gap` away from zero, for kinked ops.
fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], gap: f64, rng: &mut R) -> Tensor {
    randn(shape, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

struct OpCase {
    name: &'static str,
    make: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: Box<Build>,
}

fn op_cases() -> Vec<OpCase> {
    let shifts = [0usize, 1, 2];
    vec![
        OpCase {
            name: "add",
            make: |r| vec![randn(&[2, 3, 4, 4], r), randn(&[1, 3, 1, 1], r)],
            build: Box::new(|g, v| g.add(v[0], v[1])),
        },
        OpCase {
            name: "sub",
            make: |r| vec![randn(&[2, 3, 4, 4], r), randn(&[2, 1, 4, 4], r)],
            build: Box::new(|g, v| g.sub(v[0], v[1])),
        },
        OpCase {
            name: "mul",
            make: |r| vec![randn(&[2, 3, 4, 4], r), randn(&[1, 1, 4, 4], r)],
            build: Box::new(|g, v| g.mul(v[0], v[1])),
        },
        OpCase {
            name: "scale",
            make: |r| vec![randn(&[2, 3, 3, 3], r)],
            build: Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
        },
        OpCase {
            name: "relu",
            make: |r| vec![away_from_zero(&[2, 3, 4, 4], 1e-3, r)],
            build: Box::new(|g, v| Ok(g.relu(v[0]))),
        },
        OpCase {
            name: "sigmoid",
            make: |r| vec![randn(&[2, 3, 4, 4], r).map(|x| 3.0 * x)],
            build: Box::new(|g, v| Ok(g.sigmoid(v[0]))),
        },
        OpCase { name: "sum", make: |r| vec![randn(&[2, 3, 4, 4], r)], build: Box::new(|g, v| Ok(g.sum(v[0]))) },
        OpCase {
            name: "squared_distance",
            make: |r| vec![randn(&[2, 3, 4, 4], r), randn(&[2, 3, 4, 4], r)],
            build: Box::new(|g, v| g.squared_distance(v[0], v[1])),
        },
        OpCase {
            name: "conv2d_3x3",
            make: |r| vec![randn(&[2, 3, 5, 6], r), randn(&[4, 3, 3, 3], r), randn(&[4], r)],
            build: Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        },
        OpCase {
            name: "conv2d_stride2",
            make: |r| vec![randn(&[1, 2, 6, 6], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)],
            build: Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        },
        OpCase {
            name: "conv2d_1x1",
            make: |r| vec![randn(&[2, 5, 3, 3], r), randn(&[2, 5, 1, 1], r)],
            build: Box::new(|g, v| g.conv2d(v[0], v[1], None, 1, 0)),
        },
        OpCase {
            name: "global_avg_pool",
            make: |r| vec![randn(&[2, 3, 4, 5], r)],
            build: Box::new(|g, v| g.global_avg_pool(v[0])),
        },
        OpCase {
            name: "upsample2x",
            make: |r| vec![randn(&[2, 3, 3, 2], r)],
            build: Box::new(|g, v| g.upsample2x(v[0])),
        },
        OpCase {
            name: "concat",
            make: |r| vec![randn(&[2, 1, 3, 3], r), randn(&[2, 3, 3, 3], r), randn(&[2, 2, 3, 3], r)],
            build: Box::new(|g, v| g.concat(v)),
        },
        OpCase {
            name: "disperse_sum",
            make: |r| vec![randn(&[2, 3, 4, 5], r)],
            build: Box::new(move |g, v| g.disperse_sum(v[0], &shifts)),
        },
        OpCase {
            name: "disperse_adjoint",
            make: |r| vec![randn(&[2, 1, 4, 7], r)],
            build: Box::new(move |g, v| g.disperse_adjoint(v[0], 5, &shifts)),
        },
    ]
}

/// Every differentiable graph op over `trials` random instances.
pub fn check_ops(trials: usize, seed: u64) -> Result<Report> {
    let mut report = Report::default();
    for (i, case) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let inputs = (case.make)(&mut rng);
            worst = worst.max(check_instance(inputs, case.build.as_ref(), &mut rng)?);
        }
        report.lines.push(CheckLine { name: case.name.to_string(), trials, rel_error: worst, tolerance: OP_TOLERANCE });
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct NetCheckOptions {
    pub config: RecoveryConfig,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    /// Coordinates sampled per group (all of them when the group is smaller).
    pub coords_per_group: usize,
    /// Negative control: perturbs the autodiff gradient of this group.
    pub corrupt_group: Option<String>,
}

impl Default for NetCheckOptions {
    fn default() -> Self {
        Self { config: RecoveryConfig::micro(), h: 8, w: 8, seed: 0, coords_per_group: 24, corrupt_group: None }
    }
}

/// Training loss of `net` on `gt` when both the simulated measurement and
/// the reconstruction use `mask` (a `[1,1,H,W]` graph value).
fn net_loss(g: &mut Graph, net: &RecoveryNet, gt: &Tensor, mask: Var, track: bool) -> Result<(Var, crate::net::params::Bound)> {
    let bound = net.params.bind(g, track);
    let gt_v = g.constant(gt.clone());
    let y = compress(g, gt_v, mask, &net.rule())?;
    let out = net.unroll(g, &bound, y, mask)?;
    Ok((loss_on_graph(g, &out.estimates, gt_v, 1, LossWeights::default())?, bound))
}

fn loss_with_mask(net: &RecoveryNet, gt: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let m = g.constant(mask.clone());
    let (l, _) = net_loss(&mut g, net, gt, m, false)?;
    Ok(g.value(l).data()[0])
}

/// Whole-network check: one line per parameter group plus the mask.
pub fn check_network(opts: &NetCheckOptions) -> Result<Report> {
    let (h, w) = (opts.h, opts.w);
    opts.config.check_geometry(h, w)?;
    let mut net = RecoveryNet::with_init(opts.config.clone(), opts.seed, InitScheme::Random)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6763);
    let gt = Tensor::rand_uniform(&[1, opts.config.c, h, w], 0.0, 1.0, &mut rng);
    let pair = MaskPair::init_latent(h, w, 0.0, 0.1, opts.seed ^ 0x6d61)?;
    let binary = pair.binary().to_tensor();

    // autodiff: parameters and the latent through the straight-through binarizer
    let mut g = Graph::new();
    let (latent, bin) = pair.bind(&mut g, true)?;
    let (l, bound) = net_loss(&mut g, &net, &gt, bin, true)?;
    g.backward(l)?;
    let param_grads = net.params.collect_grads(&g, &bound);
    let mask_grad = g.grad(latent).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; h * w]);

    let mut groups: Vec<(String, Vec<(usize, usize)>)> = Vec::new();
    for name in net.params.groups() {
        let mut coords = Vec::new();
        for (pi, p) in net.params.entries().iter().enumerate() {
            if p.group == name {
                coords.extend((0..p.value.len()).map(|j| (pi, j)));
            }
        }
        groups.push((name, coords));
    }

    let mut report = Report::default();
    for (name, coords) in groups {
        let picked: Vec<(usize, usize)> = if coords.len() <= opts.coords_per_group {
            coords
        } else {
            sample(&mut rng, coords.len(), opts.coords_per_group).into_iter().map(|i| coords[i]).collect()
        };
        let mut analytic: Vec<f64> = picked.iter().map(|&(pi, j)| param_grads[pi][j]).collect();
        let mut numeric = Vec::with_capacity(picked.len());
        for &(pi, j) in &picked {
            let id = net.params.find(&net.params.entries()[pi].name).expect("own parameter");
            let orig = net.params.get(id).data()[j];
            net.params.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let lp = loss_with_mask(&net, &gt, &binary)?;
            net.params.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let lm = loss_with_mask(&net, &gt, &binary)?;
            net.params.get_mut(id).data_mut()[j] = orig;
            numeric.push((lp - lm) / (2.0 * FD_STEP));
        }
        if opts.corrupt_group.as_deref() == Some(name.as_str()) {
            corrupt(&mut analytic);
        }
        let rel_error = relative_error(&analytic, &numeric);
        report.lines.push(CheckLine { name, trials: picked.len(), rel_error, tolerance: NET_TOLERANCE });
    }

    // mask: finite differences on the binary mask treated as continuous,
    // against the gradient delivered to the latent
    let picked: Vec<usize> = sample(&mut rng, h * w, opts.coords_per_group.min(h * w)).into_iter().collect();
    let mut analytic: Vec<f64> = picked.iter().map(|&j| mask_grad[j]).collect();
    let mut numeric = Vec::with_capacity(picked.len());
    for &j in &picked {
        let mut m = binary.clone();
        m.data_mut()[j] += FD_STEP;
        let lp = loss_with_mask(&net, &gt, &m)?;
        m.data_mut()[j] -= 2.0 * FD_STEP;
        let lm = loss_with_mask(&net, &gt, &m)?;
        numeric.push((lp - lm) / (2.0 * FD_STEP));
    }
    if opts.corrupt_group.as_deref() == Some(MASK_GROUP) {
        corrupt(&mut analytic);
    }
    report.lines.push(CheckLine {
        name: MASK_GROUP.to_string(),
        trials: picked.len(),
        rel_error: relative_error(&analytic, &numeric),
        tolerance: NET_TOLERANCE,
    });
    Ok(report)
}

fn corrupt(grad: &mut [f64]) {
    for (i, v) in grad.iter_mut().enumerate() {
        *v = if i % 2 == 0 { -*v } else { 1.5 * *v };
    }
    if grad.iter().all(|v| *v == 0.0) {
        grad.iter_mut().for_each(|v| *v = 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ops_pass_a_few_trials() {
        let r = check_ops(2, 1).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert_eq!(r.lines.len(), 16);
    }
}
