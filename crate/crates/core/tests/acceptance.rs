//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion to
//! the real stderr (bypassing the test harness capture) and fails the test if
//! any strict criterion fails.
//!
//! Criteria 8-10 are training experiments whose outcome is empirical. They are
//! always run and reported, but only fail the test when `ACCEPTANCE_STRICT=1`.
//! `ACCEPTANCE_QUICK=1` skips them entirely.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snapspec::autodiff::Graph;
use snapspec::gradcheck::{self, NetCheckOptions, NET_TOLERANCE, OP_TOLERANCE};
use snapspec::io;
use snapspec::ista::{self, IstaConfig, IstaStatus, ProxKind};
use snapspec::mask::{compress, MaskPair};
use snapspec::metrics;
use snapspec::net::checkpoint::Checkpoint;
use snapspec::net::{RecoveryConfig, RecoveryNet};
use snapspec::optics::{self, Cube, DispersionRule, Mask, Measurement};
use snapspec::train::experiments::{format_table, run_ablation, run_mask_study, Ablation, MaskVariant};
use snapspec::train::{self, lr_at, ExperimentConfig, FixedMask, MaskMode, TrainConfig, TrainOptions, Trainer};
use snapspec::Tensor;
use std::io::Write;
use std::time::{Duration, Instant};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn say(line: &str) {
    // write straight to fd 2 so the lines show up without --nocapture
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
}

fn env_flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

fn rand_cube(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Cube {
    Cube::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_meas(h: usize, width: usize, rng: &mut ChaCha8Rng) -> Measurement {
    Measurement::new(h, width, (0..h * width).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn adjoint_identity() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w, c) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let rule = DispersionRule::unit(c);
        let mask = Mask::bernoulli(h, w, 0.5, &mut rng);
        let x = rand_cube(h, w, c, &mut rng);
        let y = rand_meas(h, rule.measurement_width(w), &mut rng);
        let lhs = optics::apply_phi(&x, &mask, &rule).unwrap().dot(&y);
        let rhs = x.dot(&optics::adjoint(&y, &mask, &rule).unwrap());
        let scale = lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(worst <= 1e-10 && secs < 1.0, format!("100 instances, worst rel={worst:.2e} (tol 1e-10), {secs:.3}s (< 1s)"))
}

fn dense_oracle() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut shapes: Vec<(usize, usize, usize)> = Vec::new();
    for h in 1..=8 {
        for w in 1..=8 {
            for c in 1..=4 {
                shapes.push((h, w, c));
            }
        }
    }
    shapes.extend([(16, 16, 4), (8, 32, 4), (32, 32, 1), (16, 8, 8)]);
    let mut worst = 0.0f64;
    for &(h, w, c) in &shapes {
        assert!(h * w * c <= 1024);
        let rule = DispersionRule::unit(c);
        let mask = Mask::bernoulli(h, w, 0.5, &mut rng);
        let phi = optics::dense_phi(&mask, &rule, h, w, c).unwrap();
        let x = rand_cube(h, w, c, &mut rng);
        let y = rand_meas(h, rule.measurement_width(w), &mut rng);
        worst = worst.max(max_abs_diff(&optics::apply_phi(&x, &mask, &rule).unwrap().data, &phi.matvec(&x.data)));
        worst = worst.max(max_abs_diff(&optics::adjoint(&y, &mask, &rule).unwrap().data, &phi.matvec_transpose(&y.data)));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-12 && secs < 10.0,
        format!("{} shapes, worst abs={worst:.2e} (tol 1e-12), {secs:.2}s (< 10s)", shapes.len()),
    )
}

fn per_op_gradients() -> Verdict {
    let t = Instant::now();
    let r = gradcheck::check_ops(20, 3).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let trials_ok = r.lines.iter().all(|l| l.trials >= 20);
    verdict(
        r.passed() && trials_ok && secs < 60.0,
        format!(
            "{} ops x >=20 trials, worst rel={:.2e} (tol {OP_TOLERANCE:.0e}), failures={:?}, {secs:.2}s (< 60s)",
            r.lines.len(),
            r.worst(),
            r.failures()
        ),
    )
}

fn network_gradients() -> Verdict {
    let t = Instant::now();
    let opts = NetCheckOptions::default();
    let micro = RecoveryConfig::micro();
    let shape_ok = opts.config == micro && (opts.h, opts.w) == (8, 8);
    let r = gradcheck::check_network(&opts).unwrap();
    let secs = t.elapsed().as_secs_f64();
    verdict(
        shape_ok && r.passed() && secs < 120.0,
        format!(
            "{} parameter groups, worst rel={:.2e} (tol {NET_TOLERANCE:.0e}), {secs:.2}s (< 120s)",
            r.lines.len(),
            r.worst()
        ),
    )
}

/// Gradient of a loss through the net with respect to the mask, either with
/// the binary mask as a leaf or flowing through the threshold into the latent.
fn mask_grad(net: &RecoveryNet, pair: &MaskPair, y: &Measurement, x: &Cube, through_latent: bool) -> Vec<f64> {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, true);
    let (leaf, mask) = if through_latent {
        pair.bind(&mut g, true).unwrap()
    } else {
        let m = g.leaf(pair.binary().to_tensor().with_requires_grad(true));
        (m, m)
    };
    let yv = g.constant(y.to_tensor());
    // simulate through the mask too, so the mask enters the graph twice
    let xv = g.constant(x.to_tensor());
    let sim = compress(&mut g, xv, mask, &net.rule()).unwrap();
    let y2 = g.add(yv, sim).unwrap();
    let u = net.unroll(&mut g, &p, y2, mask).unwrap();
    let loss = g.squared_distance(u.last(), xv).unwrap();
    g.backward(loss).unwrap();
    g.grad(leaf).unwrap().to_vec()
}

fn straight_through() -> Verdict {
    let cfg = RecoveryConfig::micro();
    let net = RecoveryNet::with_init(cfg.clone(), 5, snapspec::net::InitScheme::Random).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut identical = true;
    for s in 0..5 {
        let pair = MaskPair::init_latent(8, 8, 0.0, 0.1, 100 + s).unwrap();
        let x = io::synthetic_cube(8, 8, 2, &mut rng);
        let y = rand_meas(8, 9, &mut rng);
        let a = mask_grad(&net, &pair, &y, &x, false);
        let b = mask_grad(&net, &pair, &y, &x, true);
        identical &= a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits());
    }

    // the binary mask stays exactly binary through training, and some entries flip
    let mut ec = ExperimentConfig { recovery: cfg, ..Default::default() };
    ec.train.lr0 = 5e-2;
    ec.train.batch = 2;
    let data = io::synthetic_dataset(4, 8, 8, 2, 6);
    let mut tr = Trainer::new(&ec, 8, 8).unwrap();
    let start = tr.mask.binary().clone();
    let mut binary = true;
    for step in 0..30 {
        let batch = [&data[step % 4], &data[(step + 1) % 4]];
        tr.step(&batch, ec.train.lr0).unwrap();
        binary &= tr.mask.binary().data.iter().all(|&v| v == 0.0 || v == 1.0);
    }
    let flips = tr.mask.binary().data.iter().zip(&start.data).filter(|(a, b)| a != b).count();
    verdict(
        identical && binary,
        format!("5 instances bit-identical={identical}; 30 training steps, always binary={binary}, entries flipped={flips}"),
    )
}

fn ista_reduction() -> Verdict {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for inst in 0..5 {
        let (h, w, c, k) = (8, 8, rng.random_range(1..=4), 4);
        let cfg = RecoveryConfig { k, c, theta: 0.0, ..RecoveryConfig::micro() };
        let mut net = RecoveryNet::new(cfg, inst).unwrap();
        let rule = net.rule();
        let mask = Mask::bernoulli(h, w, 0.5, &mut rng);
        let norm = ista::power_iteration_norm(&mask, &rule, 1000).unwrap().value;
        let rho = 0.9 / norm;
        for ph in &net.phases.clone() {
            net.params.get_mut(ph.rho).data_mut().fill(rho);
        }
        let x_true = io::synthetic_cube(h, w, c, &mut rng);
        let y = optics::apply_phi(&x_true, &mask, &rule).unwrap();

        let mut g = Graph::new();
        let p = net.params.bind(&mut g, false);
        let yv = g.constant(y.to_tensor());
        let mv = g.constant(mask.to_tensor());
        let mut x = g.disperse_adjoint(yv, w, rule.shifts()).unwrap();
        let mut unrolled = Vec::new();
        for ph in &net.phases {
            x = net.dgdm(&mut g, &p, ph, x, yv, mv, &rule).unwrap().0;
            unrolled.push(g.value(x).data().to_vec());
        }

        // classical iterations against the dense matrix
        let phi = optics::dense_phi(&mask, &rule, h, w, c).unwrap();
        let mut xd = optics::init_split(&y, &rule).unwrap().data;
        for step in &unrolled {
            let r: Vec<f64> = phi.matvec(&xd).iter().zip(&y.data).map(|(a, b)| a - b).collect();
            let grad = phi.matvec_transpose(&r);
            xd.iter_mut().zip(&grad).for_each(|(v, gv)| *v -= rho * gv);
            worst = worst.max(max_abs_diff(step, &xd));
        }
        let lib = ista::ista_reconstruct(&y, &mask, &rule, &IstaConfig { iterations: k, lambda: 0.0, rho, prox: ProxKind::SoftThresholdIdentity })
            .unwrap();
        worst = worst.max(max_abs_diff(&lib.x.data, unrolled.last().unwrap()));
    }
    verdict(worst <= 1e-10, format!("5 instances x 4 phases, worst abs={worst:.2e} (tol 1e-10)"))
}

fn ista_monotone() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst_norm, mut worst_rise) = (0.0f64, 0.0f64);
    let mut statuses_ok = true;
    for inst in 0..50 {
        let (h, w, c) = (2 * rng.random_range(1..=4), 2 * rng.random_range(1..=4), rng.random_range(1..=4));
        let rule = DispersionRule::unit(c);
        let mask = Mask::bernoulli(h, w, 0.5, &mut rng);
        let phi = optics::dense_phi(&mask, &rule, h, w, c).unwrap();
        let (rows, cols) = (h * rule.measurement_width(w), h * w * c);
        let a = DMatrix::from_fn(rows, cols, |r, col| phi.get(r, col));
        let eig = (a.transpose() * &a).symmetric_eigen().eigenvalues.max();
        let est = ista::power_iteration_norm(&mask, &rule, 5000).unwrap().value;
        if eig > 0.0 {
            worst_norm = worst_norm.max((est - eig).abs() / eig);
        }
        if eig == 0.0 {
            continue;
        }
        let x_true = io::synthetic_cube(h, w, c, &mut rng);
        let y = optics::apply_phi(&x_true, &mask, &rule).unwrap();
        let prox = if inst % 2 == 0 { ProxKind::SoftThresholdIdentity } else { ProxKind::SoftThresholdDiff };
        let cfg = IstaConfig { iterations: 60, lambda: 0.01, rho: 1.0 / est.max(eig), prox };
        let r = ista::ista_reconstruct(&y, &mask, &rule, &cfg).unwrap();
        statuses_ok &= r.status == IstaStatus::Ok;
        for pair in r.objective.windows(2) {
            worst_rise = worst_rise.max(pair[1] - pair[0]);
        }
    }
    verdict(
        worst_norm <= 1e-6 && worst_rise <= 1e-9 && statuses_ok,
        format!("50 instances, power-iteration vs eigensolve rel={worst_norm:.2e} (tol 1e-6), largest objective rise={worst_rise:.2e} (tol 1e-9)"),
    )
}

fn overfit() -> Verdict {
    let t = Instant::now();
    let budget = Duration::from_secs(15 * 60);
    let x = io::synthetic_dataset(1, 32, 32, 8, 2024).pop().unwrap();
    let mut ec = ExperimentConfig { recovery: RecoveryConfig::toy(), ..Default::default() };
    ec.train.mask_mode = MaskMode::Fixed;
    ec.train.fixed_mask = FixedMask::Random;
    ec.train.batch = 1;
    ec.train.noise_sigma = 0.0;
    ec.train.lr0 = 1e-3;
    ec.train.decay_every = 10_000;
    ec.train.seed = 1;
    let mut tr = Trainer::new(&ec, 32, 32).unwrap();
    let mask = tr.mask.binary().clone();
    let y = optics::apply_phi(&x, &mask, &tr.net.rule()).unwrap();
    let psnr = |tr: &Trainer| metrics::psnr(&tr.net.reconstruct(&y, &mask).unwrap(), &x, 1.0).unwrap();
    let mut losses = Vec::with_capacity(3000);
    let first = psnr(&tr);
    let (mut best, mut steps, mut hit) = (first, 0, None);
    while steps < 3000 && t.elapsed() < budget {
        let l = tr.step(&[&x], lr_at(&ec.train, 0).unwrap()).unwrap();
        losses.push(l);
        steps += 1;
        if steps % 50 == 0 {
            let p = psnr(&tr);
            best = best.max(p);
            if p >= 40.0 {
                hit = Some(steps);
                break;
            }
        }
    }
    let finite = losses.iter().all(|l| l.is_finite());
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let head = avg(&losses[..losses.len().min(100)]);
    let tail = avg(&losses[losses.len().saturating_sub(100)..]);
    let secs = t.elapsed().as_secs_f64();
    let pass = hit.is_some() && finite && secs <= 900.0;
    verdict(
        pass,
        format!(
            "best PSNR={best:.2} dB after {steps} steps (target 40 dB within 3000; start {first:.2} dB), reached at {hit:?}, \
             losses finite={finite}, mean loss first/last 100 steps={head:.3e}/{tail:.3e}, {secs:.0}s (<= 900s)"
        ),
    )
}

/// Desk-scale training settings shared by the two studies.
fn study_config() -> ExperimentConfig {
    let mut ec = ExperimentConfig { recovery: RecoveryConfig::toy(), ..Default::default() };
    ec.train = TrainConfig {
        epochs: 150,
        lr0: 1e-3,
        decay_every: 10_000,
        batch: 2,
        eval_every: 150,
        ..ec.train
    };
    ec
}

fn mask_study() -> Verdict {
    let t = Instant::now();
    let data = io::synthetic_dataset(8, 32, 32, 8, 42);
    let rows = run_mask_study(&data, &study_config(), &[0]).unwrap();
    say(&format_table(&rows));
    let get = |v: MaskVariant| rows.iter().find(|r| r.label == v.label()).unwrap().mean_psnr();
    let (u, r, l) = (get(MaskVariant::Uniform), get(MaskVariant::Random), get(MaskVariant::Learned));
    let pass = l >= r + 0.3 && u < r && u < l;
    verdict(
        pass,
        format!(
            "test PSNR uniform={u:.3} random={r:.3} learned={l:.3}; learned-random={:+.3} dB (need >= 0.3), uniform last={}, {:.0}s",
            l - r,
            u < r && u < l,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn ablation() -> Verdict {
    let t = Instant::now();
    let data = io::synthetic_dataset(8, 32, 32, 8, 42);
    let variants = [Ablation::Full, Ablation::NoInteraction, Ablation::NoDynamicStep];
    let rows = run_ablation(&data, &study_config(), &variants, &[0, 1, 2]).unwrap();
    say(&format_table(&rows));
    let get = |v: Ablation| rows.iter().find(|r| r.label == v.label()).unwrap().mean_psnr();
    let (full, no_hfim, no_dyn) = (get(Ablation::Full), get(Ablation::NoInteraction), get(Ablation::NoDynamicStep));
    verdict(
        no_hfim < full && no_dyn < full,
        format!(
            "3-seed mean test PSNR full={full:.3} no-hfim={no_hfim:.3} no-dyn-step={no_dyn:.3}, {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

fn schedule() -> Verdict {
    let cfg = TrainConfig::default();
    let mut worst = 0.0f64;
    let mut exact = true;
    for e in 0..=200i64 {
        let got = lr_at(&cfg, e).unwrap();
        let want = 1e-4 * 0.9f64.powi((e / 10) as i32);
        exact &= got.to_bits() == want.to_bits();
        worst = worst.max((got - 1e-4 * 0.9f64.powf((e / 10) as f64)).abs());
    }
    verdict(
        exact && worst <= 1e-18,
        format!("e in 0..=200 bit-exact={exact}; largest gap to powf form={worst:.1e}"),
    )
}

fn metric_fixtures() -> Verdict {
    let x = io::synthetic_dataset(1, 16, 16, 3, 9).pop().unwrap();
    let s = metrics::ssim(&x, &x).unwrap();
    let off = Cube::new(16, 16, 3, x.data.iter().map(|v| v + 0.5).collect()).unwrap();
    let p = metrics::psnr(&off, &x, 1.0).unwrap();
    let zero = metrics::psnr(&x, &x, 1.0).unwrap();
    verdict(
        s == 1.0 && (p - 6.0206).abs() <= 1e-4 && zero == 99.0,
        format!("ssim(x,x)={s}, psnr(+0.5 offset)={p:.6} dB, psnr(x,x)={zero}"),
    )
}

fn serialization() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cube = io::synthetic_cube(8, 12, 3, &mut rng);
    let mask = Mask::bernoulli(8, 12, 0.5, &mut rng);
    let meas = optics::apply_phi(&cube, &mask, &DispersionRule::unit(3)).unwrap();
    let meas = io::decode_measurement(&io::encode_measurement(&meas)).unwrap();

    let twice = |write: &dyn Fn(&std::path::Path), read_write: &dyn Fn(&std::path::Path, &std::path::Path), name: &str| {
        let (a, b) = (d.join(format!("{name}.a")), d.join(format!("{name}.b")));
        write(&a);
        read_write(&a, &b);
        std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap()
    };
    let cube_ok = twice(
        &|p| io::write_cube(p, &cube).unwrap(),
        &|a, b| io::write_cube(b, &io::read_cube(a).unwrap()).unwrap(),
        "cube",
    );
    let meas_ok = twice(
        &|p| io::write_measurement(p, &meas).unwrap(),
        &|a, b| io::write_measurement(b, &io::read_measurement(a).unwrap()).unwrap(),
        "meas",
    );
    let mask_ok = twice(
        &|p| io::write_mask(p, &mask).unwrap(),
        &|a, b| io::write_mask(b, &io::read_mask(a).unwrap()).unwrap(),
        "mask",
    );
    let net = RecoveryNet::new(RecoveryConfig::micro(), 13).unwrap();
    let extra = Tensor::full(&[1], 3.0);
    let ck_bytes = Checkpoint::from_net(&net, &[("train.next_epoch", &extra)]).encode();
    let (back, extras) = Checkpoint::decode(&ck_bytes).unwrap().into_net().unwrap();
    let refs: Vec<(&str, &Tensor)> = extras.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let ck_ok = Checkpoint::from_net(&back, &refs).encode() == ck_bytes;

    let data = io::synthetic_dataset(4, 8, 8, 2, 14);
    let mut ec = ExperimentConfig { recovery: RecoveryConfig::micro(), ..Default::default() };
    ec.train.epochs = 3;
    ec.train.batch = 2;
    ec.train.lr0 = 1e-3;
    ec.train.noise_sigma = 0.01;
    let mut csvs = Vec::new();
    for run in ["r1", "r2"] {
        let out = d.join(run);
        train::train(&data, &ec, &TrainOptions { out_dir: Some(&out), resume: false, verbose: false }).unwrap();
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    let csv_ok = csvs[0] == csvs[1] && !csvs[0].is_empty();
    verdict(
        cube_ok && meas_ok && mask_ok && ck_ok && csv_ok,
        format!("cube={cube_ok} measurement={meas_ok} mask={mask_ok} checkpoint={ck_ok} seeded metrics CSVs identical={csv_ok}"),
    )
}

#[test]
fn acceptance() {
    let quick = env_flag("ACCEPTANCE_QUICK");
    let strict = env_flag("ACCEPTANCE_STRICT");
    type Check = fn() -> Verdict;
    let criteria: [(u8, &str, Check, bool); 13] = [
        (1, "adjoint identity", adjoint_identity, false),
        (2, "dense oracle equivalence", dense_oracle, false),
        (3, "per-op gradient checks", per_op_gradients, false),
        (4, "whole-network gradient check", network_gradients, false),
        (5, "straight-through exactness", straight_through, false),
        (6, "ISTA reduction", ista_reduction, false),
        (7, "classical ISTA monotonicity", ista_monotone, false),
        (8, "overfit one sample", overfit, true),
        (9, "mask study direction", mask_study, true),
        (10, "ablation direction", ablation, true),
        (11, "schedule exactness", schedule, false),
        (12, "metric fixtures", metric_fixtures, false),
        (13, "serialization and determinism", serialization, false),
    ];
    say("\n== acceptance criteria ==");
    let mut hard_failures = Vec::new();
    let mut passed = 0;
    for (id, name, check, experiment) in criteria {
        if experiment && quick {
            say(&format!("SKIP [{id:>2}] {name} (ACCEPTANCE_QUICK=1)"));
            continue;
        }
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        say(&format!("{tag} [{id:>2}] {name}: {}", v.detail));
        if v.pass {
            passed += 1;
        } else if !experiment || strict {
            hard_failures.push(id);
        }
    }
    say(&format!("acceptance: {passed}/13 passed"));
    assert!(hard_failures.is_empty(), "failed criteria: {hard_failures:?}");
}
