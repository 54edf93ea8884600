//! Joint optimization of the mask latent and the network weights.

use super::adam::Adam;
use super::config::{ExperimentConfig, FixedMask, MaskMode, TrainConfig};
use super::loss::{loss_on_graph, LossWeights};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::mask::{compress, mask_to_text, MaskPair};
use crate::metrics;
use crate::net::checkpoint::Checkpoint;
use crate::net::RecoveryNet;
use crate::optics::{self, Cube, Mask};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_psnr,val_ssim";
pub const CHECKPOINT_FILE: &str = "checkpoint.hwt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MASK_FILE: &str = "mask.txt";
pub const RUN_FILE: &str = "run.txt";

// Independent random streams derived from the run seed.
const MASK_SALT: u64 = 0x6d61_736b;
const SPLIT_SALT: u64 = 0x7370_6c69;
const SHUFFLE_SALT: u64 = 0x7368_7566;
const NOISE_SALT: u64 = 0x6e6f_6973;
const EVAL_SALT: u64 = 0x6576_616c;

/// `lr0 * decay^floor(epoch / decay_every)`.
pub fn lr_at(cfg: &TrainConfig, epoch: i64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::Usage(format!("epoch must be non-negative, got {epoch}")));
    }
    Ok(cfg.lr0 * cfg.decay.powi((epoch as u64 / cfg.decay_every as u64) as i32))
}

/// Seeded split into (train, validation) indices. With a single cube, or a
/// zero validation fraction, the validation set is the training set.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    if n_val == 0 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Stacks equally shaped cubes into a `[B,C,H,W]` tensor.
pub fn stack(cubes: &[&Cube]) -> Result<Tensor> {
    let first = cubes.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let mut data = Vec::with_capacity(first.data.len() * cubes.len());
    for c in cubes {
        if (c.h, c.w, c.c) != (first.h, first.w, first.c) {
            return Err(Error::Geometry(format!(
                "cube {}x{}x{} differs from {}x{}x{}",
                c.h, c.w, c.c, first.h, first.w, first.c
            )));
        }
        data.extend_from_slice(&c.data);
    }
    Tensor::new(&[cubes.len(), first.c, first.h, first.w], data)
}

/// Mean PSNR and SSIM of clamped reconstructions of `cubes`, each simulated
/// with `mask` and seeded noise.
pub fn evaluate(net: &RecoveryNet, mask: &Mask, cubes: &[&Cube], noise_sigma: f64, seed: u64) -> Result<(f64, f64)> {
    if cubes.is_empty() {
        return Err(Error::Usage("nothing to evaluate".into()));
    }
    let rule = net.rule();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
    let (mut p, mut s) = (0.0, 0.0);
    for cube in cubes {
        let y = optics::forward(cube, mask, &rule, noise_sigma, &mut rng)?;
        let x = net.reconstruct(&y, mask)?;
        p += metrics::psnr(&x, cube, 1.0)?;
        s += metrics::ssim(&x, cube)?;
    }
    let n = cubes.len() as f64;
    Ok((p / n, s / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Absent on epochs skipped by `eval_every`.
    pub val: Option<(f64, f64)>,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        match self.val {
            Some((p, s)) => format!("{},{},{},{},{}", self.epoch, self.lr, self.train_loss, p, s),
            None => format!("{},{},{},,", self.epoch, self.lr, self.train_loss),
        }
    }
}

/// Network, mask and optimizer state of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub net: RecoveryNet,
    pub mask: MaskPair,
    pub adam: Adam,
    pub next_epoch: usize,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, h: usize, w: usize) -> Result<Self> {
        config.train.validate()?;
        config.recovery.check_geometry(h, w)?;
        let t = &config.train;
        let net = RecoveryNet::new(config.recovery.clone(), t.seed)?;
        let mut mask = MaskPair::init_latent(h, w, t.mu_b, t.sigma_b, t.seed ^ MASK_SALT)?;
        if t.mask_mode == MaskMode::Fixed && t.fixed_mask == FixedMask::Ones {
            mask.set_latent(Tensor::full(&[h, w], t.mu_b + t.sigma_b));
        }
        Ok(Self { config: config.clone(), net, mask, adam: Adam::default(), next_epoch: 0 })
    }

    pub fn learns_mask(&self) -> bool {
        self.config.train.mask_mode == MaskMode::Learned
    }

    fn weights(&self) -> LossWeights {
        LossWeights { beta: self.config.train.beta_loss, beta_applies_to_both: self.config.train.beta_applies_to_both }
    }

    /// One optimizer step on `batch`; returns the batch loss (mean over samples).
    pub fn step(&mut self, batch: &[&Cube], lr: f64) -> Result<f64> {
        let learn = self.learns_mask();
        let gt = stack(batch)?;
        let rule = self.net.rule();
        let mut g = Graph::new();
        let bound = self.net.params.bind(&mut g, true);
        let (latent, bin) = self.mask.bind(&mut g, learn)?;
        let gt_v = g.constant(gt);
        let mut y = compress(&mut g, gt_v, bin, &rule)?;
        let sigma = self.config.train.noise_sigma;
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed ^ NOISE_SALT);
            rng.set_stream(self.adam.steps());
            let noise = g.constant(Tensor::randn(g.shape(y), 0.0, sigma, &mut rng));
            y = g.add(y, noise)?;
        }
        let out = self.net.unroll(&mut g, &bound, y, bin)?;
        let l = loss_on_graph(&mut g, &out.estimates, gt_v, batch.len(), self.weights())?;
        let loss = g.value(l).data()[0];
        if !loss.is_finite() {
            return Err(Error::Usage(format!("training loss became non-finite ({loss})")));
        }
        g.backward(l)?;
        let mut grads = self.net.params.collect_grads(&g, &bound);
        if learn {
            grads.push(g.grad(latent).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.mask.latent().len()]));
        }
        let clip = self.config.train.grad_clip;
        if clip > 0.0 {
            let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                grads.iter_mut().flatten().for_each(|v| *v *= s);
            }
        }
        let adam = &mut self.adam;
        let mut slots: Vec<&mut [f64]> = self.net.params.entries_mut().iter_mut().map(|p| p.value.data_mut()).collect();
        if learn {
            let mut z = self.mask.latent().data().to_vec();
            slots.push(&mut z);
            adam.step(&mut slots, &grads, lr)?;
            drop(slots);
            self.mask.latent_mut_apply(|d| d.copy_from_slice(&z));
        } else {
            adam.step(&mut slots, &grads, lr)?;
        }
        Ok(loss)
    }

    /// One pass over `train` in a seeded per-epoch order; returns the mean
    /// per-sample loss.
    pub fn run_epoch(&mut self, data: &[Cube], train: &[usize]) -> Result<(f64, f64)> {
        let epoch = self.next_epoch;
        let lr = lr_at(&self.config.train, epoch as i64)?;
        let mut order = train.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed ^ SHUFFLE_SALT);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.train.batch) {
            let batch: Vec<&Cube> = chunk.iter().map(|&i| &data[i]).collect();
            total += self.step(&batch, lr)? * chunk.len() as f64;
        }
        self.next_epoch += 1;
        Ok((lr, total / order.len() as f64))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut owned: Vec<(String, Tensor)> = vec![
            ("mask.latent".into(), self.mask.latent().clone()),
            ("mask.threshold".into(), Tensor::scalar(self.mask.mu_b)),
            ("mask.sigma".into(), Tensor::scalar(self.mask.sigma_b)),
            ("train.next_epoch".into(), Tensor::scalar(self.next_epoch as f64)),
            ("adam.step".into(), Tensor::scalar(self.adam.steps() as f64)),
        ];
        let (m, v) = self.adam.moments();
        for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
            owned.push((format!("adam.m.{i}"), Tensor::new(&[mi.len()], mi.clone()).expect("non-empty slot")));
            owned.push((format!("adam.v.{i}"), Tensor::new(&[vi.len()], vi.clone()).expect("non-empty slot")));
        }
        let extras: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        Checkpoint::from_net(&self.net, &extras)
    }

    /// Restores a run written by [`Trainer::to_checkpoint`]; the architecture
    /// must match `config`.
    pub fn from_checkpoint(config: &ExperimentConfig, ck: Checkpoint) -> Result<Self> {
        if ck.config != config.recovery {
            return Err(Error::Config(format!(
                "checkpoint architecture {:?} does not match config {:?}",
                ck.config, config.recovery
            )));
        }
        let (net, extras) = ck.into_net()?;
        let get = |name: &str| {
            extras
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format("entries", format!("missing {name}")))
        };
        let scalar = |name: &str| get(name).map(|t| t.data()[0]);
        let latent = get("mask.latent")?.clone();
        if latent.shape().len() != 2 {
            return Err(Error::format("mask.latent", "expected rank 2"));
        }
        let mask = MaskPair::from_latent(latent, scalar("mask.threshold")?, scalar("mask.sigma")?);
        let mut adam = Adam::default();
        let (mut m, mut v) = (vec![], vec![]);
        for i in 0.. {
            let (Ok(mi), Ok(vi)) = (get(&format!("adam.m.{i}")), get(&format!("adam.v.{i}"))) else { break };
            m.push(mi.data().to_vec());
            v.push(vi.data().to_vec());
        }
        adam.restore(scalar("adam.step")? as u64, m, v);
        let next_epoch = scalar("train.next_epoch")? as usize;
        Ok(Self { config: config.clone(), net, mask, adam, next_epoch })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Where checkpoints, the mask and `metrics.csv` go.
    pub out_dir: Option<&'a Path>,
    /// Continue from `out_dir/checkpoint.hwt` when present.
    pub resume: bool,
    /// Print one line per epoch.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    /// Records of the epochs run by this call.
    pub history: Vec<EpochRecord>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl TrainOutcome {
    pub fn final_eval(&self, data: &[Cube]) -> Result<(f64, f64)> {
        let t = &self.trainer;
        let val: Vec<&Cube> = self.val_idx.iter().map(|&i| &data[i]).collect();
        evaluate(&t.net, t.mask.binary(), &val, t.config.train.noise_sigma, t.config.train.seed)
    }
}

pub fn variant_name(cfg: &TrainConfig) -> &'static str {
    match cfg.mask_mode {
        MaskMode::Learned => "full",
        MaskMode::Fixed => "base",
    }
}

fn write_metrics(path: &Path, keep_before: usize, rows: &[EpochRecord], fresh: bool) -> Result<()> {
    let mut text = String::new();
    if !fresh && path.exists() {
        let old = fs::read_to_string(path)?;
        for line in old.lines().skip(1) {
            let epoch: Option<usize> = line.split(',').next().and_then(|e| e.parse().ok());
            if epoch.is_some_and(|e| e < keep_before) {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    let mut out = format!("{METRICS_HEADER}\n{text}");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Trains on `data` (all cubes share one geometry). Every `checkpoint_every`
/// epochs, and after the last one, the checkpoint, binary mask and metrics
/// log are written to `opts.out_dir`.
pub fn train(data: &[Cube], config: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let first = data.first().ok_or_else(|| Error::Usage("dataset is empty".into()))?;
    for (i, c) in data.iter().enumerate() {
        if (c.h, c.w, c.c) != (first.h, first.w, first.c) {
            return Err(Error::Geometry(format!(
                "cube {i} is {}x{}x{}, expected {}x{}x{}",
                c.h, c.w, c.c, first.h, first.w, first.c
            )));
        }
    }
    if first.c != config.recovery.c {
        return Err(Error::Geometry(format!("dataset has {} bands, config expects c={}", first.c, config.recovery.c)));
    }
    let ck_path = opts.out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut trainer = match &ck_path {
        Some(p) if opts.resume && p.exists() => Trainer::from_checkpoint(config, Checkpoint::decode(&fs::read(p)?)?)?,
        _ => Trainer::new(config, first.h, first.w)?,
    };
    if (trainer.mask.binary().h, trainer.mask.binary().w) != (first.h, first.w) {
        return Err(Error::Geometry("checkpoint mask does not match dataset geometry".into()));
    }
    let t = config.train.clone();
    let (train_idx, val_idx) = split_indices(data.len(), t.val_fraction, t.seed);
    let val: Vec<&Cube> = val_idx.iter().map(|&i| &data[i]).collect();
    let start = trainer.next_epoch;
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RUN_FILE), format!("variant={}\n{}", variant_name(&t), config.to_text()))?;
    }
    if opts.verbose {
        println!("variant={} start_epoch={start} train={} val={}", variant_name(&t), train_idx.len(), val_idx.len());
    }
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut unsaved = 0;
    while trainer.next_epoch < t.epochs {
        let epoch = trainer.next_epoch;
        let (lr, train_loss) = trainer.run_epoch(data, &train_idx)?;
        let last = trainer.next_epoch == t.epochs;
        let val_metrics = if (epoch + 1) % t.eval_every == 0 || last {
            Some(evaluate(&trainer.net, trainer.mask.binary(), &val, t.noise_sigma, t.seed)?)
        } else {
            None
        };
        let rec = EpochRecord { epoch, lr, train_loss, val: val_metrics };
        if opts.verbose {
            println!("{}", rec.csv_row());
        }
        history.push(rec);
        unsaved += 1;
        if let Some(dir) = opts.out_dir {
            if (epoch + 1) % t.checkpoint_every == 0 || last {
                fs::write(dir.join(CHECKPOINT_FILE), trainer.to_checkpoint().encode())?;
                fs::write(dir.join(MASK_FILE), mask_to_text(trainer.mask.binary()))?;
                let saved = &history[history.len() - unsaved..];
                write_metrics(&dir.join(METRICS_FILE), saved[0].epoch, saved, start == 0 && saved[0].epoch == 0)?;
                unsaved = 0;
            }
        }
    }
    if let Some(dir) = opts.out_dir {
        if !dir.join(METRICS_FILE).exists() {
            write_metrics(&dir.join(METRICS_FILE), 0, &[], true)?;
        }
    }
    Ok(TrainOutcome { trainer, history, train_idx, val_idx })
}
