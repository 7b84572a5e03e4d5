//! The alternating discriminator / generator training loop, its config file,
//! JSON-lines log and binary checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Graph, Mode, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::losses::{self, FeaturePyramid, FeatureTriple, LossReport, LossWeights};
use crate::masks::{generate_irregular, MaskBucket};
use crate::models::{coarse_forward, domain_pattern, refine_forward, Networks};
use crate::raster::{stack_images, stack_masks, Image};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "SAFEPAINT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Fraction of `steps` after which the learning rate falls linearly
    /// towards zero; `1` keeps it constant.
    #[serde(default = "no_decay")]
    pub lr_decay_from: f64,
    pub adam_betas: (f64, f64),
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub image_size: usize,
    pub base_width: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Training masks are drawn from buckets with these lower bounds.
    pub mask_buckets: Vec<u32>,
    pub weights: LossWeights,
    /// Optional JSON weights for the feature pyramid.
    pub pyramid_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            lr_decay_from: 1.0,
            adam_betas: (0.5, 0.999),
            batch: 4,
            steps: 2000,
            seed: 0,
            image_size: 64,
            base_width: 8,
            checkpoint_every: 500,
            mask_buckets: vec![10, 20, 30, 40],
            weights: LossWeights::default(),
            pyramid_weights: None,
        }
    }
}

fn no_decay() -> f64 {
    1.0
}

impl TrainConfig {
    /// Learning-rate multiplier for the 1-based `step`.
    pub fn lr_factor(&self, step: u64) -> f64 {
        let start = self.lr_decay_from * self.steps as f64;
        let t = step as f64;
        if self.lr_decay_from >= 1.0 || t <= start {
            1.0
        } else {
            ((self.steps as f64 - t + 1.0) / (self.steps as f64 - start + 1.0)).clamp(0.0, 1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_from) {
            return bad(format!("lr_decay_from must lie in [0, 1], got {}", self.lr_decay_from));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("adam_betas must lie in [0, 1), got {b1},{b2}"));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return bad(format!("image_size must be a multiple of 8 and >= 16, got {}", self.image_size));
        }
        if self.base_width == 0 {
            return bad("base_width must be at least 1".into());
        }
        if self.mask_buckets.is_empty() {
            return bad("mask_buckets must not be empty".into());
        }
        for &b in &self.mask_buckets {
            MaskBucket::new(b).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep their
    /// defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let err = |what: &str| Error::Config(format!("line {}: invalid {what} `{value}` for `{key}`", no + 1));
            let float = || value.parse::<f64>().map_err(|_| err("number"));
            let int = || value.parse::<u64>().map_err(|_| err("integer"));
            match key {
                "lr" => cfg.lr = float()?,
                "lr_decay_from" => cfg.lr_decay_from = float()?,
                "adam_betas" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    match parts.as_slice() {
                        [a, b] => {
                            cfg.adam_betas = (
                                a.parse().map_err(|_| err("beta pair"))?,
                                b.parse().map_err(|_| err("beta pair"))?,
                            )
                        }
                        _ => return Err(err("beta pair")),
                    }
                }
                "batch" => cfg.batch = int()? as usize,
                "steps" => cfg.steps = int()?,
                "seed" => cfg.seed = int()?,
                "image_size" => cfg.image_size = int()? as usize,
                "base_width" => cfg.base_width = int()? as usize,
                "checkpoint_every" => cfg.checkpoint_every = int()?,
                "mask_buckets" => {
                    cfg.mask_buckets = value
                        .split(',')
                        .map(|s| s.trim().trim_end_matches('%').parse::<u32>().map_err(|_| err("bucket list")))
                        .collect::<Result<_>>()?
                }
                "weights.l1" => cfg.weights.l1 = float()?,
                "weights.per" => cfg.weights.per = float()?,
                "weights.sty" => cfg.weights.sty = float()?,
                "weights.adv" => cfg.weights.adv = float()?,
                "weights.dom" => cfg.weights.dom = float()?,
                "pyramid_weights" => cfg.pyramid_weights = Some(PathBuf::from(value)),
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", no + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an integer")))?;
        }
        Ok(())
    }
}

/// Ground truth and masks of one step as `[n, 3, h, w]` and `[n, 1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub gt: Tensor,
    pub mask: Tensor,
}

impl Batch {
    /// The batch for `step`, drawn with a generator seeded by `(seed, step)`
    /// so that a resumed run sees the same data.
    pub fn sample(corpus: &[Image], cfg: &TrainConfig, step: u64) -> Result<Self> {
        if corpus.len() < cfg.batch {
            return Err(Error::InvalidArgument(format!(
                "corpus has {} images, fewer than the batch size {}",
                corpus.len(),
                cfg.batch
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        let picks = sample(&mut rng, corpus.len(), cfg.batch).into_vec();
        let images: Vec<&Image> = picks.iter().map(|&i| &corpus[i]).collect();
        let size = cfg.image_size;
        for im in &images {
            if im.dims() != (size, size) || im.channels() != 3 {
                return Err(Error::shape(
                    format!("{size}x{size}x3"),
                    format!("{}x{}x{}", im.height(), im.width(), im.channels()),
                ));
            }
        }
        let masks = (0..cfg.batch)
            .map(|_| {
                let lower = cfg.mask_buckets[rng.random_range(0..cfg.mask_buckets.len())];
                generate_irregular(rng.random(), MaskBucket::new(lower)?, size, size)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gt: stack_images(&images),
            mask: stack_masks(&masks.iter().collect::<Vec<_>>()),
        })
    }

    /// `I_in = I_gt·(1−M) + M`.
    pub fn input(&self) -> Tensor {
        let (n, c, h, w) = self.gt.dims4();
        let hw = h * w;
        let mut data = self.gt.data.clone();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for p in 0..hw {
                    if self.mask.data[i * hw + p] != 0.0 {
                        data[off + p] = 1.0;
                    }
                }
            }
        }
        Tensor::new(vec![n, c, h, w], data)
    }
}

/// Networks, frozen pyramid and optimizer state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: Networks,
    pub pyramid: FeaturePyramid,
    opt_g1: Adam,
    opt_g2: Adam,
    opt_p: Adam,
    opt_d: Adam,
    /// Completed steps.
    pub step: u64,
    /// Steps at which the batch variance of `Z_b` fell below `1e-6`.
    pub collapse_steps: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let nets = Networks::new(cfg.base_width, cfg.seed);
        let mut pyramid = FeaturePyramid::new(0x7079_7261_6d69_64);
        if let Some(path) = &cfg.pyramid_weights {
            pyramid.load_weights(path)?;
        }
        let adam = |ps: &ParamSet| Adam::new(ps, cfg.lr, cfg.adam_betas);
        Ok(Self {
            opt_g1: adam(&nets.g1.params),
            opt_g2: adam(&nets.g2.params),
            opt_p: adam(&nets.p.params),
            opt_d: adam(&nets.d.params),
            nets,
            pyramid,
            cfg,
            step: 0,
            collapse_steps: 0,
        })
    }

    /// One alternating update: the discriminator on real vs detached fake,
    /// then G1, G2 and P jointly on the weighted objective against the
    /// updated discriminator.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let step = self.step + 1;
        let nets = &mut self.nets;
        let input = batch.input();
        let mask = &batch.mask;

        let mut g = Graph::new();
        let b1 = nets.g1.params.bind(&mut g, true);
        let bp = nets.p.params.bind(&mut g, true);
        let b2 = nets.g2.params.bind(&mut g, true);
        let i_c = coarse_forward(&mut g, &mut nets.g1, &b1, Mode::TRAIN, &input, mask);
        let (v, z_b) = domain_pattern(&mut g, &mut nets.p, &bp, i_c, mask)?;
        let i_out = refine_forward(&mut g, &mut nets.g2, &b2, Mode::TRAIN, i_c, v, &input, mask);

        // Discriminator update on a detached copy of the output.
        let mut gd = Graph::new();
        let bd = nets.d.params.bind(&mut gd, true);
        let real = gd.constant(batch.gt.clone());
        let fake = gd.constant(g.value(i_out).clone());
        let real_logits = nets.d.forward(&mut gd, &bd, Mode::TRAIN, real);
        let fake_logits = nets.d.forward(&mut gd, &bd, Mode::FROZEN_TRAIN, fake);
        let d_loss = losses::discriminator_loss(&mut gd, real_logits, fake_logits);
        let adv_d = gd.value(d_loss).item();
        if !adv_d.is_finite() {
            return Err(Error::NonFinite { component: "adv_d", step });
        }
        let d_grads = gd.backward(d_loss);
        self.opt_d.step(&mut nets.d.params, &bd.grads(&d_grads, &gd));

        // Generator objective.
        let gt = g.constant(batch.gt.clone());
        let bdc = nets.d.params.bind(&mut g, false);
        let logits = nets.d.forward(&mut g, &bdc, Mode::FROZEN_TRAIN, i_out);
        let adv_g = losses::generator_adversarial_loss(&mut g, logits);
        let l1 = losses::l1_loss(&mut g, i_c, i_out, gt);
        let bphi = self.pyramid.bind(&mut g);
        let feats = FeatureTriple::new(&mut g, &self.pyramid, &bphi, i_c, i_out, gt);
        let per = losses::perceptual_loss(&mut g, &feats);
        let sty = losses::style_loss(&mut g, &feats);
        let z_gt = nets.p.forward(&mut g, &bp, gt, mask)?;
        let z_out = nets.p.forward(&mut g, &bp, i_out, mask)?;
        let dom = losses::domain_distance_loss(&mut g, z_out, z_b, z_gt);
        let total = losses::weighted_total(&mut g, &self.cfg.weights, l1, per, sty, adv_g, dom);

        let report = LossReport {
            l1: g.value(l1).item(),
            per: g.value(per).item(),
            sty: g.value(sty).item(),
            adv_d,
            adv_g: g.value(adv_g).item(),
            dom: g.value(dom).item(),
            total: g.value(total).item(),
        };
        if let Some(component) = report.non_finite() {
            return Err(Error::NonFinite { component, step });
        }
        if batch_variance(g.value(z_b)) < 1e-6 {
            self.collapse_steps += 1;
        }

        if self.cfg.lr_decay_from < 1.0 {
            let lr = self.cfg.lr * self.cfg.lr_factor(step);
            for o in [&mut self.opt_g1, &mut self.opt_g2, &mut self.opt_p] {
                o.lr = lr;
            }
        }
        let grads = g.backward(total);
        self.opt_g1.step(&mut nets.g1.params, &b1.grads(&grads, &g));
        self.opt_g2.step(&mut nets.g2.params, &b2.grads(&grads, &g));
        self.opt_p.step(&mut nets.p.params, &bp.grads(&grads, &g));
        self.step = step;
        Ok(report)
    }
}

/// Mean over dimensions of the across-batch variance of `[n, d]` rows.
fn batch_variance(z: &Tensor) -> f64 {
    let (n, d) = (z.shape[0], z.shape[1]);
    if n < 2 {
        return f64::INFINITY;
    }
    (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| z.data[i * d + j]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64
        })
        .sum::<f64>()
        / d as f64
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub collapse_steps: u64,
}

/// Trains until `cfg.steps`, appending to `out/train_log.jsonl` and writing
/// checkpoints into `out`. With `resume`, training continues from that
/// checkpoint's step and its configuration; the log is appended to.
pub fn train_run(corpus: &[Image], cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    if corpus.is_empty() {
        return Err(Error::EmptyRegion("training corpus"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match resume {
        Some(path) => {
            let mut t = load_trainer(path)?;
            t.cfg.steps = cfg.steps;
            t.cfg.checkpoint_every = cfg.checkpoint_every;
            t
        }
        None => Trainer::new(cfg.clone())?,
    };
    let log_path = out.join(LOG_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    while trainer.step < trainer.cfg.steps {
        let batch = Batch::sample(corpus, &trainer.cfg, trainer.step + 1)?;
        let losses = trainer.train_step(&batch)?;
        let line = serde_json::to_string(&LogRecord {
            step: trainer.step,
            losses,
        })?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && trainer.step % every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save_checkpoint(&trainer, &out.join(checkpoint_name(trainer.step)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&trainer, &final_checkpoint)?;
    Ok(RunSummary {
        steps: trainer.step,
        final_checkpoint,
        collapse_steps: trainer.collapse_steps,
    })
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub const CHECKPOINT_HEADER: &[u8] = b"safepaint-ckpt-v1\n";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    seed: u64,
    step: u64,
    collapse_steps: u64,
    optimizer_steps: [u64; 4],
    /// Name and length of every blob section, in file order.
    sections: Vec<(String, usize)>,
}

/// Blob sections in file order: parameters, buffers, then both Adam moments
/// for G1, G2, D and P.
fn sections(t: &Trainer) -> Vec<(String, Vec<f64>)> {
    let nets = [
        ("g1", &t.nets.g1.params, &t.opt_g1),
        ("g2", &t.nets.g2.params, &t.opt_g2),
        ("d", &t.nets.d.params, &t.opt_d),
        ("p", &t.nets.p.params, &t.opt_p),
    ];
    let mut out = Vec::new();
    for (net, ps, opt) in nets {
        for p in ps.params() {
            out.push((format!("{net}/param/{}", p.name), p.tensor.data.clone()));
        }
        for b in ps.buffers() {
            out.push((format!("{net}/buffer/{}", b.name), b.tensor.data.clone()));
        }
        let (m, v) = opt.moments();
        for (p, m) in ps.params().iter().zip(m) {
            out.push((format!("{net}/adam_m/{}", p.name), m.clone()));
        }
        for (p, v) in ps.params().iter().zip(v) {
            out.push((format!("{net}/adam_v/{}", p.name), v.clone()));
        }
    }
    out
}

/// Header line, little-endian `u64` metadata length, JSON metadata, then
/// every section as little-endian `f64`.
pub fn save_checkpoint(t: &Trainer, path: &Path) -> Result<()> {
    let secs = sections(t);
    let meta = CheckpointMeta {
        config: t.cfg.clone(),
        seed: t.cfg.seed,
        step: t.step,
        collapse_steps: t.collapse_steps,
        optimizer_steps: [t.opt_g1.steps(), t.opt_g2.steps(), t.opt_d.steps(), t.opt_p.steps()],
        sections: secs.iter().map(|(n, d)| (n.clone(), d.len())).collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut bytes = Vec::with_capacity(CHECKPOINT_HEADER.len() + 8 + json.len());
    bytes.extend_from_slice(CHECKPOINT_HEADER);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, data) in &secs {
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Restores a full trainer (networks, optimizer state, step) from a checkpoint.
pub fn load_trainer(path: &Path) -> Result<Trainer> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let rest = bytes.strip_prefix(CHECKPOINT_HEADER).ok_or_else(|| bad("missing safepaint-ckpt-v1 header"))?;
    if rest.len() < 8 {
        return Err(bad("truncated metadata length"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(bad("truncated metadata"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&rest[..len])?;
    let mut blob = rest[len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));

    let mut cfg = meta.config;
    cfg.seed = meta.seed;
    let mut t = Trainer::new(cfg)?;
    let expected = sections(&t);
    if expected.len() != meta.sections.len()
        || expected.iter().zip(&meta.sections).any(|((n, d), (mn, ml))| n != mn || d.len() != *ml)
    {
        return Err(bad("parameter layout does not match its configuration"));
    }
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = blob.by_ref().take(n).collect();
        if v.len() == n {
            Ok(v)
        } else {
            Err(bad("truncated tensor data"))
        }
    };
    let steps = meta.optimizer_steps;
    let slots = [
        (&mut t.nets.g1.params, &mut t.opt_g1, steps[0]),
        (&mut t.nets.g2.params, &mut t.opt_g2, steps[1]),
        (&mut t.nets.d.params, &mut t.opt_d, steps[2]),
        (&mut t.nets.p.params, &mut t.opt_p, steps[3]),
    ];
    for (ps, opt, opt_steps) in slots {
        for p in ps.params_mut() {
            p.data = take(p.len())?;
        }
        for b in ps.buffers_mut() {
            b.data = take(b.len())?;
        }
        let lens: Vec<usize> = ps.params().iter().map(|p| p.tensor.len()).collect();
        let m = lens.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
        let v = lens.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
        opt.restore(opt_steps, m, v).map_err(|e| bad(&e))?;
    }
    if blob.next().is_some() {
        return Err(bad("trailing data"));
    }
    t.step = meta.step;
    t.collapse_steps = meta.collapse_steps;
    Ok(t)
}
