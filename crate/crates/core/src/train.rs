//! Training, evaluation and inference over a [`RunConfig`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::synth::synth_generate;
use crate::data::transform::{augment, crop, patch_corners, preprocess_organ, standardize};
use crate::data::{collate, load_manifest, Mode, Sample, Split};
use crate::error::{Error, Result};
use crate::loss::{channel_last, segmentation_loss, LossWeights};
use crate::metrics::{dice_score, EvalReport, Evaluator};
use crate::model::Mcpa;
use crate::nn::{Ctx, ParamStore};
use crate::optim::Optimizer;
use crate::pdbs::{dual_forward, fuse_probs, fused_labels, schedule_f, total_loss_with, DualBranch, Fusion};
use crate::tensor::{Scalar, Tape, Tensor};

/// Stream of the run seed used for parameter initialization; data sampling
/// uses stream 1.
const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;

pub const METRICS_COLUMNS: [&str; 11] = ["epoch", "steps", "lr", "loss", "seg_main", "seg_fine", "pr", "pr_raw", "f_e", "train_dice", "val_dice"];

#[derive(Clone, Debug)]
pub enum Network {
    Single(Mcpa),
    Dual(DualBranch),
}

/// A network with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: RunConfig,
    pub net: Network,
    pub store: ParamStore<T>,
}

/// Per-pixel class probabilities `[H, W, K]` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredMaps {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub main: Vec<f64>,
    pub fine: Option<Vec<f64>>,
    pub fused: Vec<f64>,
    pub labels: Vec<u8>,
}

impl PredMaps {
    pub fn main_labels(&self) -> Vec<u8> {
        argmax(&self.main, self.k)
    }

    pub fn fine_labels(&self) -> Option<Vec<u8>> {
        self.fine.as_ref().map(|f| argmax(f, self.k))
    }

    /// Foreground probability `1 - p(background)` of a `[H, W, K]` map.
    pub fn foreground(map: &[f64], k: usize) -> Vec<f64> {
        map.chunks(k).map(|c| 1.0 - c[0]).collect()
    }
}

fn argmax(p: &[f64], k: usize) -> Vec<u8> {
    p.chunks(k).map(|c| c.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0 as u8).collect()
}

/// Mean Dice over foreground classes `1..k`.
pub fn mean_dice(pred: &[u8], gt: &[u8], k: usize) -> f64 {
    (1..k).map(|c| dice_score(pred, gt, c as u8)).sum::<f64>() / (k - 1) as f64
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let net = if cfg.schedule.enabled {
            Network::Dual(DualBranch::new(&mut store, &mut rng, &cfg.model)?)
        } else {
            Network::Single(Mcpa::new(&mut store, &mut rng, "", &cfg.model)?)
        };
        Ok(Self { cfg: cfg.clone(), net, store })
    }

    pub fn k(&self) -> usize {
        self.cfg.model.num_classes
    }

    /// Class probabilities `[N, H, W, K]` of both branches, without
    /// recording gradients.
    pub fn infer(&self, images: &Tensor<T>) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, &self.store);
        let to_vec = |t: &Tensor<T>| t.data().iter().map(|v| v.f64()).collect::<Vec<f64>>();
        match &self.net {
            Network::Single(m) => {
                let p = channel_last(&m.forward(&ctx, &ctx.input(images.clone()))?)?.softmax()?;
                Ok((to_vec(&p.value()), None))
            }
            Network::Dual(d) => {
                let out = dual_forward(d, &ctx, images, self.cfg.schedule.k)?;
                Ok((to_vec(&out.probs1.value()), Some(to_vec(&out.probs2.value()))))
            }
        }
    }

    /// Probabilities for one preprocessed sample. Vessel mode tiles the
    /// image with overlapping patches and averages; inputs whose size the
    /// network cannot take are zero-padded and the result cropped.
    pub fn predict(&self, s: &Sample) -> Result<PredMaps> {
        let k = self.k();
        let (main, fine) = match self.cfg.data.mode {
            Mode::Organ => self.predict_padded(s)?,
            Mode::Vessel => self.predict_tiled(s)?,
        };
        let fusion = if fine.is_some() { self.cfg.schedule.fusion } else { Fusion::Main };
        let other = fine.as_ref().unwrap_or(&main);
        let fused = fuse_probs(&main, other, fusion);
        let labels = fused_labels(&main, other, k, fusion);
        Ok(PredMaps { h: s.h, w: s.w, k, main, fine, fused, labels })
    }

    fn predict_padded(&self, s: &Sample) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let d = self.cfg.model.divisor();
        let (ph, pw) = (s.h.div_ceil(d) * d, s.w.div_ceil(d) * d);
        if (ph, pw) == (s.h, s.w) {
            let b = collate::<T>(std::slice::from_ref(s))?;
            return self.infer(&b.images);
        }
        log::info!("padding {}x{} input to {ph}x{pw}; output is cropped back", s.h, s.w);
        let padded = pad(s, ph, pw);
        let (m, f) = self.infer(&collate::<T>(&[padded])?.images)?;
        let k = self.k();
        let cut = |v: Vec<f64>| -> Vec<f64> { (0..s.h).flat_map(|y| v[y * pw * k..(y * pw + s.w) * k].to_vec()).collect() };
        Ok((cut(m), f.map(cut)))
    }

    fn predict_tiled(&self, s: &Sample) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let p = self.cfg.data.patch_size;
        let (h, w) = (s.h.max(p), s.w.max(p));
        let src = if (h, w) != (s.h, s.w) {
            log::info!("padding {}x{} input to {h}x{w} for {p}x{p} tiles", s.h, s.w);
            pad(s, h, w)
        } else {
            s.clone()
        };
        let stride = self.cfg.data.tile_stride;
        let starts = |n: usize| {
            let mut v: Vec<usize> = (0..=n - p).step_by(stride).collect();
            if *v.last().expect("at least one tile") != n - p {
                v.push(n - p);
            }
            v
        };
        let k = self.k();
        let mut main = vec![0.0; h * w * k];
        let mut fine: Option<Vec<f64>> = None;
        let mut count = vec![0.0; h * w];
        for &y in &starts(h) {
            for &x in &starts(w) {
                let tile = crop(&src, y, x, p);
                let (m, f) = self.infer(&collate::<T>(&[tile])?.images)?;
                for ty in 0..p {
                    for tx in 0..p {
                        let o = (y + ty) * w + x + tx;
                        let t = ty * p + tx;
                        count[o] += 1.0;
                        for c in 0..k {
                            main[o * k + c] += m[t * k + c];
                        }
                        if let Some(f) = &f {
                            let acc = fine.get_or_insert_with(|| vec![0.0; h * w * k]);
                            for c in 0..k {
                                acc[o * k + c] += f[t * k + c];
                            }
                        }
                    }
                }
            }
        }
        let finish = |mut v: Vec<f64>| -> Vec<f64> {
            for (o, n) in count.iter().enumerate() {
                for c in 0..k {
                    v[o * k + c] /= n;
                }
            }
            (0..s.h).flat_map(|yy| v[yy * w * k..(yy * w + s.w) * k].to_vec()).collect()
        };
        Ok((finish(main), fine.map(finish)))
    }

    /// Reports on `samples`: `fused`, plus `main` and `fine` for the
    /// dual-branch network.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<Vec<(String, EvalReport)>> {
        let k = self.k();
        let dual = matches!(self.net, Network::Dual(_));
        let mut evs = vec![Evaluator::new(k); if dual { 3 } else { 1 }];
        for s in samples {
            let p = self.predict(s)?;
            let prob = |m: &[f64]| if k == 2 { Some(PredMaps::foreground(m, k)) } else { None };
            let fp = prob(&p.fused);
            evs[0].add(&p.labels, &s.mask, s.h, s.w, fp.as_deref())?;
            if dual {
                let mp = prob(&p.main);
                evs[1].add(&p.main_labels(), &s.mask, s.h, s.w, mp.as_deref())?;
                let fine = p.fine.as_ref().expect("dual network has a fine map");
                let fp = prob(fine);
                evs[2].add(&p.fine_labels().expect("dual"), &s.mask, s.h, s.w, fp.as_deref())?;
            }
        }
        let names = ["fused", "main", "fine"];
        Ok(evs.iter().enumerate().map(|(i, e)| (names[i].to_string(), e.report())).collect())
    }
}

fn pad(s: &Sample, h: usize, w: usize) -> Sample {
    let mut image = vec![0.0; 3 * h * w];
    let mut mask = vec![0; h * w];
    for c in 0..3 {
        let src = s.channel(c);
        for y in 0..s.h {
            image[c * h * w + y * w..c * h * w + y * w + s.w].copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
        }
    }
    for y in 0..s.h {
        mask[y * w..y * w + s.w].copy_from_slice(&s.mask[y * s.w..(y + 1) * s.w]);
    }
    Sample { h, w, image, mask }
}

/// Loads (or synthesizes under `out_dir/synth`) and preprocesses a split.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let d = &cfg.data;
    let k = cfg.model.num_classes;
    let manifest = match &d.root {
        Some(root) => load_manifest(root, split, d.mode, k)?,
        None => {
            let (name, seed, count) = match split {
                Split::Train => ("train", d.synth.seed, d.synth.count),
                Split::Val => ("val", d.synth.seed.wrapping_add(1), (d.synth.count / 4).max(2)),
                Split::Test => ("test", d.synth.seed.wrapping_add(2), (d.synth.count / 4).max(2)),
            };
            let root = cfg.run.out_dir.join("synth").join(name);
            let m = synth_generate(&root, d.mode, count, seed, d.synth.size)?;
            load_manifest(&m.root, Split::Train, d.mode, k)?
        }
    };
    manifest
        .load_all()?
        .into_iter()
        .map(|s| {
            Ok(match d.mode {
                Mode::Organ => preprocess_organ(&s, d.image_size),
                Mode::Vessel => {
                    if s.h < d.patch_size || s.w < d.patch_size {
                        return Err(Error::data(format!("{}x{} image is smaller than the {} patch", s.h, s.w, d.patch_size)));
                    }
                    let mut s = s;
                    standardize(&mut s);
                    s
                }
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub seg_main: f64,
    pub seg_fine: f64,
    pub pr: f64,
    pub pr_raw: f64,
    pub f_e: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: u64,
    pub steps: usize,
    pub lr: f64,
    pub mean: StepStats,
    pub val_dice: Option<f64>,
}

impl EpochRow {
    pub fn record(&self) -> Vec<String> {
        let m = &self.mean;
        let mut r: Vec<String> = vec![self.epoch.to_string(), self.steps.to_string()];
        r.extend([self.lr, m.loss, m.seg_main, m.seg_fine, m.pr, m.pr_raw, m.f_e, m.dice].iter().map(|v| format!("{v:e}")));
        r.push(self.val_dice.map_or(String::new(), |v| format!("{v:e}")));
        r
    }
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub opt: Optimizer<T>,
    pub rng: ChaCha8Rng,
    /// Epochs completed.
    pub epoch: u64,
    pub step: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &RunConfig, train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::data("no training samples"));
        }
        let model = Model::new(cfg)?;
        let opt = Optimizer::new(&cfg.optimizer, model.store.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Self { model, opt, rng, epoch: 0, step: 0, train, val })
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.model.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::capture(&self.cfg().hash(), self.epoch, self.step, &self.model.store, &self.opt.state, &self.rng)
    }

    /// Restores parameters, optimizer state, counters and the data stream.
    pub fn restore(&mut self, c: &Checkpoint<T>) -> Result<()> {
        if c.config_hash != self.cfg().hash() {
            log::warn!("checkpoint was written under a different configuration");
        }
        c.apply(&mut self.model.store)?;
        if c.optimizer.kind != self.opt.cfg.kind || c.optimizer.slots.iter().any(|s| s.len() != self.model.store.len()) {
            return Err(Error::Checkpoint("optimizer state does not match the configured optimizer".into()));
        }
        self.opt.state = c.optimizer.clone();
        self.rng = c.rng.restore();
        self.epoch = c.epoch;
        self.step = c.step;
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        let c = self.cfg();
        c.optimizer.steps_per_epoch.unwrap_or_else(|| match c.data.mode {
            Mode::Organ => self.train.len().div_ceil(c.optimizer.batch),
            Mode::Vessel => c.data.patches_per_epoch.div_ceil(c.optimizer.batch).max(1),
        })
    }

    /// The samples of every step of the next epoch, drawn from the data
    /// stream.
    pub fn epoch_batches(&mut self) -> Result<Vec<Vec<Sample>>> {
        let steps = self.steps_per_epoch();
        let d = self.model.cfg.data.clone();
        let batch = self.model.cfg.optimizer.batch;
        let mut out = Vec::with_capacity(steps);
        match d.mode {
            Mode::Organ => {
                let mut order: Vec<usize> = (0..self.train.len()).collect();
                for s in 0..steps {
                    let start = (s * batch) % self.train.len();
                    if start == 0 {
                        order.shuffle(&mut self.rng);
                    }
                    let idx: Vec<usize> = (0..batch.min(self.train.len())).map(|j| order[(start + j) % order.len()]).collect();
                    out.push(idx.iter().map(|&i| augment(&self.train[i], &mut self.rng, &d.augment)).collect());
                }
            }
            Mode::Vessel => {
                for _ in 0..steps {
                    let mut b = Vec::with_capacity(batch);
                    for _ in 0..batch {
                        let img = &self.train[self.rng.gen_range(0..self.train.len())];
                        let (y, x) = patch_corners(img.h, img.w, d.patch_size, 1, &mut self.rng)?[0];
                        b.push(augment(&crop(img, y, x, d.patch_size), &mut self.rng, &d.augment));
                    }
                    out.push(b);
                }
            }
        }
        Ok(out)
    }

    /// Loss of one batch at epoch `e` without updating anything.
    pub fn batch_loss(&self, samples: &[Sample], e: f64) -> Result<StepStats> {
        self.forward_backward(samples, e, false).map(|(s, _)| s)
    }

    fn forward_backward(&self, samples: &[Sample], e: f64, grads: bool) -> Result<(StepStats, Vec<Option<Tensor<T>>>)> {
        let cfg = &self.model.cfg;
        let b = collate::<T>(samples)?;
        let k = cfg.model.num_classes;
        b.labels.check_classes(k)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.model.store);
        let sp = cfg.schedule.params();
        let w = LossWeights { lambda: sp.lambda, ..LossWeights::default() };
        let dual = matches!(self.model.net, Network::Dual(_));
        let mut st = StepStats { f_e: if dual { schedule_f(e, &sp) } else { 0.0 }, ..StepStats::default() };
        let loss = match &self.model.net {
            Network::Single(m) => {
                let logits = m.forward(&ctx, &ctx.input(b.images.clone()))?;
                let l = segmentation_loss(&logits, &b.labels, &w)?.total;
                let p: Vec<f64> = channel_last(&logits)?.softmax()?.value().data().iter().map(|v| v.f64()).collect();
                st.seg_main = l.value().item().f64();
                st.dice = mean_dice(&argmax(&p, k), &b.labels.data, k);
                l
            }
            Network::Dual(d) => {
                let out = dual_forward(d, &ctx, &b.images, sp.k)?;
                let supervise_fine = !(cfg.schedule.freeze_fine_until_e0 && e <= sp.e0);
                let t = total_loss_with(&out, &b.labels, e, &sp, &w, supervise_fine)?;
                st.seg_main = t.seg1.value().item().f64();
                st.seg_fine = t.seg2.value().item().f64();
                st.pr = t.pr.value().item().f64();
                st.pr_raw = t.pr_raw.value().item().f64();
                let v = |x: &crate::tensor::Var<'_, T>| x.value().data().iter().map(|v| v.f64()).collect::<Vec<f64>>();
                let labels = fused_labels(&v(&out.probs1), &v(&out.probs2), k, cfg.schedule.fusion);
                st.dice = mean_dice(&labels, &b.labels.data, k);
                t.total
            }
        };
        st.loss = loss.value().item().f64();
        if !grads {
            return Ok((st, Vec::new()));
        }
        if !st.loss.is_finite() {
            return Err(Error::Diverged { epoch: self.epoch as usize, step: self.step as usize, loss: st.loss });
        }
        tape.backward(loss)?;
        Ok((st, ctx.grads()))
    }

    /// One optimizer step on `samples` at epoch `e`.
    pub fn train_step(&mut self, samples: &[Sample], e: f64) -> Result<StepStats> {
        let (st, grads) = self.forward_backward(samples, e, true)?;
        let total = self.model.cfg.optimizer.epochs as u64 * self.steps_per_epoch() as u64;
        let lr = self.opt.lr_at(self.step, total);
        self.opt.step(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        Ok(st)
    }

    /// Trains one epoch and validates when the cadence says so.
    pub fn run_epoch(&mut self) -> Result<EpochRow> {
        let e = self.epoch;
        let total = self.model.cfg.optimizer.epochs as u64 * self.steps_per_epoch() as u64;
        let lr = self.opt.lr_at(self.step, total);
        let batches = self.epoch_batches()?;
        let mut sum = StepStats::default();
        for b in &batches {
            let s = self.train_step(b, e as f64)?;
            sum.loss += s.loss;
            sum.seg_main += s.seg_main;
            sum.seg_fine += s.seg_fine;
            sum.pr += s.pr;
            sum.pr_raw += s.pr_raw;
            sum.dice += s.dice;
            sum.f_e = s.f_e;
        }
        let n = batches.len() as f64;
        let mean = StepStats {
            loss: sum.loss / n,
            seg_main: sum.seg_main / n,
            seg_fine: sum.seg_fine / n,
            pr: sum.pr / n,
            pr_raw: sum.pr_raw / n,
            f_e: sum.f_e,
            dice: sum.dice / n,
        };
        self.epoch += 1;
        let every = self.model.cfg.run.val_every;
        let last = self.epoch == self.model.cfg.optimizer.epochs as u64;
        let val_dice = if !self.val.is_empty() && every > 0 && (self.epoch % every as u64 == 0 || last) {
            let r = self.model.evaluate(&self.val)?;
            Some(r[0].1.mean_dice / 100.0)
        } else {
            None
        };
        Ok(EpochRow { epoch: e, steps: batches.len(), lr, mean, val_dice })
    }

    /// Runs the remaining epochs, appending rows to `metrics` and saving
    /// checkpoints into `ckpt_dir` at the configured cadence and at the end.
    pub fn fit<W: Write>(&mut self, metrics: &mut csv::Writer<W>, ckpt_dir: Option<&Path>) -> Result<Vec<EpochRow>> {
        let io = |e: csv::Error| Error::data(format!("writing metrics: {e}"));
        let epochs = self.model.cfg.optimizer.epochs as u64;
        let every = self.model.cfg.run.checkpoint_every as u64;
        let mut rows = Vec::new();
        while self.epoch < epochs {
            let row = self.run_epoch()?;
            log::info!("epoch {} loss {:.5} dice {:.4} f(E) {:.4}", row.epoch, row.mean.loss, row.mean.dice, row.mean.f_e);
            metrics.write_record(row.record()).map_err(io)?;
            metrics.flush().map_err(|e| Error::data(format!("writing metrics: {e}")))?;
            if let Some(dir) = ckpt_dir {
                if (every > 0 && self.epoch % every == 0) || self.epoch == epochs {
                    self.checkpoint().save(&dir.join(format!("epoch_{:04}.ckpt", self.epoch)))?;
                }
                if self.epoch == epochs {
                    self.checkpoint().save(&dir.join("last.ckpt"))?;
                }
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Paths a training run writes, all under the output directory.
pub struct RunPaths {
    pub out: PathBuf,
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
}

impl RunPaths {
    pub fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf(), config: out.join("config.resolved.toml"), metrics: out.join("metrics.csv"), checkpoints: out.join("checkpoints") }
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.checkpoints).map_err(|e| Error::io(&self.checkpoints, e))
    }
}

/// Full training run: resolved config dump, metrics CSV and checkpoints
/// under `cfg.run.out_dir`. Resumes from `resume` when given.
pub fn train_run<T: Scalar>(cfg: &RunConfig, resume: Option<&Path>) -> Result<Trainer<T>> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.run.out_dir);
    paths.create()?;
    fs::write(&paths.config, cfg.dump()).map_err(|e| Error::io(&paths.config, e))?;
    let train = load_split(cfg, Split::Train)?;
    let val = if cfg.run.val_every > 0 { load_split(cfg, Split::Val)? } else { Vec::new() };
    let mut t = Trainer::<T>::new(cfg, train, val)?;
    let file = match resume {
        Some(p) => {
            t.restore(&Checkpoint::load(p)?)?;
            fs::OpenOptions::new().append(true).create(true).open(&paths.metrics)
        }
        None => fs::File::create(&paths.metrics),
    }
    .map_err(|e| Error::io(&paths.metrics, e))?;
    let fresh = resume.is_none();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(METRICS_COLUMNS).map_err(|e| Error::data(format!("writing metrics: {e}")))?;
    }
    t.fit(&mut w, Some(&paths.checkpoints))?;
    Ok(t)
}

/// Parameters and configuration from a checkpoint written under `cfg`.
pub fn load_model<T: Scalar>(cfg: &RunConfig, ckpt: &Path) -> Result<Model<T>> {
    let mut m = Model::new(cfg)?;
    let c = Checkpoint::<T>::load(ckpt)?;
    c.apply(&mut m.store)?;
    Ok(m)
}
