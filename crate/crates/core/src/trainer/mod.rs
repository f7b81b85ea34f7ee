//! Architecture search, two-stage training of the derived model, and run bookkeeping.

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
pub use config::Config;
pub use optim::{cosine_lr, OptimKind, Optimizer};

use crate::alignment::{FlowEstimator, FlowField, PyramidalFlow, BETA};
use crate::autodiff::Var;
use crate::data::{augment, Flips, FrameWindow, PairedDataset};
use crate::error::{ensure, Error, Result};
use crate::losses::{entropy_reg, entropy_reg_var, task_loss, task_loss_var, LossConfig};
use crate::networks::{Architecture, Fusion, MacroChoice, Model};
use crate::params::{ParamStore, Session, Trainable};
use crate::searchspace::{derive_cell, CellSpec, ALPHA};
use crate::tensor::Tensor;

const STREAM_ORDER: u64 = 1 << 48;
const STREAM_AUGMENT: u64 = 2 << 48;
const STREAM_VAL_ORDER: u64 = 3 << 48;
const STREAM_VAL_AUGMENT: u64 = 4 << 48;

/// One step's losses; `None` renders as `-`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub phase: &'static str,
    pub l_d: Option<f64>,
    pub l_c: Option<f64>,
    pub l_arc: Option<f64>,
    pub l_f: Option<f64>,
    pub lr: f64,
    pub entropy: Option<f64>,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = |v: Option<f64>| v.map_or("-".to_string(), |x| x.to_string());
        write!(
            f,
            "step={} phase={} L_D={} L_C={} L_arc={} L_F={} lr={} entropy={}",
            self.step,
            self.phase,
            o(self.l_d),
            o(self.l_c),
            o(self.l_arc),
            o(self.l_f),
            self.lr,
            o(self.entropy)
        )
    }
}

/// Collects step lines, optionally mirroring them to a file and stderr.
#[derive(Default)]
pub struct Logger {
    lines: Vec<String>,
    file: Option<BufWriter<File>>,
    echo: bool,
}

impl Logger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path, echo: bool) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Logger {
            lines: Vec::new(),
            file: Some(BufWriter::new(f)),
            echo,
        })
    }

    pub fn log(&mut self, line: String) {
        if self.echo {
            eprintln!("{line}");
        }
        if let Some(f) = self.file.as_mut() {
            let _ = writeln!(f, "{line}");
            let _ = f.flush();
        }
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

/// Optional early stop that leaves the schedule untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunControl {
    /// Stop once this many steps of the stage have completed.
    pub halt_after: Option<u64>,
}

#[derive(Clone, Copy, Debug)]
enum Objective {
    /// Each branch against the ground truth.
    Branches,
    /// Dominant branch (plus companion if set) on validation data, plus entropy.
    Arch { companion: bool },
    /// Learned fusion against the ground truth.
    Fused,
}

#[derive(Clone, Debug, Default)]
struct Losses {
    l_d: f64,
    l_c: f64,
    l_arc: f64,
    l_f: f64,
}

struct Prepared {
    win: FrameWindow,
    flows: Vec<Option<FlowField>>,
}

fn sample_pass(
    model: &Model,
    store: &ParamStore,
    trainable: &Trainable,
    p: &Prepared,
    loss: &LossConfig,
    objective: Objective,
) -> Result<(Losses, BTreeMap<String, Tensor>)> {
    let mut s = Session::new(store, trainable.clone());
    let fusion = match objective {
        Objective::Fused => Fusion::Learned,
        _ => Fusion::Half,
    };
    let out = model.full_forward(&mut s, &p.win, &p.flows, fusion)?;
    let gt = p
        .win
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::Argument("training window lacks ground truth".into()))?;
    let y = s.constant(gt.tensor().clone());
    let mut l = Losses::default();
    let total: Var = match objective {
        Objective::Branches => {
            let ld = task_loss_var(&mut s.g, out.dominant, y, loss);
            let lc = task_loss_var(&mut s.g, out.companion, y, loss);
            l.l_d = s.g.scalar(ld);
            l.l_c = s.g.scalar(lc);
            s.g.add(ld, lc)
        }
        Objective::Arch { companion } => {
            let ld = task_loss_var(&mut s.g, out.dominant, y, loss);
            l.l_d = s.g.scalar(ld);
            let mut task = ld;
            if companion {
                let lc = task_loss_var(&mut s.g, out.companion, y, loss);
                l.l_c = s.g.scalar(lc);
                task = s.g.add(ld, lc);
            }
            let a = s.param(ALPHA)?;
            let e = entropy_reg_var(&mut s.g, a);
            let e = s.g.scale(e, loss.eta);
            let arc = s.g.add(task, e);
            l.l_arc = s.g.scalar(arc);
            arc
        }
        Objective::Fused => {
            let lf = task_loss_var(&mut s.g, out.fused, y, loss);
            l.l_f = s.g.scalar(lf);
            lf
        }
    };
    Ok((l, s.gradients(total)))
}

/// Batch-mean losses and gradients; samples are reduced in order, so the result
/// does not depend on how many threads ran the passes.
fn batch_pass(
    model: &Model,
    store: &ParamStore,
    trainable: &Trainable,
    batch: &[Prepared],
    loss: &LossConfig,
    objective: Objective,
) -> Result<(Losses, BTreeMap<String, Tensor>)> {
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        batch
            .par_iter()
            .map(|p| sample_pass(model, store, trainable, p, loss, objective))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = batch
        .iter()
        .map(|p| sample_pass(model, store, trainable, p, loss, objective))
        .collect();
    let n = batch.len() as f64;
    let mut mean = Losses::default();
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in results {
        let (l, g) = r?;
        mean.l_d += l.l_d / n;
        mean.l_c += l.l_c / n;
        mean.l_arc += l.l_arc / n;
        mean.l_f += l.l_f / n;
        for (k, v) in g {
            match grads.get_mut(&k) {
                Some(acc) => acc.add_assign(&v),
                None => {
                    grads.insert(k, v);
                }
            }
        }
    }
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    Ok((mean, grads))
}

fn shuffled(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

struct Batcher<'a> {
    data: &'a PairedDataset,
    samples: Vec<(usize, usize)>,
    batch: usize,
    crop: usize,
    flips: Flips,
    frames: usize,
    seed: u64,
}

impl Batcher<'_> {
    fn steps_per_epoch(&self, cap: usize) -> usize {
        let n = self.samples.len().div_ceil(self.batch);
        if cap > 0 {
            n.min(cap)
        } else {
            n
        }
    }

    /// Windows of batch `pos` in epoch `epoch`, augmented with seeds drawn from `aug_stream`.
    fn batch(
        &self,
        model: &Model,
        est: &dyn FlowEstimator,
        epoch: usize,
        pos: usize,
        order_stream: u64,
        aug_stream: u64,
    ) -> Result<Vec<Prepared>> {
        let order = shuffled(self.samples.len(), self.seed, order_stream + epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(aug_stream + (epoch * 100_000 + pos) as u64);
        let lo = pos * self.batch;
        let hi = (lo + self.batch).min(order.len());
        order[lo..hi]
            .iter()
            .map(|&i| {
                let win = self.data.window(self.samples[i], self.frames)?;
                let win = augment(&win, self.crop, self.flips, rng.next_u64())?;
                let flows = model.flows(&win, est)?;
                Ok(Prepared { win, flows })
            })
            .collect()
    }
}

fn batcher<'a>(cfg: &Config, data: &'a PairedDataset, batch: usize, crop: usize) -> Result<Batcher<'a>> {
    ensure!(!data.is_empty(), Config, "dataset split is empty");
    let min_side = data.rainy.iter().map(|s| s.height().min(s.width())).min().unwrap();
    ensure!(
        crop <= min_side,
        Config,
        "crop {crop} exceeds the smallest frame side {min_side}"
    );
    Ok(Batcher {
        data,
        samples: data.samples(),
        batch,
        crop,
        flips: Flips {
            horizontal: cfg.data.flips,
            vertical: cfg.data.flips,
        },
        frames: cfg.data.frames,
        seed: cfg.seed,
    })
}

fn scheduled_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    cosine_lr(step, total.saturating_sub(1), lr0, lr_min)
}

fn alpha_entropy(store: &ParamStore) -> Option<f64> {
    store.get(ALPHA).ok().and_then(|a| entropy_reg(a).ok())
}

fn save_into(out: Option<&Path>, name: &str, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(ckpt, &dir.join(name))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub cell: CellSpec,
    pub align: MacroChoice,
    pub checkpoint: Checkpoint,
}

/// Alternating first-order search: each epoch runs weight steps over the
/// training split, then (after the warm start) architecture steps over the
/// validation split. Fusion stays at equal weights throughout.
pub fn run_search(
    cfg: &Config,
    train: &PairedDataset,
    val: &PairedDataset,
    out: Option<&Path>,
    log: &mut Logger,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    ensure!(!train.is_empty() && !val.is_empty(), Config, "search needs non-empty train and validation splits");
    let model = cfg.relaxed_model()?;
    let mut store = model.init_params(cfg.seed)?;
    let est = PyramidalFlow {
        config: cfg.flow.clone(),
    };
    let sc = &cfg.search;
    let tb = batcher(cfg, train, sc.batch, sc.crop)?;
    let vb = batcher(cfg, val, sc.batch, sc.crop)?;
    let (tspe, vspe) = (tb.steps_per_epoch(sc.max_batches), vb.steps_per_epoch(sc.max_batches));
    let total = sc.epochs * tspe;
    let mut wopt = Optimizer::new(OptimKind::Sgd { momentum: sc.momentum });
    let mut aopt = Optimizer::new(OptimKind::Sgd { momentum: 0.0 });
    let weights = Trainable::except(&["arch.", "aas."]);
    let arch = Trainable::prefixes(&["arch."]);
    let mut step = 0u64;
    let mut wstep = 0usize;
    let mut ckpt = Checkpoint {
        config: cfg.clone(),
        arch: Architecture::Relaxed,
        stage: Stage::Search,
        step: 0,
        epoch: 0,
        params: store.clone(),
        optimizers: BTreeMap::new(),
    };
    for epoch in 0..sc.epochs {
        for pos in 0..tspe {
            let lr = scheduled_lr(wstep, total, sc.lr0, sc.lr_min)?;
            let batch = tb.batch(&model, &est, epoch, pos, STREAM_ORDER, STREAM_AUGMENT)?;
            let (l, g) = batch_pass(&model, &store, &weights, &batch, &cfg.loss, Objective::Branches)?;
            wopt.step(&mut store, &g, lr)?;
            step += 1;
            wstep += 1;
            log.log(
                StepRecord {
                    step,
                    phase: "weights",
                    l_d: Some(l.l_d),
                    l_c: Some(l.l_c),
                    l_arc: None,
                    l_f: None,
                    lr,
                    entropy: alpha_entropy(&store),
                }
                .to_string(),
            );
        }
        if epoch >= sc.warm_start_epochs {
            for pos in 0..vspe {
                let batch = vb.batch(&model, &est, epoch, pos, STREAM_VAL_ORDER, STREAM_VAL_AUGMENT)?;
                let objective = Objective::Arch {
                    companion: sc.with_companion,
                };
                let (l, g) = batch_pass(&model, &store, &arch, &batch, &cfg.loss, objective)?;
                aopt.step(&mut store, &g, sc.arch_lr)?;
                step += 1;
                log.log(
                    StepRecord {
                        step,
                        phase: "arch",
                        l_d: Some(l.l_d),
                        l_c: sc.with_companion.then_some(l.l_c),
                        l_arc: Some(l.l_arc),
                        l_f: None,
                        lr: sc.arch_lr,
                        entropy: alpha_entropy(&store),
                    }
                    .to_string(),
                );
            }
        }
        ckpt.step = step;
        ckpt.epoch = epoch as u64 + 1;
        ckpt.params = store.clone();
        ckpt.optimizers = BTreeMap::from([("weights".to_string(), wopt.clone()), ("arch".to_string(), aopt.clone())]);
        save_into(out, "search", &ckpt)?;
    }
    ckpt.params = store.clone();
    let alpha = store.get(ALPHA)?.clone();
    let beta = store.get(BETA)?.clone();
    Ok(SearchOutcome {
        cell: derive_cell(&alpha)?,
        align: MacroChoice::derive(&beta)?,
        alpha,
        beta,
        checkpoint: ckpt,
    })
}

/// Stage one: both branches of the derived model trained against the ground
/// truth with Adam and a cosine schedule. Fusion weights stay untouched.
pub fn run_train(
    cfg: &Config,
    cell: CellSpec,
    align: MacroChoice,
    data: &PairedDataset,
    resume: Option<Checkpoint>,
    control: RunControl,
    out: Option<&Path>,
    log: &mut Logger,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let arch = Architecture::Discrete { cell, align };
    let model = Model::new(cfg.model_config(), arch.clone())?;
    let tc = &cfg.train;
    let b = batcher(cfg, data, tc.batch, cfg.data.crop)?;
    let spe = b.steps_per_epoch(0);
    let mut total = tc.epochs * spe;
    if tc.max_steps > 0 {
        total = total.min(tc.max_steps);
    }
    let (mut store, mut opt, start) = match resume {
        Some(c) => {
            ensure!(
                c.stage == Stage::Train && c.arch == arch,
                Config,
                "checkpoint is not a training run of this architecture"
            );
            ensure!(
                c.config.hash() == cfg.hash(),
                Config,
                "checkpoint configuration differs from the requested run"
            );
            model.check_params(&c.params)?;
            let opt = c
                .optimizers
                .get("weights")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint lacks optimizer state".into()))?;
            (c.params, opt, c.step as usize)
        }
        None => (model.init_params(cfg.seed)?, Optimizer::new(OptimKind::adam()), 0),
    };
    let est = PyramidalFlow {
        config: cfg.flow.clone(),
    };
    let trainable = Trainable::except(&["aas.", "arch."]);
    let make = |store: &ParamStore, opt: &Optimizer, step: usize| Checkpoint {
        config: cfg.clone(),
        arch: arch.clone(),
        stage: Stage::Train,
        step: step as u64,
        epoch: (step / spe.max(1)) as u64,
        params: store.clone(),
        optimizers: BTreeMap::from([("weights".to_string(), opt.clone())]),
    };
    let mut done = start;
    for k in start..total {
        if control.halt_after.is_some_and(|h| k as u64 >= h) {
            if k > start && k % spe != 0 {
                save_into(out, "checkpoint", &make(&store, &opt, k))?;
            }
            break;
        }
        let (epoch, pos) = (k / spe, k % spe);
        let lr = scheduled_lr(k, total, tc.lr0, tc.lr_min)?;
        let batch = b.batch(&model, &est, epoch, pos, STREAM_ORDER, STREAM_AUGMENT)?;
        let (l, g) = batch_pass(&model, &store, &trainable, &batch, &cfg.loss, Objective::Branches)?;
        opt.step(&mut store, &g, lr)?;
        log.log(
            StepRecord {
                step: k as u64 + 1,
                phase: "train",
                l_d: Some(l.l_d),
                l_c: Some(l.l_c),
                l_arc: None,
                l_f: None,
                lr,
                entropy: None,
            }
            .to_string(),
        );
        done = k + 1;
        if pos + 1 == spe || k + 1 == total {
            save_into(out, "checkpoint", &make(&store, &opt, done))?;
        }
    }
    Ok(make(&store, &opt, done))
}

/// Stage two: only the fusion weights are trained, on the fused output.
pub fn run_finetune_aas(
    cfg: &Config,
    ckpt: &Checkpoint,
    data: &PairedDataset,
    out: Option<&Path>,
    log: &mut Logger,
) -> Result<Checkpoint> {
    cfg.validate()?;
    ensure!(
        matches!(ckpt.arch, Architecture::Discrete { .. }),
        Config,
        "fusion fine-tuning needs a derived (discrete) checkpoint"
    );
    let model = Model::new(ckpt.config.model_config(), ckpt.arch.clone())?;
    model.check_params(&ckpt.params)?;
    let ac = &cfg.aas;
    let b = batcher(cfg, data, ac.batch, cfg.data.crop)?;
    let spe = b.steps_per_epoch(0);
    let mut total = ac.epochs * spe;
    if ac.max_steps > 0 {
        total = total.min(ac.max_steps);
    }
    let est = PyramidalFlow {
        config: ckpt.config.flow.clone(),
    };
    let trainable = Trainable::prefixes(&["aas."]);
    let mut store = ckpt.params.clone();
    let mut opt = Optimizer::new(OptimKind::adam());
    let mut result = Checkpoint {
        config: ckpt.config.clone(),
        arch: ckpt.arch.clone(),
        stage: Stage::Finetune,
        step: 0,
        epoch: 0,
        params: store.clone(),
        optimizers: BTreeMap::new(),
    };
    for k in 0..total {
        let (epoch, pos) = (k / spe, k % spe);
        let batch = b.batch(&model, &est, epoch, pos, STREAM_ORDER, STREAM_AUGMENT)?;
        let (l, g) = batch_pass(&model, &store, &trainable, &batch, &cfg.loss, Objective::Fused)?;
        opt.step(&mut store, &g, ac.lr)?;
        log.log(
            StepRecord {
                step: k as u64 + 1,
                phase: "aas",
                l_d: None,
                l_c: None,
                l_arc: None,
                l_f: Some(l.l_f),
                lr: ac.lr,
                entropy: None,
            }
            .to_string(),
        );
        if pos + 1 == spe || k + 1 == total {
            result.step = k as u64 + 1;
            result.epoch = (epoch + 1) as u64;
            result.params = store.clone();
            result.optimizers = BTreeMap::from([("aas".to_string(), opt.clone())]);
            save_into(out, "finetuned", &result)?;
        }
    }
    result.params = store;
    Ok(result)
}

/// Mean losses over every full-frame window of a dataset, without augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetLosses {
    pub dominant: f64,
    pub companion: f64,
    /// Learned fusion.
    pub fused: f64,
    /// Equal-weight fusion.
    pub half: f64,
}

pub fn dataset_losses(
    model: &Model,
    store: &ParamStore,
    data: &PairedDataset,
    loss: &LossConfig,
    est: &dyn FlowEstimator,
) -> Result<DatasetLosses> {
    let samples = data.samples();
    ensure!(!samples.is_empty(), Config, "dataset is empty");
    let per_sample = |&sample: &(usize, usize)| -> Result<[f64; 4]> {
        let win = data.window(sample, model.config.frames)?;
        let flows = model.flows(&win, est)?;
        let mut s = Session::new(store, Trainable::None);
        let o = model.full_forward(&mut s, &win, &flows, Fusion::Learned)?;
        let gt = vec![win.ground_truth.as_ref().unwrap().tensor().clone()];
        let d = s.g.value(o.dominant).clone();
        let c = s.g.value(o.companion).clone();
        let half = d.zip_map(&c, |a, b| 0.5 * a + 0.5 * b);
        Ok([
            task_loss(&[d], &gt, loss)?,
            task_loss(&[c], &gt, loss)?,
            task_loss(&[s.g.value(o.fused).clone()], &gt, loss)?,
            task_loss(&[half], &gt, loss)?,
        ])
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Result<[f64; 4]>> = {
        use rayon::prelude::*;
        samples.par_iter().map(per_sample).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Result<[f64; 4]>> = samples.iter().map(per_sample).collect();
    let mut acc = [0.0; 4];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r?) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    Ok(DatasetLosses {
        dominant: acc[0] / n,
        companion: acc[1] / n,
        fused: acc[2] / n,
        half: acc[3] / n,
    })
}

/// Parses one log line back into its fields.
pub fn parse_log_line(line: &str) -> Result<BTreeMap<String, String>> {
    line.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("bad log token `{tok}`")))
        })
        .collect()
}
