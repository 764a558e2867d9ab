use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, AugmentConfig};
use super::eval::evaluate;
use super::loss::{ohem_loss, LossConfig};
use super::optim::{sgd_step, OptimState};
use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::network::{save_checkpoint, Model};
use crate::nn::Session;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Evaluate on the validation set every this many iterations; 0 means
    /// only after the last one.
    pub eval_every: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 4000,
            batch_size: 4,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            eval_every: 1000,
            seed: 0,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be finite and non-negative, got {v}")))
            }
        };
        if self.total_iters == 0 {
            return Err(Error::config("train.total_iters", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        positive("optim.base_lr", self.base_lr)?;
        positive("optim.momentum", self.momentum)?;
        positive("optim.weight_decay", self.weight_decay)?;
        positive("optim.poly_power", self.poly_power)?;
        positive("loss.aux_weight", self.loss.aux_weight)?;
        if let Some(o) = self.loss.ohem {
            if !(o.threshold > 0.0 && o.threshold <= 1.0) {
                return Err(Error::config("loss.ohem_threshold", "must lie in (0, 1]"));
            }
            if o.min_kept == 0 {
                return Err(Error::config("loss.ohem_min_kept", "must be at least 1"));
            }
        }
        self.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub iter: usize,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Total loss (main plus weighted auxiliary) per iteration.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
}

impl TrainReport {
    /// Mean of the last `window` losses.
    pub fn smoothed_loss(&self, window: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(window.max(1))..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn final_eval(&self) -> Option<EvalRecord> {
        self.evals.last().copied()
    }
}

/// Batch order: a fresh permutation of the training set per epoch.
struct Order {
    seed: u64,
    len: usize,
    epoch: usize,
    perm: Vec<usize>,
}

impl Order {
    fn new(seed: u64, len: usize) -> Self {
        let mut o = Order { seed, len, epoch: usize::MAX, perm: Vec::new() };
        o.shuffle(0);
        o
    }

    fn shuffle(&mut self, epoch: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((crate::STREAM_ORDER << 40) | epoch as u64);
        self.perm = (0..self.len).collect();
        self.perm.shuffle(&mut rng);
        self.epoch = epoch;
    }

    fn get(&mut self, position: usize) -> usize {
        let epoch = position / self.len;
        if epoch != self.epoch {
            self.shuffle(epoch);
        }
        self.perm[position % self.len]
    }
}

/// Augmentation stream for the `position`-th sample drawn in the run.
pub fn augment_rng(seed: u64, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((crate::STREAM_AUGMENT << 40) | position as u64);
    rng
}

/// Where [`train`] writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn log(&self) -> PathBuf {
        self.dir.join("train.log")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.act")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.act")
    }
}

fn write_line(log: &mut dyn Write, line: &str, path: &Path) -> Result<()> {
    writeln!(log, "{line}").map_err(|e| Error::io(path, e))
}

/// One optimisation step on `batch`. Returns `(total, aux)` losses.
pub fn train_step(
    model: &mut Model,
    batch: &[SegmentationSample],
    loss_cfg: &LossConfig,
    state: &mut OptimState,
    lr: f64,
) -> Result<(f64, f64)> {
    let images: Vec<Tensor> = batch.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<u8> = batch.iter().flat_map(|s| s.labels.data.iter().copied()).collect();
    let image = Tensor::stack(&images)?;
    let mut tape = Tape::new();
    let grads = {
        let mut s = Session::train(&mut tape, &mut model.params);
        let x = s.tape.constant(image);
        let out = model.net.forward(&mut s, x)?;
        let main = ohem_loss(s.tape.value(out.logits), &labels, loss_cfg)?;
        let mut total = main.loss;
        let mut aux_loss = 0.0;
        let mut seeds = vec![(out.logits, main.grad)];
        if let Some(aux) = out.aux_logits {
            let a = ohem_loss(s.tape.value(aux), &labels, loss_cfg)?;
            aux_loss = a.loss;
            total += loss_cfg.aux_weight * a.loss;
            seeds.push((aux, a.grad.iter().map(|g| g * loss_cfg.aux_weight).collect()));
        }
        if !total.is_finite() {
            return Err(Error::Divergence { iter: state.iter, detail: format!("loss is {total}") });
        }
        s.tape.backward_with(&seeds)?;
        (s.param_grads(), total, aux_loss)
    };
    let (grads, total, aux) = grads;
    sgd_step(&mut model.params, &grads, state, lr)?;
    Ok((total, aux))
}

/// The training loop. Logs `iter lr loss aux_loss` per iteration and
/// `EVAL iter mIoU pixAcc` after each evaluation; when `outputs` is given,
/// writes the log there together with `final.act` and `best.act`.
pub fn train(
    model: &mut Model,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
    echo: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let num_classes = model.config().num_classes;
    for s in train_set.iter().chain(val_set) {
        s.check_labels(num_classes)?;
    }
    let mut file = match outputs {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            Some(std::fs::File::create(o.log()).map_err(|e| Error::io(o.log(), e))?)
        }
        None => None,
    };
    let log_path = outputs.map(|o| o.log()).unwrap_or_default();
    let mut emit = |line: String| -> Result<()> {
        if let Some(f) = file.as_mut() {
            write_line(f, &line, &log_path)?;
        }
        write_line(echo, &line, Path::new("<log>"))
    };

    let mut state = OptimState::new(cfg.base_lr, cfg.total_iters);
    state.momentum = cfg.momentum;
    state.weight_decay = cfg.weight_decay;
    state.power = cfg.poly_power;
    let mut order = Order::new(cfg.seed, train_set.len());
    let mut report = TrainReport::default();

    for it in 0..cfg.total_iters {
        let batch = (0..cfg.batch_size)
            .map(|j| {
                let pos = it * cfg.batch_size + j;
                let sample = &train_set[order.get(pos)];
                augment(sample, &cfg.augment, &mut augment_rng(cfg.seed, pos))
            })
            .collect::<Result<Vec<_>>>()?;
        let lr = state.lr()?;
        let (loss, aux) = train_step(model, &batch, &cfg.loss, &mut state, lr)?;
        report.losses.push(loss);
        emit(format!("{:>6} {lr:.8} {loss:>12.6} {aux:>12.6}", it + 1))?;

        let done = it + 1;
        let due = done == cfg.total_iters || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        if due && !val_set.is_empty() {
            let r = evaluate(model, val_set, num_classes, &[1.0], false)?;
            let rec = EvalRecord { iter: done, miou: r.scores.miou, pixel_accuracy: r.scores.pixel_accuracy };
            emit(format!("EVAL {done:>6} {:.6} {:.6}", rec.miou, rec.pixel_accuracy))?;
            report.evals.push(rec);
            if report.best.is_none_or(|b| rec.miou > b.miou) {
                report.best = Some(rec);
                if let Some(o) = outputs {
                    save_checkpoint(&model.params, &o.best_checkpoint())?;
                }
            }
        }
    }
    if let Some(o) = outputs {
        save_checkpoint(&model.params, &o.final_checkpoint())?;
        if report.best.is_none() {
            save_checkpoint(&model.params, &o.best_checkpoint())?;
        }
    }
    Ok(report)
}
