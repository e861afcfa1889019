//! Multi-stage heatmap regression, PCK evaluation and reporting.

mod eval;
mod gradcheck;
mod report;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::write_file;
use crate::datakit::{render_labels, RenderParams, Sample};
use crate::error::{Error, Result};
use crate::model::{MultiFormer, Preset};
use crate::msfn::{AttentionMode, PoseHeatmaps};
use crate::numerics::checkpoint::Checkpoint;
use crate::numerics::nn::apply_bn_updates;
use crate::numerics::optim::{OptimizerKind, OptimizerState, StepDecay};
use crate::numerics::{lit, Mode, Real, Tape, Tensor, Var};
use crate::skeleton::{PAF_CHANNELS, PCM_CHANNELS};

pub use eval::{
    evaluate, match_persons, pck_counts, predict, EvalConfig, EvalReport, Normalizer, PckCounts, Pose, StageSummary,
};
pub use gradcheck::check_model_gradients;
pub use report::{parameter_report, ParamReport, REFERENCE_PARAMS};

/// Σ over stages of the squared PCM and PAF residuals.
pub fn loss_total<'a, T: Real>(
    tape: &mut Tape<'_, T>,
    stages: impl IntoIterator<Item = &'a PoseHeatmaps>,
    pcm: Var,
    paf: Var,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for h in stages {
        let a = tape.mse(h.pcm, pcm)?;
        let b = tape.mse(h.paf, paf)?;
        let stage = tape.add(a, b)?;
        total = Some(match total {
            Some(t) => tape.add(t, stage)?,
            None => stage,
        });
    }
    total.ok_or_else(|| Error::Empty("loss over zero stages".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub preset: Preset,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub seed: u64,
    pub stages: usize,
    pub optimizer: OptimizerChoice,
    pub bn_momentum: f64,
    pub render: RenderParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: Preset::Desk,
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            decay_factor: 0.7,
            decay_interval: 15,
            seed: 0,
            stages: 3,
            optimizer: OptimizerChoice::Adam,
            bn_momentum: 0.1,
            render: RenderParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.decay_factor > 0.0) {
            return Err(Error::config("learning rate and decay factor must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.decay_interval == 0 || self.stages == 0 {
            return Err(Error::config(
                "batch size, epochs, decay interval and stages must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum must lie in [0, 1]"));
        }
        if !(self.render.sigma > 0.0 && self.render.limb_width > 0.0) {
            return Err(Error::config("render sigma and limb width must be positive"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> crate::model::ModelConfig {
        let mut c = self.preset.config();
        c.stages = self.stages;
        c
    }

    fn schedule(&self) -> StepDecay {
        StepDecay {
            factor: self.decay_factor,
            interval: self.decay_interval,
        }
    }

    fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Adam => OptimizerKind::adam(),
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
        }
    }
}

/// Tokens and rendered labels for a fixed sample list, stored flat.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub len: usize,
    freq: Vec<T>,
    time: Vec<T>,
    pcm: Vec<T>,
    paf: Vec<T>,
    freq_shape: [usize; 2],
    time_shape: [usize; 2],
    side: usize,
}

pub struct Batch<T> {
    pub freq: Tensor<T>,
    pub time: Tensor<T>,
    pub pcm: Tensor<T>,
    pub paf: Tensor<T>,
}

impl<T: Real> Prepared<T> {
    pub fn new(model: &MultiFormer<T>, samples: &[&Sample], render: &RenderParams) -> Result<Self> {
        let shape = model.config.token_shape();
        let side = model.config.side();
        let mut p = Prepared {
            len: samples.len(),
            freq: Vec::new(),
            time: Vec::new(),
            pcm: Vec::new(),
            paf: Vec::new(),
            freq_shape: [shape.freq_tokens, shape.freq_width],
            time_shape: [shape.time_tokens, shape.time_width],
            side,
        };
        for s in samples {
            let [f, t] = model.raw_tokens(&s.window)?;
            p.freq.extend(f.data.iter().map(|&x| T::from_f64_lossy(x)));
            p.time.extend(t.data.iter().map(|&x| T::from_f64_lossy(x)));
            let (pcm, paf) = render_labels(&s.annotation, side, render);
            p.pcm.extend(pcm.data().iter().map(|&x| T::from_f64_lossy(x)));
            p.paf.extend(paf.data().iter().map(|&x| T::from_f64_lossy(x)));
        }
        Ok(p)
    }

    pub fn batch(&self, idx: &[usize]) -> Batch<T> {
        let gather = |src: &[T], per: usize| -> Vec<T> {
            idx.iter()
                .flat_map(|&i| src[i * per..(i + 1) * per].iter().copied())
                .collect()
        };
        let b = idx.len();
        let plane = self.side * self.side;
        let [fn_, fw] = self.freq_shape;
        let [tn, tw] = self.time_shape;
        Batch {
            freq: Tensor::new(&[b, fn_, fw], gather(&self.freq, fn_ * fw)).expect("sized"),
            time: Tensor::new(&[b, tn, tw], gather(&self.time, tn * tw)).expect("sized"),
            pcm: Tensor::new(
                &[b, PCM_CHANNELS, self.side, self.side],
                gather(&self.pcm, PCM_CHANNELS * plane),
            )
            .expect("sized"),
            paf: Tensor::new(
                &[b, PAF_CHANNELS, self.side, self.side],
                gather(&self.paf, PAF_CHANNELS * plane),
            )
            .expect("sized"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch's training batches.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

/// Deterministic per-(epoch, batch) seed for dropout masks.
fn mix_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut x =
        seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (batch as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finaliser
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const STATE_RECORD: &str = "train.state";
const HISTORY_RECORD: &str = "train.history";

pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model: MultiFormer<T>,
    pub optim: OptimizerState<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<f64>,
    pub history: Vec<EpochLog>,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = MultiFormer::new(&cfg.model_config(), cfg.seed)?;
        let optim = OptimizerState::new(cfg.optimizer_kind(), cfg.lr, cfg.schedule(), &model.params)?;
        Ok(Trainer {
            cfg,
            model,
            optim,
            epoch: 0,
            best: None,
            history: Vec::new(),
        })
    }

    /// One optimisation step; returns the summed loss of the batch.
    pub fn step(&mut self, batch: &Batch<T>, seed: u64) -> Result<f64> {
        let b = batch.freq.shape()[0];
        let (loss, grads, bn) = {
            let mut tape = self.model.tape(Mode::Train).with_seed(seed);
            let loss = self.forward_loss(&mut tape, batch)?;
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(self.diagnose(batch, seed));
            }
            let mean = tape.scale(loss, lit(1.0 / b as f64))?;
            let grads = tape.backward(mean)?;
            (value, grads, tape.take_bn_updates())
        };
        self.model.params.set_grads(grads);
        self.optim.step(&mut self.model.params)?;
        apply_bn_updates(&mut self.model.buffers, &bn, self.cfg.bn_momentum);
        Ok(loss)
    }

    fn forward_loss(&self, tape: &mut Tape<'_, T>, batch: &Batch<T>) -> Result<Var> {
        let f = tape.constant(batch.freq.clone());
        let t = tape.constant(batch.time.clone());
        let out = self.model.forward(tape, f, t, self.cfg.stages, AttentionMode::Papm)?;
        let pcm = tape.constant(batch.pcm.clone());
        let paf = tape.constant(batch.paf.clone());
        loss_total(tape, out.msfn.heatmaps(), pcm, paf)
    }

    /// Re-runs a failing batch on a checked tape to name the first
    /// operation that produced a non-finite value.
    fn diagnose(&self, batch: &Batch<T>, seed: u64) -> Error {
        let mut tape = self.model.tape(Mode::Train).with_seed(seed).checked(true);
        match self.forward_loss(&mut tape, batch) {
            Err(e @ Error::NonFinite { .. }) => e,
            Err(e) => e,
            Ok(loss) => Error::NonFinite {
                op: "loss_total",
                node: loss.index(),
            },
        }
    }

    /// Mean per-sample loss in evaluation mode.
    pub fn eval_loss(&self, data: &Prepared<T>) -> Result<f64> {
        let mut total = 0.0;
        let idx: Vec<usize> = (0..data.len).collect();
        for chunk in idx.chunks(self.cfg.batch_size) {
            let batch = data.batch(chunk);
            let mut tape = self.model.tape(Mode::Eval);
            let loss = self.forward_loss(&mut tape, &batch)?;
            total += tape.value(loss).data()[0].as_f64();
        }
        Ok(total / data.len.max(1) as f64)
    }

    pub fn run_epoch(&mut self, train: &Prepared<T>, val: Option<&Prepared<T>>) -> Result<EpochLog> {
        if train.len == 0 {
            return Err(Error::Empty("training split".into()));
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..train.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let lr = self.optim.lr;
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            total += self.step(&train.batch(chunk), mix_seed(self.cfg.seed, epoch, b))?;
        }
        let val_loss = match val {
            Some(v) if v.len > 0 => Some(self.eval_loss(v)?),
            _ => None,
        };
        self.optim.end_epoch(epoch);
        self.epoch = epoch;
        let log = EpochLog {
            epoch,
            train_loss: total / train.len as f64,
            val_loss,
            lr,
        };
        self.history.push(log);
        Ok(log)
    }

    /// Trains until `cfg.epochs` are complete. With `out`, writes
    /// `last.mfck`, `best.mfck` and `loss.csv` after every epoch.
    pub fn fit(
        &mut self,
        train: &Prepared<T>,
        val: Option<&Prepared<T>>,
        out: Option<&Path>,
        mut progress: impl FnMut(&EpochLog),
    ) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let log = self.run_epoch(train, val)?;
            let key = log.val_loss.unwrap_or(log.train_loss);
            let improved = self.best.is_none_or(|b| key < b);
            if improved {
                self.best = Some(key);
            }
            if let Some(dir) = out {
                let ck = self.to_checkpoint();
                ck.write(&dir.join("last.mfck"))?;
                if improved {
                    ck.write(&dir.join("best.mfck"))?;
                }
                write_file(&dir.join("loss.csv"), self.loss_csv().as_bytes())?;
            }
            progress(&log);
        }
        Ok(())
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for h in &self.history {
            let val = h.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", h.epoch, h.train_loss, val, h.lr);
        }
        s
    }

    /// Model, optimiser moments and loop state.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        if !self.optim.first.is_empty() {
            for (i, (_, p)) in self.model.params.iter().enumerate() {
                ck.put(format!("optim.m.{}", p.name), &self.optim.first[i]);
                ck.put(format!("optim.v.{}", p.name), &self.optim.second[i]);
            }
        }
        let state = vec![
            self.epoch as f64,
            self.optim.step as f64,
            self.optim.lr,
            self.best.unwrap_or(f64::NAN),
        ];
        ck.put(STATE_RECORD, &Tensor::<f64>::from_vec(state));
        let mut hist = Vec::with_capacity(self.history.len() * 4);
        for h in &self.history {
            hist.extend([h.epoch as f64, h.train_loss, h.val_loss.unwrap_or(f64::NAN), h.lr]);
        }
        let hist = Tensor::new(&[self.history.len(), 4], hist).expect("sized");
        ck.put(HISTORY_RECORD, &hist);
        ck
    }

    /// Continues a run saved by [`Trainer::to_checkpoint`].
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let model = MultiFormer::<T>::from_checkpoint(ck)?;
        if model.config != cfg.model_config() {
            return Err(Error::config("checkpoint model does not match the training preset"));
        }
        let mut optim = OptimizerState::new(cfg.optimizer_kind(), cfg.lr, cfg.schedule(), &model.params)?;
        if !optim.first.is_empty() {
            for (i, (_, p)) in model.params.iter().enumerate() {
                optim.first[i] = ck.get(&format!("optim.m.{}", p.name))?;
                optim.second[i] = ck.get(&format!("optim.v.{}", p.name))?;
            }
        }
        let state: Tensor<f64> = ck.get(STATE_RECORD)?;
        let [epoch, step, lr, best] = state
            .data()
            .try_into()
            .map_err(|_| Error::config("malformed train.state record"))?;
        optim.step = step as u64;
        optim.lr = lr;
        let hist: Tensor<f64> = ck.get(HISTORY_RECORD)?;
        let history = hist
            .data()
            .chunks_exact(4)
            .map(|r| EpochLog {
                epoch: r[0] as usize,
                train_loss: r[1],
                val_loss: (!r[2].is_nan()).then_some(r[2]),
                lr: r[3],
            })
            .collect();
        Ok(Trainer {
            cfg,
            model,
            optim,
            epoch: epoch as usize,
            best: (!best.is_nan()).then_some(best),
            history,
        })
    }
}
