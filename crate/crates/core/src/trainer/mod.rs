//! Training loop: batch-mean MSE only, AdamW, warm-up + cosine schedule.

pub mod checkpoint;
pub mod config;
pub mod eval;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use config::TrainConfig;
pub use eval::{evaluate, forecast_windows, Forecaster, NaiveForecaster, EVAL_BATCH};

use crate::data::{WindowDataset, WindowSets};
use crate::error::{Error, Result};
use crate::metrics::UtilizationCounter;
use crate::moe::{GateTsConfig, Model};
use crate::nncore::{
    adamw_step, cosine_lr, derive_seed, DropoutRng, Graph, Mode, OptimizerState, ParamStore, ScheduleState,
    StepOutcome,
};

/// Loss growth factor over the first batch loss that counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

const SHUFFLE_SALT: u64 = 0x5348_5546;
const DROPOUT_SALT: u64 = 0x4452_4f50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean of the batch losses of this epoch (normalised units).
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    pub skipped_steps: usize,
    /// Expert shares over all validation tokens (GateTS only).
    pub utilization: Option<Vec<f64>>,
    pub distinct_sets: Option<usize>,
}

/// Resumable loop position. Checkpoints are taken at epoch boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Batches processed (the schedule position).
    pub step: u64,
    pub total_steps: u64,
    pub dropout_seed: u64,
    pub dropout_position: u128,
    pub initial_loss: Option<f64>,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_best: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub enum TrainEvent<'a> {
    Step { epoch: usize, step: u64, lr: f64, loss: f64 },
    Epoch(&'a EpochRecord),
}

impl TrainEvent<'_> {
    /// One tab-separated progress line.
    pub fn line(&self) -> String {
        match self {
            TrainEvent::Step { epoch, step, lr, loss } => format!("step\t{epoch}\t{step}\t{lr:.6e}\t{loss:.6e}"),
            TrainEvent::Epoch(r) => format!(
                "epoch\t{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}",
                r.epoch, r.step, r.lr, r.train_loss, r.val_loss
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub stopped_early: bool,
}

struct Snapshot {
    params: ParamStore,
    optimizer: OptimizerState,
    state: TrainState,
}

pub struct Trainer<'d> {
    model: Model,
    config: TrainConfig,
    data: &'d WindowSets,
    optimizer: OptimizerState,
    schedule: ScheduleState,
    rng: DropoutRng,
    state: TrainState,
    best: Option<ParamStore>,
}

fn steps_per_epoch(train: &WindowDataset, batch: usize) -> u64 {
    train.len().div_ceil(batch) as u64
}

fn check_dims(cfg: &GateTsConfig, data: &WindowSets) -> Result<()> {
    if cfg.context != data.train.context || cfg.horizon != data.train.horizon {
        return Err(Error::Config(format!(
            "model expects context {} / horizon {}, dataset has {} / {}",
            cfg.context, cfg.horizon, data.train.context, data.train.horizon
        )));
    }
    if data.train.is_empty() {
        return Err(Error::Data("training split has no windows".into()));
    }
    Ok(())
}

impl<'d> Trainer<'d> {
    pub fn new(model_config: GateTsConfig, config: TrainConfig, data: &'d WindowSets) -> Result<Self> {
        config.validate()?;
        check_dims(&model_config, data)?;
        let model = Model::new(model_config)?;
        let total = steps_per_epoch(&data.train, config.batch_size) * config.epochs as u64;
        let schedule = ScheduleState::with_warmup_fraction(total, config.warmup_fraction, config.lr)?;
        let dropout_seed = derive_seed(config.seed, DROPOUT_SALT);
        Ok(Self {
            optimizer: OptimizerState::new(config.adamw(), model.params()),
            state: TrainState {
                epoch: 0,
                step: 0,
                total_steps: total,
                dropout_seed,
                dropout_position: 0,
                initial_loss: None,
                best_val: None,
                best_epoch: None,
                epochs_since_best: 0,
                history: Vec::new(),
            },
            rng: DropoutRng::new(dropout_seed),
            model,
            config,
            data,
            schedule,
            best: None,
        })
    }

    /// Continue a run from an epoch-boundary checkpoint.
    pub fn resume(ckpt: Checkpoint, data: &'d WindowSets) -> Result<Self> {
        let mut t = Self::new(ckpt.model_config.clone(), ckpt.train_config.clone(), data)?;
        if t.state.total_steps != ckpt.state.total_steps {
            return Err(Error::Checkpoint(format!(
                "run length differs: checkpoint planned {} steps, this dataset gives {}",
                ckpt.state.total_steps, t.state.total_steps
            )));
        }
        t.model.params_mut().load_from(&ckpt.params)?;
        t.optimizer = ckpt.optimizer;
        t.rng = DropoutRng::at_position(ckpt.state.dropout_seed, ckpt.state.dropout_position);
        t.state = ckpt.state;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }

    pub fn schedule(&self) -> &ScheduleState {
        &self.schedule
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.epochs || self.stopped_early()
    }

    pub fn stopped_early(&self) -> bool {
        self.config
            .patience
            .is_some_and(|p| self.state.epochs_since_best >= p)
    }

    /// Current state as a checkpoint.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.dropout_position = self.rng.position();
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            params: self.model.params().clone(),
            optimizer: self.optimizer.clone(),
            state,
        }
    }

    /// Checkpoint carrying the best-validation parameters (the current ones
    /// if no epoch has finished).
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut c = self.checkpoint();
        if let Some(p) = &self.best {
            c.params = p.clone();
        }
        c
    }

    fn snapshot(&self) -> Snapshot {
        let mut state = self.state.clone();
        state.dropout_position = self.rng.position();
        Snapshot {
            params: self.model.params().clone(),
            optimizer: self.optimizer.clone(),
            state,
        }
    }

    fn restore(&mut self, s: Snapshot) {
        *self.model.params_mut() = s.params;
        self.optimizer = s.optimizer;
        self.rng = DropoutRng::at_position(s.state.dropout_seed, s.state.dropout_position);
        self.state = s.state;
    }

    fn train_step(&mut self, idx: &[usize]) -> Result<(f64, f64, StepOutcome)> {
        let (x, y) = self.data.train.batch(idx);
        let mut g = Graph::new(Mode::Train);
        let bound = self.model.params().bind(&mut g);
        let out = self.model.forward(&mut g, &bound, &x, &mut self.rng)?;
        let target = g.constant(&y);
        let loss = g.mse(out.forecast, target)?;
        let value = g.value(loss)[0];
        let lr = cosine_lr(self.state.step, &self.schedule);
        if !value.is_finite() {
            return Ok((value, lr, StepOutcome::SkippedNonFinite));
        }
        g.backward(loss);
        self.model.params_mut().collect_grads(&g, &bound)?;
        let outcome = adamw_step(self.model.params_mut(), &mut self.optimizer, lr)?;
        self.model.params_mut().tensors_mut().iter_mut().for_each(|t| t.zero_grad());
        Ok((value, lr, outcome))
    }

    /// Eval-mode validation MSE (normalised units) and routing snapshot.
    /// Never touches parameters or optimizer state.
    pub fn validate(&self) -> Result<(f64, Option<(Vec<f64>, usize)>)> {
        validation_loss(&self.model, &self.data.val)
    }

    /// One pass over the shuffled training windows. On divergence the state
    /// rolls back to the start of the epoch and the error is returned.
    pub fn run_epoch(&mut self, observer: &mut dyn FnMut(TrainEvent<'_>)) -> Result<EpochRecord> {
        let snapshot = self.snapshot();
        let epoch = self.state.epoch;
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, SHUFFLE_SALT + epoch as u64)));
        let (mut sum, mut batches, mut skipped, mut last_lr) = (0.0, 0usize, 0usize, 0.0);
        for chunk in order.chunks(self.config.batch_size) {
            let (loss, lr, outcome) = self.train_step(chunk)?;
            let initial = *self.state.initial_loss.get_or_insert(loss);
            if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial {
                let step = self.state.step;
                self.restore(snapshot);
                return Err(Error::Diverged { epoch, step, loss });
            }
            if outcome == StepOutcome::SkippedNonFinite {
                skipped += 1;
            }
            observer(TrainEvent::Step {
                epoch,
                step: self.state.step,
                lr,
                loss,
            });
            self.state.step += 1;
            sum += loss;
            batches += 1;
            last_lr = lr;
        }
        let (val_loss, util) = self.validate()?;
        self.state.epoch += 1;
        if self.state.best_val.is_none_or(|b| val_loss < b) {
            self.state.best_val = Some(val_loss);
            self.state.best_epoch = Some(epoch);
            self.state.epochs_since_best = 0;
            self.best = Some(self.model.params().clone());
        } else {
            self.state.epochs_since_best += 1;
        }
        let record = EpochRecord {
            epoch,
            step: self.state.step,
            train_loss: sum / batches as f64,
            val_loss,
            lr: last_lr,
            skipped_steps: skipped,
            distinct_sets: util.as_ref().map(|u| u.1),
            utilization: util.map(|u| u.0),
        };
        self.state.history.push(record.clone());
        observer(TrainEvent::Epoch(&record));
        Ok(record)
    }

    pub fn fit(&mut self, observer: &mut dyn FnMut(TrainEvent<'_>)) -> Result<TrainOutcome> {
        while !self.finished() {
            self.run_epoch(observer)?;
        }
        Ok(TrainOutcome {
            best: self.best_checkpoint(),
            last: self.checkpoint(),
            stopped_early: self.stopped_early(),
        })
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Eval-mode MSE over every window of `data`, plus expert shares and the
/// number of distinct expert sets when the model routes.
pub fn validation_loss(model: &Model, data: &WindowDataset) -> Result<(f64, Option<(Vec<f64>, usize)>)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut counter: Option<UtilizationCounter> = None;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let (pred, routing) = model.predict(&x)?;
        sq += pred.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += y.numel();
        if let Some(d) = routing {
            counter.get_or_insert_with(|| UtilizationCounter::new(d.experts)).record_decision(&d);
        }
    }
    let util = match counter {
        Some(c) => {
            let u = c.finish()?;
            Some((u.frequencies, u.distinct_sets))
        }
        None => None,
    };
    Ok((sq / count as f64, util))
}

/// Train from scratch; returns the best-validation checkpoint and the
/// per-epoch history.
pub fn train(model_config: GateTsConfig, train_config: TrainConfig, data: &WindowSets) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let mut t = Trainer::new(model_config, train_config, data)?;
    let out = t.fit(&mut |_| {})?;
    Ok((out.best, t.state.history))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::data::{make_windows, prepare_series, standardize, synth_series, Split, Splits, SynthKind};
    use crate::gating::RouterKind;
    use crate::metrics::{mae, mase, rmse, smape, IntervalKind};
    use crate::moe::{naive_forecast, Arch};
    use crate::nncore::Tensor;

    fn small_model() -> GateTsConfig {
        GateTsConfig {
            context: 8,
            horizon: 2,
            d_model: 8,
            n_heads: 2,
            n_experts: 3,
            active: 2,
            ffn_width: 8,
            seed: 1,
            ..Default::default()
        }
    }

    fn sine_sets() -> WindowSets {
        let raw = synth_series(SynthKind::Sine, 200, 0).unwrap();
        let p = prepare_series(&raw, 1, (0.8, 0.1, 0.1), 10).unwrap();
        make_windows(&p, 8, 2, 1).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let sets = sine_sets();
        let mut t = Trainer::new(small_model(), TrainConfig { lr: 0.0, ..quick(2) }, &sets).unwrap();
        let before = t.model().params().clone();
        t.fit(&mut |_| {}).unwrap();
        assert!(t.state().step > 0);
        for (a, b) in before.tensors().iter().zip(t.model().params().tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn memorises_a_single_window() {
        let values: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64).collect();
        let splits = Splits {
            train: 0..10,
            val: 10..20,
            test: 20..30,
        };
        let p = standardize(values, splits).unwrap();
        let sets = make_windows(&p, 8, 2, 1).unwrap();
        assert_eq!(sets.train.len(), 1);
        let cfg = GateTsConfig {
            dropout: 0.0,
            ..small_model()
        };
        let tc = TrainConfig {
            epochs: 300,
            batch_size: 1,
            lr: 1e-2,
            weight_decay: 0.0,
            ..quick(300)
        };
        let mut t = Trainer::new(cfg, tc, &sets).unwrap();
        t.fit(&mut |_| {}).unwrap();
        let last = t.history().last().unwrap().train_loss;
        assert!(last < 1e-4, "train MSE {last}");
        let r = evaluate(t.model(), &sets, Split::Train, IntervalKind::Ci95).unwrap();
        assert!(r.mae.mean < 0.05 * p.normalization.std, "{}", r.mae.mean);
        assert_eq!(r.windows, 1);
        assert!(r.mae.half_width.is_none());
    }

    #[test]
    fn same_seed_same_curves() {
        let sets = sine_sets();
        let run = || {
            let mut losses = Vec::new();
            let mut t = Trainer::new(small_model(), quick(3), &sets).unwrap();
            t.fit(&mut |e| {
                if let TrainEvent::Step { loss, .. } = e {
                    losses.push(loss.to_bits());
                }
            })
            .unwrap();
            (losses, t.history().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let sets = sine_sets();
        let mut full = Trainer::new(small_model(), quick(4), &sets).unwrap();
        full.fit(&mut |_| {}).unwrap();

        let mut first = Trainer::new(small_model(), quick(4), &sets).unwrap();
        first.run_epoch(&mut |_| {}).unwrap();
        first.run_epoch(&mut |_| {}).unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        drop(first);
        let mut second = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), &sets).unwrap();
        second.fit(&mut |_| {}).unwrap();

        assert_eq!(full.history(), second.history());
        assert_eq!(full.model().params(), second.model().params());
        assert_eq!(full.checkpoint().to_bytes().unwrap(), second.checkpoint().to_bytes().unwrap());
    }

    #[test]
    fn divergence_aborts_and_rolls_back() {
        let sets = sine_sets();
        let mut t = Trainer::new(small_model(), quick(3), &sets).unwrap();
        t.run_epoch(&mut |_| {}).unwrap();
        let good = t.checkpoint();
        // Blow the training split up by 1e5 so the loss leaves the guard band.
        let natural = sets.train.natural_series().to_vec();
        let normalized: Vec<f64> = natural.iter().map(|&v| v * 1e5).collect();
        let poisoned = WindowSets {
            train: WindowDataset::new(
                Split::Train,
                Arc::new(normalized),
                Arc::new(natural),
                sets.train.range(),
                8,
                2,
                1,
                (0.0, 1.0),
            )
            .unwrap(),
            ..sets.clone()
        };
        let mut t = Trainer::resume(good.clone(), &poisoned).unwrap_or_else(|e| panic!("{e}"));
        let err = t.run_epoch(&mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
        assert_eq!(t.checkpoint(), good);
    }

    #[test]
    fn validation_leaves_state_alone() {
        let sets = sine_sets();
        let mut t = Trainer::new(small_model(), quick(2), &sets).unwrap();
        t.run_epoch(&mut |_| {}).unwrap();
        let before = t.checkpoint();
        let (a, _) = t.validate().unwrap();
        let (b, _) = t.validate().unwrap();
        assert_eq!(a, b);
        assert_eq!(t.checkpoint(), before);
    }

    #[test]
    fn history_records_utilization() {
        let sets = sine_sets();
        let mut t = Trainer::new(small_model(), quick(1), &sets).unwrap();
        let rec = t.run_epoch(&mut |_| {}).unwrap();
        let u = rec.utilization.unwrap();
        assert_eq!(u.len(), 3);
        assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(rec.val_loss.is_finite() && rec.lr > 0.0);
        let lstm = GateTsConfig {
            arch: Arch::Lstm,
            lstm_hidden: 4,
            ..small_model()
        };
        let rec = Trainer::new(lstm, quick(1), &sets).unwrap().run_epoch(&mut |_| {}).unwrap();
        assert!(rec.utilization.is_none());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let sets = sine_sets();
        let mut t = Trainer::new(small_model(), quick(1), &sets).unwrap();
        t.fit(&mut |_| {}).unwrap();
        let ckpt = t.checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let path2 = dir.path().join("again.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        let (x, _) = sets.test.batch(&[0, 1, 2]);
        let m1 = Model::from_params(ckpt.model_config.clone(), &ckpt.params).unwrap();
        let m2 = Model::from_params(loaded.model_config.clone(), &loaded.params).unwrap();
        let (y1, _) = m1.predict(&x).unwrap();
        let (y2, _) = m2.predict(&x).unwrap();
        assert_eq!(y1.data(), y2.data());
        assert_eq!(y1.data(), t.model().predict(&x).unwrap().0.data());
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let sets = sine_sets();
        let ckpt = Trainer::new(small_model(), quick(1), &sets).unwrap().checkpoint();
        let bytes = ckpt.to_bytes().unwrap();

        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        let err = Checkpoint::from_bytes(&flipped).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");

        let text = String::from_utf8_lossy(&bytes).into_owned();
        let needle = format!("\"format_version\":{FORMAT_VERSION}");
        assert!(text.contains(&needle));
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap().replacen(&needle, "\"format_version\":9", 1);
        let mut bumped = bytes[..16].to_vec();
        bumped.extend_from_slice(header.as_bytes());
        bumped.extend_from_slice(&bytes[16 + hlen..]);
        let err = Checkpoint::from_bytes(&bumped).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");

        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());

        let wrong = GateTsConfig {
            n_experts: 4,
            ..small_model()
        };
        let err = Model::from_params(wrong, &ckpt.params).unwrap_err().to_string();
        assert!(err.contains("shape mismatch"), "{err}");
    }

    #[test]
    fn naive_through_pipeline_matches_direct_metrics() {
        let sets = sine_sets();
        let f = NaiveForecaster { context: 8, horizon: 2 };
        let r = evaluate(&f, &sets, Split::Test, IntervalKind::Ci95).unwrap();
        let test = &sets.test;
        assert_eq!(r.windows, test.len());
        let train = &test.natural_series()[sets.train.range()];
        let (mut m, mut rm, mut s, mut ms) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..test.len() {
            let y = test.target_natural(i);
            let yhat = naive_forecast(test.context_natural(i), 2).unwrap();
            m += mae(y, &yhat).unwrap();
            rm += rmse(y, &yhat).unwrap();
            s += smape(y, &yhat).unwrap();
            ms += mase(y, &yhat, train).unwrap();
        }
        let n = test.len() as f64;
        assert!((r.mae.mean - m / n).abs() < 1e-12);
        assert!((r.rmse.mean - rm / n).abs() < 1e-12);
        assert!((r.smape.unwrap().mean - s / n).abs() < 1e-12);
        assert!((r.mase.mean - ms / n).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_mismatched_windows() {
        let sets = sine_sets();
        let m = Model::new(GateTsConfig {
            context: 9,
            ..small_model()
        })
        .unwrap();
        assert!(evaluate(&m, &sets, Split::Val, IntervalKind::Ci95).is_err());
        assert!(Trainer::new(GateTsConfig { horizon: 3, ..small_model() }, quick(1), &sets).is_err());
    }

    #[test]
    fn tied_experts_make_loss_symmetric_in_router_order() {
        let sets = sine_sets();
        let cfg = GateTsConfig {
            router: RouterKind::Classic,
            ..small_model()
        };
        let mut m = Model::new(cfg.clone()).unwrap();
        let names: Vec<String> = m.params().names().to_vec();
        for name in names.iter().filter(|n| n.starts_with("experts.0.")) {
            let src = m.params().get(m.params().index_of(name).unwrap()).clone();
            for e in 1..3 {
                let i = m.params().index_of(&name.replacen("experts.0.", &format!("experts.{e}."), 1)).unwrap();
                *m.params_mut().get_mut(i) = src.clone();
            }
        }
        let (a, _) = validation_loss(&m, &sets.val).unwrap();
        // Reverse the expert columns of the router.
        for name in ["router.w_g", "router.b_g"] {
            let i = m.params().index_of(name).unwrap();
            let t = m.params().get(i).clone();
            let e = *t.shape().last().unwrap();
            let data: Vec<f64> = t.data().chunks(e).flat_map(|r| r.iter().rev().copied().collect::<Vec<_>>()).collect();
            *m.params_mut().get_mut(i) = Tensor::new(t.shape(), data).unwrap();
        }
        let (b, _) = validation_loss(&m, &sets.val).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} {b}");
    }
}
