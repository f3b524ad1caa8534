//! ELBO objective and the training and adaptation loops.

mod elbo;
mod state;

pub use elbo::{elbo, kl_noise_terms, kl_standard_normal, ElboTerms, ElboVars};
pub use state::TRAIN_STATE_KIND;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{groups, frame, Sampling, SsmVae, INFERENCE_CHUNK};
use crate::nn::{Adam, AdamConfig, Graph, Param, ParamStore};
use crate::rng::{rng_for, tag};
use crate::tensor::{Tape, Tensor};
use crate::world::SequenceBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Every parameter group is updated.
    Full,
    /// Only the transition networks and the noise prior are updated.
    DynamicsOnly,
}

impl AdaptMode {
    pub fn trainable_groups(self) -> &'static [&'static str] {
        match self {
            AdaptMode::Full => &groups::ALL,
            AdaptMode::DynamicsOnly => &[groups::TRANSITION, groups::PRIOR],
        }
    }

    pub fn parse(s: &str) -> Result<AdaptMode> {
        match s {
            "full" => Ok(AdaptMode::Full),
            "dynamics-only" => Ok(AdaptMode::DynamicsOnly),
            other => Err(Error::Config(format!(
                "unknown adaptation mode {other:?}, expected full or dynamics-only"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Weight of the KL terms.
    pub beta: f64,
    pub seed: u64,
    pub mode: AdaptMode,
    /// Rescales the gradient when its global norm exceeds this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            patience: 20,
            beta: 1.0,
            seed: 0,
            mode: AdaptMode::Full,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("train extents must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("train.lr and train.beta must be finite and non-negative".into()));
        }
        if matches!(self.max_grad_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("train.max_grad_norm must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_elbo: f64,
    pub val_elbo: f64,
    /// Seconds since the start of this training call.
    pub wall_clock: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    Diverged { epoch: usize, detail: String },
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: SsmVae,
    pub adam: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best: ParamStore,
    pub best_val: f64,
    pub bad_epochs: usize,
}

impl TrainState {
    pub fn new(model: SsmVae, cfg: &TrainConfig) -> TrainState {
        TrainState {
            adam: Adam::new(&model.store, cfg.adam()),
            best: model.store.clone(),
            model,
            epoch: 0,
            history: vec![],
            best_val: f64::NEG_INFINITY,
            bad_epochs: 0,
        }
    }

    /// The model with the best validation parameters.
    pub fn best_model(&self) -> SsmVae {
        let mut m = self.model.clone();
        m.store = self.best.clone();
        m
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Best-validation model, or the last good one after divergence.
    pub model: SsmVae,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
    pub state: TrainState,
}

/// First `t0 + t_dyn` frames of standardized observations.
pub fn training_segment(model: &SsmVae, batch: &SequenceBatch) -> Tensor {
    let x = model.standardizer.apply(batch).x;
    let t = batch.t_train();
    let frames: Vec<Tensor> = (0..t).map(|s| frame(&x, s)).collect();
    crate::model::stack_frames(&frames)
}

fn rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let per: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("finite rows")
}

fn trainable<'a>(mode: AdaptMode) -> impl Fn(&Param) -> bool + 'a {
    let allowed = mode.trainable_groups();
    move |p: &Param| allowed.contains(&p.group.as_str())
}

/// Single-sample ELBO averaged over a batch, with draws derived from `seed`.
pub fn evaluate_elbo(model: &SsmVae, batch: &SequenceBatch, beta: f64, seed: u64) -> Result<ElboTerms> {
    let x = training_segment(model, batch);
    let n = batch.len();
    let mut acc = [0.0; 4];
    for (chunk, start) in (0..n).step_by(INFERENCE_CHUNK).enumerate() {
        let idx: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
        let xs = rows(&x, &idx);
        let env: Vec<usize> = idx.iter().map(|&i| batch.env[i]).collect();
        let mut rng = rng_for(seed, &[tag("elbo"), chunk as u64]);
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &model.store);
        let trace = model.filter_forward(&g, &xs, &env, Sampling::Random(&mut rng))?;
        let terms = elbo(model, &g, &trace, &xs, &env, beta)?.terms(&g)?;
        let w = idx.len() as f64;
        for (a, v) in acc.iter_mut().zip([terms.recon, terms.kl_initial, terms.kl_noise, terms.total]) {
            *a += w * v;
        }
    }
    let n = n as f64;
    Ok(ElboTerms {
        recon: acc[0] / n,
        kl_initial: acc[1] / n,
        kl_noise: acc[2] / n,
        total: acc[3] / n,
    })
}

fn clip(grads: &mut crate::nn::ParamGrads, max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let norm = grads.norm();
        if norm > c {
            grads.scale(c / norm);
        }
    }
}

/// Trains from scratch. See [`resume`].
pub fn train(
    model: SsmVae,
    train: &SequenceBatch,
    val: &SequenceBatch,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainResult> {
    resume(TrainState::new(model, cfg), train, val, cfg, progress)
}

/// Adam on the negative ELBO over shuffled minibatches with early stopping
/// on the validation ELBO. Epoch `e` shuffles and samples with a generator
/// derived from `(seed, e)`, so resuming a saved state is bit-identical to
/// an uninterrupted run.
pub fn resume(
    mut state: TrainState,
    train: &SequenceBatch,
    val: &SequenceBatch,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let model_t = state.model.config.t_ic.max(state.model.config.markov_order + 1);
    if train.t_train() < model_t || train.k != state.model.config.d {
        return Err(Error::Config(format!(
            "dataset with {} training frames of width {} does not fit the model",
            train.t_train(),
            train.k
        )));
    }
    state.adam.config = cfg.adam();
    let x = training_segment(&state.model, train);
    let start = Instant::now();
    let mut stop = StopReason::MaxEpochs;
    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch;
        let mut rng = rng_for(cfg.seed, &[tag("epoch"), epoch as u64]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let outcome: Result<()> = (|| {
            for idx in order.chunks(cfg.batch_size) {
                let xs = rows(&x, idx);
                let env: Vec<usize> = idx.iter().map(|&i| train.env[i]).collect();
                let (terms, mut grads) = {
                    let model = &state.model;
                    let tape = Tape::new();
                    let g = Graph::with_filter(&tape, &model.store, trainable(cfg.mode));
                    let trace = model.filter_forward(&g, &xs, &env, Sampling::Random(&mut rng))?;
                    let vars = elbo(model, &g, &trace, &xs, &env, cfg.beta)?;
                    let terms = vars.terms(&g)?;
                    (terms, g.backward(vars.loss(&g)?)?)
                };
                clip(&mut grads, cfg.max_grad_norm);
                state.adam.step(&mut state.model.store, &grads)?;
                sum += terms.total * idx.len() as f64;
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            if !e.is_numeric() {
                return Err(e);
            }
            stop = StopReason::Diverged {
                epoch,
                detail: e.to_string(),
            };
            break;
        }
        let val_elbo = match evaluate_elbo(&state.model, val, cfg.beta, rng_seed(cfg.seed)) {
            Ok(t) => t.total,
            Err(e) if e.is_numeric() => {
                stop = StopReason::Diverged {
                    epoch,
                    detail: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let rec = EpochRecord {
            epoch,
            train_elbo: sum / train.len() as f64,
            val_elbo,
            wall_clock: start.elapsed().as_secs_f64(),
        };
        progress(&rec);
        state.history.push(rec);
        state.epoch += 1;
        if val_elbo > state.best_val {
            state.best_val = val_elbo;
            state.best = state.model.store.clone();
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
            if state.bad_epochs >= cfg.patience {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
    }
    if matches!(stop, StopReason::Diverged { .. }) && state.history.is_empty() {
        // Nothing better than the initial parameters is known.
        state.best = state.model.store.clone();
    }
    let model = state.best_model();
    Ok(TrainResult {
        model,
        history: state.history.clone(),
        stop,
        state,
    })
}

fn rng_seed(seed: u64) -> u64 {
    crate::rng::derive_seed(seed, &[tag("validation")])
}

/// Continues training a pretrained model on target data, with the groups
/// selected by `cfg.mode` trainable.
pub fn adapt(
    model: SsmVae,
    target_train: &SequenceBatch,
    target_val: &SequenceBatch,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainResult> {
    train(model, target_train, target_val, cfg, progress)
}
