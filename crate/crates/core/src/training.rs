//! Adam optimization, the epoch loop with validation-based early stopping,
//! and the median-over-seeds experiment protocol.

use std::time::Instant;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{build_sequences_for, DatasetError, InteractionDataset, Phase};
use crate::evaluation::{evaluate, EvalError, RankingReport};
use crate::model::{forward, init_params, GradientSet, ModelError, ModelParams, ModelSpec};
use crate::numerics::Matrix;

/// Cutoff used for model selection and reported metrics.
pub const SELECTION_K: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in `{tensor}` at step {step}")]
    NonFiniteGradient { tensor: String, step: u64 },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("gradient shapes do not match parameters")]
    Shape,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without strict improvement of validation HR@10 before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Remove previously seen items from the ranking candidates.
    pub exclude_seen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            eval_batch_size: 256,
            max_epochs: 200,
            patience: 20,
            seed: 42,
            exclude_seen: false,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            out.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        if self.eval_batch_size == 0 {
            out.push("eval_batch_size must be positive".into());
        }
        if self.patience == 0 {
            out.push("patience must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(p.join("; ")))
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update in place. Rejects non-finite gradients
/// before touching any parameter.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradientSet,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let named = grads.named();
    let shapes_ok = named.len() == params.named().len()
        && params
            .leaves()
            .iter()
            .zip(grads.leaves())
            .all(|(p, g)| p.shape() == g.shape());
    if !shapes_ok {
        return Err(TrainError::Shape);
    }
    if let Some((name, _)) = named.iter().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            tensor: name.clone(),
            step: state.step + 1,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.adam_eps);
    let leaves = params
        .leaves_mut()
        .into_iter()
        .zip(grads.leaves())
        .zip(state.m.leaves_mut().into_iter().zip(state.v.leaves_mut()));
    for ((p, g), (m, v)) in leaves {
        let update = |p: &mut Matrix, m: &mut Matrix, v: &mut Matrix| {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        };
        update(p, m, v);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_hr10: f64,
    pub val_ndcg10: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation HR@10, or the
    /// initial parameters when no epoch ran.
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    /// 1-based epoch of `params`, 0 for the initial parameters.
    pub best_epoch: usize,
    pub best_val_hr10: Option<f64>,
}

pub fn train(
    ds: &InteractionDataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with(ds, spec, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after each epoch's record is final.
pub fn train_with(
    ds: &InteractionDataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    spec.validate()?;
    if spec.dims.num_items != ds.num_items() {
        return Err(TrainError::Config(format!(
            "model has {} items but the dataset has {}",
            spec.dims.num_items,
            ds.num_items()
        )));
    }
    let mut params = init_params(spec, cfg.seed)?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut outcome = TrainOutcome {
        params: params.clone(),
        log: Vec::new(),
        best_epoch: 0,
        best_val_hr10: None,
    };
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut users: Vec<usize> = (0..ds.num_users()).collect();
        users.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut weight = 0usize;
        for batch in build_sequences_for(ds, users, spec.dims.n, Phase::Train, cfg.batch_size)? {
            let valid = batch.num_valid();
            if valid == 0 {
                continue;
            }
            let trace = forward(&params, spec, &batch, true, rng.random())?;
            let loss = trace.loss()?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch, loss });
            }
            loss_sum += loss * valid as f64;
            weight += valid;
            let grads = trace.backward()?;
            adam_step(&mut params, &grads, &mut state, cfg)?;
        }
        let train_loss = if weight == 0 { 0.0 } else { loss_sum / weight as f64 };
        let val = evaluate(
            &params,
            spec,
            ds,
            Phase::Valid,
            cfg.eval_batch_size,
            SELECTION_K,
            cfg.exclude_seen,
        )?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_hr10: val.hr,
            val_ndcg10: val.ndcg,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        outcome.log.push(record);
        if outcome.best_val_hr10.is_none_or(|best| val.hr > best) {
            outcome.best_val_hr10 = Some(val.hr);
            outcome.best_epoch = epoch;
            outcome.params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_hr10: Option<f64>,
    pub test_hr10: f64,
    pub test_ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub repeats: usize,
    pub median_hr10: f64,
    pub median_ndcg10: f64,
    pub runs: Vec<RunSummary>,
}

/// Median of an odd-length sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Trains `repeats` models with seeds `cfg.seed + r`, evaluates each best
/// checkpoint on the test phase and reports per-metric medians.
pub fn run_experiment(
    ds: &InteractionDataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    repeats: usize,
) -> Result<ExperimentReport, TrainError> {
    run_experiment_with(ds, spec, cfg, repeats, |_, _| {})
}

/// Like [`run_experiment`], calling `on_epoch(run, record)` during training.
pub fn run_experiment_with(
    ds: &InteractionDataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    repeats: usize,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<ExperimentReport, TrainError> {
    if repeats.is_multiple_of(2) {
        return Err(TrainError::Config(format!("repeats must be odd, got {repeats}")));
    }
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let run_cfg = TrainConfig {
            seed: cfg.seed + r as u64,
            ..cfg.clone()
        };
        let outcome = train_with(ds, spec, &run_cfg, |rec| on_epoch(r, rec))?;
        let test: RankingReport = evaluate(
            &outcome.params,
            spec,
            ds,
            Phase::Test,
            cfg.eval_batch_size,
            SELECTION_K,
            cfg.exclude_seen,
        )?;
        runs.push(RunSummary {
            seed: run_cfg.seed,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.log.len(),
            val_hr10: outcome.best_val_hr10,
            test_hr10: test.hr,
            test_ndcg10: test.ndcg,
        });
    }
    let hr: Vec<f64> = runs.iter().map(|r| r.test_hr10).collect();
    let ndcg: Vec<f64> = runs.iter().map(|r| r.test_ndcg10).collect();
    Ok(ExperimentReport {
        repeats,
        median_hr10: median(&hr),
        median_ndcg10: median(&ndcg),
        runs,
    })
}
