//! Minibatch SGD with momentum over [`Model`]s, checkpointing on a fixed
//! cadence, and the two-stage (representation, then classifier) schedule.

mod model;
mod sampling;

pub use model::{feature_matrix, Architecture, Model, ModelVars, DEFAULT_HIDDEN};
pub use sampling::{example_weights, normalize_mean_one, Sampler, Sampling, Weighting};

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_CHECKPOINTS: usize = 20;

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub num_steps: usize,
    /// Defaults to `num_steps / 20` (at least 1).
    #[serde(default)]
    pub eval_every: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub weighting: Weighting,
    /// Featurizer parameters are held fixed.
    #[serde(default)]
    pub freeze_featurizer: bool,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, batch_size: usize, num_steps: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            momentum: DEFAULT_MOMENTUM,
            batch_size,
            num_steps,
            eval_every: None,
            seed,
            sampling: Sampling::Uniform,
            weighting: Weighting::None,
            freeze_featurizer: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn eval_interval(&self) -> usize {
        self.eval_every
            .unwrap_or((self.num_steps / DEFAULT_CHECKPOINTS).max(1))
    }
}

/// `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Option<Matrix>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, num_params: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![None; num_params],
        }
    }

    pub fn step(&mut self, index: usize, param: &mut Matrix, grad: &Matrix) {
        let v = self.velocity[index].get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
        for ((v, g), p) in v.data_mut().iter_mut().zip(grad.data()).zip(param.data_mut()) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

/// Training split with its feature matrix and per-example loss weights.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub data: Dataset,
    pub x: Matrix,
    pub weights: Vec<f64>,
}

impl TrainData {
    pub fn new(data: Dataset, weighting: &Weighting) -> Result<Self> {
        let weights = example_weights(&data, weighting)?;
        Ok(Self {
            x: feature_matrix(&data),
            data,
            weights,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let ex = self.data.examples();
        Batch {
            x: self.x.select_rows(indices),
            labels: indices.iter().map(|&i| ex[i].label).collect(),
            attributes: indices.iter().map(|&i| ex[i].attribute).collect(),
            groups: indices.iter().map(|&i| self.data.group_index(i)).collect(),
            weights: indices.iter().map(|&i| self.weights[i]).collect(),
            indices: indices.to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub attributes: Vec<usize>,
    pub groups: Vec<usize>,
    pub weights: Vec<f64>,
    /// Positions in the training split.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct StepContext<'a> {
    /// 1-based step within the current stage.
    pub step: usize,
    pub rng: &'a mut ChaCha8Rng,
    /// False while probing the loss (gradient checks, neutral-setting
    /// comparisons): stateful objectives must not advance their state.
    pub update_state: bool,
    pub num_classes: usize,
    pub num_groups: usize,
}

/// A differentiable training objective. Implementations may keep state
/// across steps (group weights, an auxiliary model).
pub trait Objective: Send {
    fn loss(&mut self, tape: &mut Tape, model: &ModelVars, batch: &Batch, ctx: &mut StepContext) -> Result<Var>;
}

/// `(1/n) Σ wᵢ ℓᵢ` for an `n×1` column of per-example losses.
pub fn weighted_mean(tape: &mut Tape, per_example: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.constant(Matrix::column(weights));
    let scaled = tape.mul(per_example, w)?;
    tape.mean(scaled)
}

/// Example-weighted softmax cross-entropy.
#[derive(Clone, Debug, Default)]
pub struct CrossEntropy;

impl Objective for CrossEntropy {
    fn loss(&mut self, tape: &mut Tape, model: &ModelVars, batch: &Batch, _: &mut StepContext) -> Result<Var> {
        let x = tape.constant(batch.x.clone());
        let logits = model.logits(tape, x)?;
        let ce = tape.cross_entropy(logits, &batch.labels)?;
        weighted_mean(tape, ce, &batch.weights)
    }
}

/// Validation and test splits scored at every checkpoint.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub val: Dataset,
    pub test: Dataset,
    val_x: Matrix,
    test_x: Matrix,
}

impl Evaluator {
    pub fn new(val: Dataset, test: Dataset) -> Self {
        Self {
            val_x: feature_matrix(&val),
            test_x: feature_matrix(&test),
            val,
            test,
        }
    }

    pub fn checkpoint(&self, model: &Model, step: usize, stage: u8, train_loss: f64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            step,
            stage,
            train_loss,
            val: evaluate(&model.predict(&self.val_x)?, &self.val)?,
            test: evaluate(&model.predict(&self.test_x)?, &self.test)?,
            model: Some(model.clone()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Global step, counted across stages.
    pub step: usize,
    pub stage: u8,
    /// Loss of the last minibatch before the checkpoint.
    pub train_loss: f64,
    pub val: MetricsReport,
    pub test: MetricsReport,
    #[serde(skip)]
    pub model: Option<Model>,
}

/// Runs `cfg.num_steps` updates of `objective` and returns the checkpoints
/// taken every `cfg.eval_interval()` steps and at the final step. Steps
/// are numbered from `step_offset + 1`.
pub fn train_stage(
    model: &mut Model,
    train: &TrainData,
    cfg: &TrainConfig,
    objective: &mut dyn Objective,
    evaluator: &Evaluator,
    stage: u8,
    step_offset: usize,
) -> Result<Vec<Checkpoint>> {
    cfg.validate()?;
    let sampler = Sampler::new(&train.data, cfg.sampling)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, model.params().len());
    let interval = cfg.eval_interval();
    let mut checkpoints = Vec::new();
    for t in 1..=cfg.num_steps {
        let batch = train.batch(&sampler.sample(cfg.batch_size, &mut rng));
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, cfg.freeze_featurizer);
        let mut ctx = StepContext {
            step: t,
            rng: &mut rng,
            update_state: true,
            num_classes: train.data.num_classes(),
            num_groups: train.data.num_groups(),
        };
        let loss = objective.loss(&mut tape, &vars, &batch, &mut ctx)?;
        let loss_value = tape.scalar_value(loss);
        tape.backward(loss)?;
        for (i, &v) in vars.vars.iter().enumerate() {
            if !tape.requires_grad(v) {
                continue;
            }
            if let Some(g) = tape.grad(v) {
                let g = g.clone();
                opt.step(i, &mut model.params_mut()[i], &g);
            }
        }
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("parameters diverged at step {}", step_offset + t)));
        }
        if t % interval == 0 || t == cfg.num_steps {
            debug!("stage {stage} step {t}: loss {loss_value:.5}");
            checkpoints.push(evaluator.checkpoint(model, step_offset + t, stage, loss_value)?);
        }
    }
    Ok(checkpoints)
}

pub fn train(
    model: &mut Model,
    train: &TrainData,
    cfg: &TrainConfig,
    objective: &mut dyn Objective,
    evaluator: &Evaluator,
) -> Result<Vec<Checkpoint>> {
    train_stage(model, train, cfg, objective, evaluator, 1, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTarget {
    /// Keep training the stage-1 head with the featurizer frozen.
    HeadOnly,
    /// Redraw the head (seeded by the stage-2 seed), freeze the featurizer.
    FreshHead,
    Full,
}

/// Stage 1 trains every parameter; stage 2 restarts the optimizer and,
/// for the head targets, freezes the featurizer. Each stage draws its batches
/// from its own training view (sampling and weighting per stage config).
#[allow(clippy::too_many_arguments)]
pub fn two_stage_train(
    model: &mut Model,
    data: &Dataset,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    target: StageTarget,
    objective1: &mut dyn Objective,
    objective2: &mut dyn Objective,
    evaluator: &Evaluator,
) -> Result<Vec<Checkpoint>> {
    let first = TrainData::new(data.clone(), &stage1.weighting)?;
    let mut checkpoints = train_stage(model, &first, stage1, objective1, evaluator, 1, 0)?;
    if stage2.num_steps == 0 {
        return Ok(checkpoints);
    }
    let mut cfg2 = stage2.clone();
    cfg2.freeze_featurizer = target != StageTarget::Full;
    if target == StageTarget::FreshHead {
        model.reset_head(&mut ChaCha8Rng::seed_from_u64(stage2.seed.rotate_left(17)));
    }
    let second = TrainData::new(data.clone(), &cfg2.weighting)?;
    checkpoints.extend(train_stage(
        model,
        &second,
        &cfg2,
        objective2,
        evaluator,
        2,
        stage1.num_steps,
    )?);
    Ok(checkpoints)
}
