//! Turns a method, hyperparameters and a regime into trained checkpoints.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dfr::{dfr_retrain, Penalty, DEFAULT_SUBSAMPLES};
use super::hparams::{self, Hyperparams};
use super::losses::{class_balanced_weights, ldam_margins, log_priors};
use super::objectives::*;
use super::Algorithm;
use crate::data::{degenerate_groups_to_classes, Dataset, SplitSet};
use crate::error::{Error, Result};
use crate::selection::Regime;
use crate::trainer::{
    feature_matrix, normalize_mean_one, train_stage, two_stage_train, Architecture, Checkpoint, CrossEntropy,
    Evaluator, Model, Objective, Sampling, StageTarget, TrainConfig, TrainData, Weighting, DEFAULT_MOMENTUM,
};

/// How a stage treats the training distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageScheme {
    Uniform,
    /// Group-balanced sampling.
    Balanced,
    /// Inverse-group-frequency loss weights.
    Reweight,
}

impl StageScheme {
    pub const ALL: [StageScheme; 3] = [StageScheme::Uniform, StageScheme::Balanced, StageScheme::Reweight];

    pub fn name(self) -> &'static str {
        match self {
            StageScheme::Uniform => "uniform",
            StageScheme::Balanced => "balanced",
            StageScheme::Reweight => "reweight",
        }
    }

    fn apply(self, cfg: &mut TrainConfig) {
        match self {
            StageScheme::Uniform => {}
            StageScheme::Balanced => cfg.sampling = Sampling::GroupBalanced,
            StageScheme::Reweight => cfg.weighting = Weighting::GroupInverse,
        }
    }
}

impl FromStr for StageScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageScheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage scheme `{s}`")))
    }
}

/// A roster algorithm, or a decoupled two-stage schedule in which the
/// representation and the classifier are trained under separate schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Algorithm(Algorithm),
    Decoupled {
        representation: StageScheme,
        classifier: StageScheme,
    },
}

impl Method {
    pub fn hparam_algorithm(self) -> Algorithm {
        match self {
            Method::Algorithm(a) => a,
            Method::Decoupled { .. } => Algorithm::ERM,
        }
    }

    pub fn requires_train_attributes(self) -> bool {
        match self {
            Method::Algorithm(a) => a.requires_train_attributes(),
            Method::Decoupled { .. } => false,
        }
    }
}

impl From<Algorithm> for Method {
    fn from(a: Algorithm) -> Self {
        Method::Algorithm(a)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Algorithm(a) => f.write_str(a.name()),
            Method::Decoupled {
                representation,
                classifier,
            } => write!(f, "decoupled:{}/{}", representation.name(), classifier.name()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("decoupled:") {
            let (r, c) = rest
                .split_once('/')
                .ok_or_else(|| Error::Config(format!("expected decoupled:<rep>/<cls>, got `{s}`")))?;
            return Ok(Method::Decoupled {
                representation: r.parse()?,
                classifier: c.parse()?,
            });
        }
        Ok(Method::Algorithm(s.parse()?))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

fn default_steps() -> usize {
    1000
}

/// Everything needed to train one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    /// Missing entries fall back to the method's defaults.
    #[serde(default)]
    pub hparams: Hyperparams,
    #[serde(default)]
    pub arch: Architecture,
    #[serde(default = "default_steps")]
    pub num_steps: usize,
    #[serde(default)]
    pub eval_every: Option<usize>,
    pub seed: u64,
    pub regime: Regime,
    /// Lets attribute-requiring methods run on class-degenerated groups
    /// when train attributes are unknown.
    #[serde(default)]
    pub allow_degenerate: bool,
    #[serde(default)]
    pub dfr_penalty: Penalty,
}

impl RunConfig {
    pub fn new(method: impl Into<Method>, seed: u64, regime: Regime) -> Self {
        Self {
            method: method.into(),
            hparams: Hyperparams::default(),
            arch: Architecture::default(),
            num_steps: default_steps(),
            eval_every: None,
            seed,
            regime,
            allow_degenerate: false,
            dfr_penalty: Penalty::L2,
        }
    }

    /// Defaults overlaid with the configured values.
    pub fn resolved_hparams(&self) -> Hyperparams {
        let mut hp = hparams::defaults(self.method.hparam_algorithm());
        for (k, v) in &self.hparams.0 {
            hp.set(k, *v);
        }
        hp
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub checkpoints: Vec<Checkpoint>,
    /// Non-fatal conditions met during training.
    pub notes: Vec<String>,
}

/// Independent stream for component `tag` of a run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Train and validation views under `regime`: unknown attributes are
/// replaced by the label. Test keeps its attributes.
pub fn regime_views(splits: &SplitSet, regime: Regime) -> (Dataset, Evaluator) {
    let train = if regime.train_attrs_known {
        splits.train.clone()
    } else {
        degenerate_groups_to_classes(&splits.train)
    };
    let val = if regime.val_attrs_known {
        splits.val.clone()
    } else {
        degenerate_groups_to_classes(&splits.val)
    };
    (train, Evaluator::new(val, splits.test.clone()))
}

fn with_class_weights(data: &Dataset, per_class: &[f64]) -> Result<Dataset> {
    let mut w: Vec<f64> = data.examples().iter().map(|e| per_class[e.label]).collect();
    normalize_mean_one(&mut w)?;
    data.with_weights(&w)
}

fn stage2_steps(num_steps: usize) -> usize {
    (num_steps / 2).max(1)
}

/// Trains `cfg.method` on `splits` and returns every checkpoint.
pub fn run(cfg: &RunConfig, splits: &SplitSet) -> Result<RunOutput> {
    Regime::new(cfg.regime.train_attrs_known, cfg.regime.val_attrs_known)?;
    if cfg.method.requires_train_attributes() && !cfg.regime.train_attrs_known && !cfg.allow_degenerate {
        return Err(Error::Config(format!(
            "{} needs train attributes; regime {} hides them (enable degeneration to classes to run anyway)",
            cfg.method, cfg.regime
        )));
    }
    let hp = cfg.resolved_hparams();
    hparams::check_names(cfg.method.hparam_algorithm(), &hp)?;
    let (train, evaluator) = regime_views(splits, cfg.regime);
    let mut base = TrainConfig::new(hp.learning_rate()?, hp.batch_size()?, cfg.num_steps, derive_seed(cfg.seed, 1));
    base.eval_every = cfg.eval_every;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let mut model = Model::new(cfg.arch, train.dim(), train.num_classes(), &mut init_rng);
    let mut notes = Vec::new();

    let alg = match cfg.method {
        Method::Decoupled {
            representation,
            classifier,
        } => {
            let mut s1 = base.clone();
            representation.apply(&mut s1);
            let mut s2 = base.clone();
            s2.seed = derive_seed(cfg.seed, 3);
            s2.num_steps = if classifier == representation { 0 } else { stage2_steps(cfg.num_steps) };
            classifier.apply(&mut s2);
            let checkpoints = two_stage_train(
                &mut model,
                &train,
                &s1,
                &s2,
                StageTarget::FreshHead,
                &mut CrossEntropy,
                &mut CrossEntropy,
                &evaluator,
            )?;
            return Ok(RunOutput { checkpoints, notes });
        }
        Method::Algorithm(a) => a,
    };

    let single = |model: &mut Model, data: Dataset, tc: &TrainConfig, obj: &mut dyn Objective| {
        let td = TrainData::new(data, &tc.weighting)?;
        train_stage(model, &td, tc, obj, &evaluator, 1, 0)
    };
    let class_counts = train.class_counts();
    let checkpoints = match alg {
        Algorithm::ERM => single(&mut model, train, &base, &mut CrossEntropy)?,
        Algorithm::ReSample => {
            base.sampling = Sampling::GroupBalanced;
            single(&mut model, train, &base, &mut CrossEntropy)?
        }
        Algorithm::ReWeight | Algorithm::SqrtReWeight => {
            base.weighting = if alg == Algorithm::ReWeight {
                Weighting::GroupInverse
            } else {
                Weighting::SqrtGroupInverse
            };
            single(&mut model, train, &base, &mut CrossEntropy)?
        }
        Algorithm::CBLoss => {
            let w = class_balanced_weights(&class_counts, hp.get("cb_beta")?)?;
            let data = with_class_weights(&train, &w)?;
            base.weighting = Weighting::Custom;
            single(&mut model, data, &base, &mut CrossEntropy)?
        }
        Algorithm::Focal => single(
            &mut model,
            train,
            &base,
            &mut Focal {
                gamma: hp.get("focal_gamma")?,
            },
        )?,
        Algorithm::LDAM => {
            let mut obj = Ldam {
                margins: ldam_margins(&class_counts, hp.get("ldam_max_m")?)?,
                scale: hp.get("ldam_scale")?,
            };
            single(&mut model, train, &base, &mut obj)?
        }
        Algorithm::BSoftmax => {
            let mut obj = BalancedSoftmax {
                log_priors: log_priors(&class_counts)?,
            };
            single(&mut model, train, &base, &mut obj)?
        }
        Algorithm::GroupDRO => {
            let mut obj = GroupDro::new(hp.get("groupdro_eta")?, train.num_groups());
            single(&mut model, train, &base, &mut obj)?
        }
        Algorithm::CVaRDRO => single(
            &mut model,
            train,
            &base,
            &mut CvarDro {
                alpha: hp.get("cvar_alpha")?,
            },
        )?,
        Algorithm::IRM => {
            let mut obj = Irm {
                lambda: hp.get("irm_lambda")?,
                anneal_iters: hp.get("irm_anneal_iters")?.floor() as usize,
            };
            single(&mut model, train, &base, &mut obj)?
        }
        Algorithm::CORAL => single(
            &mut model,
            train,
            &base,
            &mut Coral {
                gamma: hp.get("penalty_gamma")?,
            },
        )?,
        Algorithm::MMD => single(
            &mut model,
            train,
            &base,
            &mut Mmd {
                gamma: hp.get("penalty_gamma")?,
                median: None,
            },
        )?,
        Algorithm::Mixup => single(
            &mut model,
            train,
            &base,
            &mut Mixup {
                alpha: hp.get("mixup_alpha")?,
                fixed_lambda: None,
            },
        )?,
        Algorithm::LISA => {
            let mut obj = Lisa::new(hp.get("lisa_alpha")?, hp.get("lisa_p_select")?);
            let out = single(&mut model, train, &base, &mut obj)?;
            report_lisa(&obj);
            if obj.fallbacks > 0 {
                notes.push(format!("LISA: {} unmixed examples", obj.fallbacks));
            }
            out
        }
        Algorithm::LfF => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
            let biased = Model::new(cfg.arch, train.dim(), train.num_classes(), &mut rng);
            let mut obj = Lff::new(hp.get("lff_q")?, biased, base.learning_rate, DEFAULT_MOMENTUM);
            single(&mut model, train, &base, &mut obj)?
        }
        Algorithm::CRT | Algorithm::ReWeightCRT => {
            let mut s2 = base.clone();
            s2.seed = derive_seed(cfg.seed, 3);
            s2.num_steps = stage2_steps(cfg.num_steps);
            if alg == Algorithm::CRT {
                s2.sampling = Sampling::GroupBalanced;
            } else {
                s2.weighting = Weighting::GroupInverse;
            }
            two_stage_train(
                &mut model,
                &train,
                &base,
                &s2,
                StageTarget::FreshHead,
                &mut CrossEntropy,
                &mut CrossEntropy,
                &evaluator,
            )?
        }
        Algorithm::JTT => run_jtt(cfg, &hp, &train, &base, &mut model, &evaluator, &mut notes)?,
        Algorithm::DFR => {
            let td = TrainData::new(train, &Weighting::None)?;
            let mut cks = train_stage(&mut model, &td, &base, &mut CrossEntropy, &evaluator, 1, 0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 5));
            let objective = dfr_retrain(
                &mut model,
                &evaluator.val,
                hp.get("dfr_reg")?,
                cfg.dfr_penalty,
                DEFAULT_SUBSAMPLES,
                &mut rng,
            )?;
            cks.push(evaluator.checkpoint(&model, cfg.num_steps + 1, 2, objective)?);
            cks
        }
    };
    Ok(RunOutput { checkpoints, notes })
}

/// Stage 1: ERM for `frac·num_steps`. Stage 2: a fresh model trained for
/// the remaining steps with weight `λ` on the examples stage 1
/// misclassified (weights renormalized to mean 1).
fn run_jtt(
    cfg: &RunConfig,
    hp: &Hyperparams,
    train: &Dataset,
    base: &TrainConfig,
    model: &mut Model,
    evaluator: &Evaluator,
    notes: &mut Vec<String>,
) -> Result<Vec<Checkpoint>> {
    let frac = hp.get("jtt_first_stage_frac")?;
    let lambda = hp.get("jtt_lambda")?;
    if !(frac > 0.0 && frac < 1.0) || lambda < 1.0 {
        return Err(Error::Config(format!("JTT needs 0 < frac < 1 and lambda ≥ 1, got {frac}, {lambda}")));
    }
    let s1_steps = ((frac * cfg.num_steps as f64).round() as usize).clamp(1, cfg.num_steps.saturating_sub(1).max(1));
    let mut s1 = base.clone();
    s1.num_steps = s1_steps;
    let td = TrainData::new(train.clone(), &Weighting::None)?;
    let mut cks = train_stage(model, &td, &s1, &mut CrossEntropy, evaluator, 1, 0)?;

    let errors = error_set(model, train)?;
    if errors.is_empty() {
        warn!("JTT: stage 1 fits the training set; stage 2 is plain ERM");
        notes.push("JTT: empty error set".into());
    }
    let mut weights = vec![1.0; train.len()];
    for &i in &errors {
        weights[i] = lambda;
    }
    normalize_mean_one(&mut weights)?;
    let weighted = train.with_weights(&weights)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4));
    *model = Model::new(model.architecture(), train.dim(), train.num_classes(), &mut rng);
    let mut s2 = base.clone();
    s2.num_steps = cfg.num_steps.saturating_sub(s1_steps).max(1);
    s2.seed = derive_seed(cfg.seed, 3);
    s2.weighting = Weighting::Custom;
    let td2 = TrainData::new(weighted, &Weighting::Custom)?;
    cks.extend(train_stage(model, &td2, &s2, &mut CrossEntropy, evaluator, 2, s1_steps)?);
    Ok(cks)
}

/// Indices of training examples the model misclassifies.
pub fn error_set(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    let preds = model.predict(&feature_matrix(data))?;
    Ok(preds
        .iter()
        .zip(data.examples())
        .enumerate()
        .filter(|(_, (p, e))| p.predicted != e.label)
        .map(|(i, _)| i)
        .collect())
}
