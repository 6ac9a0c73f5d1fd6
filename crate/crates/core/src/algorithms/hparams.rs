//! Per-algorithm hyperparameter defaults and random-search distributions.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Algorithm;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Dist {
    /// `10^U(lo, hi)`
    LogUniform { lo: f64, hi: f64 },
    /// `U(lo, hi)`
    Uniform { lo: f64, hi: f64 },
    /// `scale · 10^U(lo, hi)`
    ScaledLogUniform { scale: f64, lo: f64, hi: f64 },
    /// `1 − 10^U(lo, hi)`
    OneMinusLogUniform { lo: f64, hi: f64 },
    /// `2^U(lo, hi)`
    Pow2Uniform { lo: f64, hi: f64 },
    Choice { values: Vec<f64> },
}

impl Dist {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        match self {
            Dist::LogUniform { lo, hi } => 10f64.powf(u(rng, *lo, *hi)),
            Dist::Uniform { lo, hi } => u(rng, *lo, *hi),
            Dist::ScaledLogUniform { scale, lo, hi } => scale * 10f64.powf(u(rng, *lo, *hi)),
            Dist::OneMinusLogUniform { lo, hi } => 1.0 - 10f64.powf(u(rng, *lo, *hi)),
            Dist::Pow2Uniform { lo, hi } => 2f64.powf(u(rng, *lo, *hi)),
            Dist::Choice { values } => values[rng.random_range(0..values.len())],
        }
    }

    /// Closed support `[min, max]`.
    pub fn support(&self) -> (f64, f64) {
        match self {
            Dist::LogUniform { lo, hi } => (10f64.powf(*lo), 10f64.powf(*hi)),
            Dist::Uniform { lo, hi } => (*lo, *hi),
            Dist::ScaledLogUniform { scale, lo, hi } => (scale * 10f64.powf(*lo), scale * 10f64.powf(*hi)),
            Dist::OneMinusLogUniform { lo, hi } => (1.0 - 10f64.powf(*hi), 1.0 - 10f64.powf(*lo)),
            Dist::Pow2Uniform { lo, hi } => (2f64.powf(*lo), 2f64.powf(*hi)),
            Dist::Choice { values } => (
                values.iter().copied().fold(f64::INFINITY, f64::min),
                values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        let (lo, hi) = self.support();
        match self {
            Dist::Choice { values } => values.contains(&v),
            _ => v >= lo && v <= hi,
        }
    }

    /// For exponential families, the underlying uniform exponent of `v`
    /// and its interval; `None` for `Uniform` and `Choice`.
    pub fn exponent(&self, v: f64) -> Option<(f64, f64, f64)> {
        match self {
            Dist::LogUniform { lo, hi } => Some((v.log10(), *lo, *hi)),
            Dist::ScaledLogUniform { scale, lo, hi } => Some(((v / scale).log10(), *lo, *hi)),
            Dist::OneMinusLogUniform { lo, hi } => Some(((1.0 - v).log10(), *lo, *hi)),
            Dist::Pow2Uniform { lo, hi } => Some((v.log2(), *lo, *hi)),
            Dist::Uniform { .. } | Dist::Choice { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HparamDef {
    pub name: &'static str,
    pub default: f64,
    pub dist: Dist,
}

fn def(name: &'static str, default: f64, dist: Dist) -> HparamDef {
    HparamDef { name, default, dist }
}

fn log_u(lo: f64, hi: f64) -> Dist {
    Dist::LogUniform { lo, hi }
}

pub const LR: &str = "lr";
pub const BATCH_SIZE: &str = "batch_size";

/// Search space of `algorithm` for the MLP track, general entries first.
pub fn space(algorithm: Algorithm) -> Vec<HparamDef> {
    let mut s = vec![
        def(LR, 1e-3, log_u(-4.0, -2.0)),
        def(BATCH_SIZE, 256.0, Dist::Pow2Uniform { lo: 7.0, hi: 10.0 }),
    ];
    use Algorithm::*;
    match algorithm {
        IRM => {
            s.push(def("irm_lambda", 100.0, log_u(-1.0, 5.0)));
            s.push(def("irm_anneal_iters", 500.0, log_u(0.0, 4.0)));
        }
        GroupDRO => s.push(def("groupdro_eta", 0.01, log_u(-3.0, -1.0))),
        Mixup => s.push(def("mixup_alpha", 0.2, log_u(0.0, 4.0))),
        CVaRDRO => s.push(def("cvar_alpha", 0.1, log_u(-2.0, 0.0))),
        JTT => {
            s.push(def("jtt_first_stage_frac", 0.5, Dist::Uniform { lo: 0.2, hi: 0.8 }));
            s.push(def("jtt_lambda", 10.0, log_u(0.0, 2.5)));
        }
        LISA => {
            s.push(def("lisa_alpha", 2.0, log_u(-1.0, 1.0)));
            s.push(def("lisa_p_select", 0.5, Dist::Uniform { lo: 0.0, hi: 1.0 }));
        }
        LfF => s.push(def("lff_q", 0.7, Dist::Uniform { lo: 0.05, hi: 0.95 })),
        DFR => s.push(def("dfr_reg", 0.1, log_u(-2.0, 0.5))),
        CORAL | MMD => s.push(def("penalty_gamma", 1.0, log_u(-1.0, 1.0))),
        Focal => s.push(def(
            "focal_gamma",
            1.0,
            Dist::ScaledLogUniform {
                scale: 0.5,
                lo: 0.0,
                hi: 1.0,
            },
        )),
        CBLoss => s.push(def("cb_beta", 0.9999, Dist::OneMinusLogUniform { lo: -5.0, hi: -2.0 })),
        LDAM => {
            s.push(def("ldam_max_m", 0.5, log_u(-1.0, -0.1)));
            s.push(def(
                "ldam_scale",
                30.0,
                Dist::Choice {
                    values: vec![10.0, 30.0],
                },
            ));
        }
        ERM | ReSample | ReWeight | SqrtReWeight | BSoftmax | CRT | ReWeightCRT => {}
    }
    s
}

/// Named hyperparameter values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Hyperparams(pub BTreeMap<String, f64>);

impl Hyperparams {
    pub fn get(&self, name: &str) -> Result<f64> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing hyperparameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, value: f64) -> &mut Self {
        self.0.insert(name.to_string(), value);
        self
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.set(name, value);
        self
    }

    pub fn learning_rate(&self) -> Result<f64> {
        self.get(LR)
    }

    /// Sampled batch sizes are truncated to an integer.
    pub fn batch_size(&self) -> Result<usize> {
        Ok((self.get(BATCH_SIZE)?.floor() as usize).max(1))
    }
}

pub fn defaults(algorithm: Algorithm) -> Hyperparams {
    Hyperparams(
        space(algorithm)
            .into_iter()
            .map(|d| (d.name.to_string(), d.default))
            .collect(),
    )
}

pub fn sample(algorithm: Algorithm, rng: &mut impl Rng) -> Hyperparams {
    Hyperparams(
        space(algorithm)
            .into_iter()
            .map(|d| (d.name.to_string(), d.dist.sample(rng)))
            .collect(),
    )
}

/// Every named value lies in its distribution's support.
pub fn check_in_space(algorithm: Algorithm, hp: &Hyperparams) -> Result<()> {
    for d in space(algorithm) {
        let v = hp.get(d.name)?;
        if !d.dist.contains(v) {
            return Err(Error::Config(format!("{} = {v} outside {:?}", d.name, d.dist.support())));
        }
    }
    Ok(())
}

/// Every value of the space is present and no unknown name is given.
/// Values are not range-checked here: defaults may lie outside the search
/// distribution (Mixup's α = 0.2 against 10^U(0, 4)), and each loss
/// validates its own domain.
pub fn check_names(algorithm: Algorithm, hp: &Hyperparams) -> Result<()> {
    let defs = space(algorithm);
    for d in &defs {
        hp.get(d.name)?;
    }
    if let Some(extra) = hp.0.keys().find(|k| !defs.iter().any(|d| d.name == k.as_str())) {
        return Err(Error::Config(format!("{algorithm} has no hyperparameter `{extra}`")));
    }
    Ok(())
}
