//! The algorithm roster: losses, weighting and sampling rules, penalties
//! and multi-stage schedules expressed over the trainer.

pub mod dfr;
pub mod hparams;
pub mod losses;
pub mod objectives;
pub mod runner;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dfr::Penalty;
pub use hparams::Hyperparams;
pub use runner::{run, Method, RunConfig, RunOutput, StageScheme};

#[allow(clippy::upper_case_acronyms)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    ERM,
    Mixup,
    GroupDRO,
    CVaRDRO,
    JTT,
    LfF,
    LISA,
    DFR,
    IRM,
    CORAL,
    MMD,
    ReSample,
    ReWeight,
    SqrtReWeight,
    Focal,
    CBLoss,
    LDAM,
    BSoftmax,
    CRT,
    ReWeightCRT,
}

impl Algorithm {
    pub const ALL: [Algorithm; 20] = [
        Algorithm::ERM,
        Algorithm::Mixup,
        Algorithm::GroupDRO,
        Algorithm::CVaRDRO,
        Algorithm::JTT,
        Algorithm::LfF,
        Algorithm::LISA,
        Algorithm::DFR,
        Algorithm::IRM,
        Algorithm::CORAL,
        Algorithm::MMD,
        Algorithm::ReSample,
        Algorithm::ReWeight,
        Algorithm::SqrtReWeight,
        Algorithm::Focal,
        Algorithm::CBLoss,
        Algorithm::LDAM,
        Algorithm::BSoftmax,
        Algorithm::CRT,
        Algorithm::ReWeightCRT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ERM => "ERM",
            Algorithm::Mixup => "Mixup",
            Algorithm::GroupDRO => "GroupDRO",
            Algorithm::CVaRDRO => "CVaRDRO",
            Algorithm::JTT => "JTT",
            Algorithm::LfF => "LfF",
            Algorithm::LISA => "LISA",
            Algorithm::DFR => "DFR",
            Algorithm::IRM => "IRM",
            Algorithm::CORAL => "CORAL",
            Algorithm::MMD => "MMD",
            Algorithm::ReSample => "ReSample",
            Algorithm::ReWeight => "ReWeight",
            Algorithm::SqrtReWeight => "SqrtReWeight",
            Algorithm::Focal => "Focal",
            Algorithm::CBLoss => "CBLoss",
            Algorithm::LDAM => "LDAM",
            Algorithm::BSoftmax => "BSoftmax",
            Algorithm::CRT => "CRT",
            Algorithm::ReWeightCRT => "ReWeightCRT",
        }
    }

    /// Methods that need group annotations on the training split.
    pub fn requires_train_attributes(self) -> bool {
        matches!(
            self,
            Algorithm::GroupDRO | Algorithm::LISA | Algorithm::IRM | Algorithm::CORAL | Algorithm::MMD | Algorithm::DFR
        )
    }

    /// Methods trained in two stages; selection reads only the second.
    pub fn is_multi_stage(self) -> bool {
        matches!(self, Algorithm::JTT | Algorithm::DFR | Algorithm::CRT | Algorithm::ReWeightCRT)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownAlgorithm(s.to_string()))
    }
}

/// An algorithm with concrete hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub name: Algorithm,
    pub hyperparameters: Hyperparams,
}

impl AlgorithmSpec {
    pub fn new(name: Algorithm, hyperparameters: Hyperparams) -> Result<Self> {
        hparams::check_names(name, &hyperparameters)?;
        Ok(Self { name, hyperparameters })
    }

    pub fn defaults(name: Algorithm) -> Self {
        Self {
            name,
            hyperparameters: hparams::defaults(name),
        }
    }

    pub fn requires_train_attributes(&self) -> bool {
        self.name.requires_train_attributes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roster_strings_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.name()));
        }
        assert!("Dropout".parse::<Algorithm>().is_err());
    }

    #[test]
    fn attribute_requirements() {
        let flagged: Vec<_> = Algorithm::ALL.into_iter().filter(|a| a.requires_train_attributes()).collect();
        assert_eq!(
            flagged,
            vec![Algorithm::GroupDRO, Algorithm::LISA, Algorithm::DFR, Algorithm::IRM, Algorithm::CORAL, Algorithm::MMD]
        );
    }
}
