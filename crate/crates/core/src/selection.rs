//! Model selection over checkpoint logs and hyperparameter trials.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{compare_optional, Metric, MetricsReport};
use crate::trainer::Checkpoint;

/// Which splits carry attribute annotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Regime {
    pub train_attrs_known: bool,
    pub val_attrs_known: bool,
}

impl Regime {
    pub const TT: Regime = Regime {
        train_attrs_known: true,
        val_attrs_known: true,
    };
    pub const FT: Regime = Regime {
        train_attrs_known: false,
        val_attrs_known: true,
    };
    pub const FF: Regime = Regime {
        train_attrs_known: false,
        val_attrs_known: false,
    };
    pub const ALL: [Regime; 3] = [Regime::TT, Regime::FT, Regime::FF];

    /// Known train attributes with unknown validation attributes is rejected.
    pub fn new(train_attrs_known: bool, val_attrs_known: bool) -> Result<Self> {
        if train_attrs_known && !val_attrs_known {
            return Err(Error::Config(
                "regime with train attributes known but validation attributes unknown is not supported".into(),
            ));
        }
        Ok(Self {
            train_attrs_known,
            val_attrs_known,
        })
    }

    pub fn code(self) -> &'static str {
        match (self.train_attrs_known, self.val_attrs_known) {
            (true, true) => "TT",
            (false, true) => "FT",
            (false, false) => "FF",
            (true, false) => "TF",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let flag = |c: char| match c {
            'T' | 't' => Ok(true),
            'F' | 'f' => Ok(false),
            _ => Err(Error::Config(format!("regime must be two of T/F, got `{s}`"))),
        };
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 2 {
            return Err(Error::Config(format!("regime must be two of T/F, got `{s}`")));
        }
        Regime::new(flag(chars[0])?, flag(chars[1])?)
    }
}

impl TryFrom<String> for Regime {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Regime> for String {
    fn from(r: Regime) -> String {
        r.code().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    OracleTestWga,
    MaxWorstGroupAcc,
    MaxWorstClassAcc,
    MaxBalancedAcc,
    MinClassAccDiff,
    MaxWorstClassF1,
    MaxMacroF1,
    MinPerClassRecallStd,
    MaxWeightedPrecision,
    MaxAuroc,
    MaxAuprc,
    MinBce,
    MaxPerClassPrecision,
    MaxOverallAcc,
    MinBrier,
    MinEce,
}

impl Strategy {
    pub const ALL: [Strategy; 16] = [
        Strategy::OracleTestWga,
        Strategy::MaxWorstGroupAcc,
        Strategy::MaxWorstClassAcc,
        Strategy::MaxBalancedAcc,
        Strategy::MinClassAccDiff,
        Strategy::MaxWorstClassF1,
        Strategy::MaxMacroF1,
        Strategy::MinPerClassRecallStd,
        Strategy::MaxWeightedPrecision,
        Strategy::MaxAuroc,
        Strategy::MaxAuprc,
        Strategy::MinBce,
        Strategy::MaxPerClassPrecision,
        Strategy::MaxOverallAcc,
        Strategy::MinBrier,
        Strategy::MinEce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::OracleTestWga => "oracle_test_wga",
            Strategy::MaxWorstGroupAcc => "max_worst_group_acc",
            Strategy::MaxWorstClassAcc => "max_worst_class_acc",
            Strategy::MaxBalancedAcc => "max_balanced_acc",
            Strategy::MinClassAccDiff => "min_class_acc_diff",
            Strategy::MaxWorstClassF1 => "max_worst_class_f1",
            Strategy::MaxMacroF1 => "max_macro_f1",
            Strategy::MinPerClassRecallStd => "min_per_class_recall_std",
            Strategy::MaxWeightedPrecision => "max_weighted_precision",
            Strategy::MaxAuroc => "max_auroc",
            Strategy::MaxAuprc => "max_auprc",
            Strategy::MinBce => "min_bce",
            Strategy::MaxPerClassPrecision => "max_per_class_precision",
            Strategy::MaxOverallAcc => "max_overall_acc",
            Strategy::MinBrier => "min_brier",
            Strategy::MinEce => "min_ece",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Strategy::MinClassAccDiff
            | Strategy::MinPerClassRecallStd
            | Strategy::MinBce
            | Strategy::MinBrier
            | Strategy::MinEce => Direction::Minimize,
            _ => Direction::Maximize,
        }
    }

    /// The validation metric the strategy ranks by under `regime`.
    /// Worst-group selection without validation attributes ranks by
    /// worst-class accuracy. `None` for the oracle, which reads test WGA.
    pub fn val_metric(self, regime: Regime) -> Option<Metric> {
        Some(match self {
            Strategy::OracleTestWga => return None,
            Strategy::MaxWorstGroupAcc if regime.val_attrs_known => Metric::WorstGroupAcc,
            Strategy::MaxWorstGroupAcc | Strategy::MaxWorstClassAcc => Metric::WorstClassAcc,
            Strategy::MaxBalancedAcc => Metric::BalancedAcc,
            Strategy::MinClassAccDiff => Metric::ClassAccDiff,
            Strategy::MaxWorstClassF1 => Metric::WorstF1,
            Strategy::MaxMacroF1 => Metric::AvgF1,
            Strategy::MinPerClassRecallStd => Metric::RecallStd,
            Strategy::MaxWeightedPrecision => Metric::WeightedPrecision,
            Strategy::MaxAuroc => Metric::Auroc,
            Strategy::MaxAuprc => Metric::Auprc,
            Strategy::MinBce => Metric::Bce,
            Strategy::MaxPerClassPrecision => Metric::WorstPrecision,
            Strategy::MaxOverallAcc => Metric::AvgAcc,
            Strategy::MinBrier => Metric::Brier,
            Strategy::MinEce => Metric::Ece,
        })
    }

    /// Score of a checkpoint, oriented so that larger is better.
    pub fn score(self, regime: Regime, val: &MetricsReport, test: &MetricsReport) -> Option<f64> {
        let raw = match self.val_metric(regime) {
            None => Some(test.worst_group_acc),
            Some(m) => m.value(val),
        }?;
        Some(match self.direction() {
            Direction::Maximize => raw,
            Direction::Minimize => -raw,
        })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

/// Index of the first best element under `score` (larger is better;
/// `None` ranks below every value).
fn first_best<T>(items: &[T], score: impl Fn(&T) -> Option<f64>) -> usize {
    let mut best = 0;
    let mut best_score = score(&items[0]);
    for (i, item) in items.iter().enumerate().skip(1) {
        let s = score(item);
        if compare_optional(s, best_score) == Ordering::Greater {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Checkpoints of the last training stage; multi-stage algorithms are
/// selected only among models produced by their final stage.
pub fn final_stage(log: &[Checkpoint]) -> impl Iterator<Item = (usize, &Checkpoint)> {
    let last = log.iter().map(|c| c.stage).max().unwrap_or(0);
    log.iter().enumerate().filter(move |(_, c)| c.stage == last)
}

/// Index into `log` of the chosen checkpoint; ties go to the earliest.
pub fn select_checkpoint(log: &[Checkpoint], strategy: Strategy, regime: Regime) -> Result<usize> {
    let candidates: Vec<(usize, &Checkpoint)> = final_stage(log).collect();
    if candidates.is_empty() {
        return Err(Error::Config("selection over an empty checkpoint log".into()));
    }
    let best = first_best(&candidates, |(_, c)| strategy.score(regime, &c.val, &c.test));
    if strategy.score(regime, &candidates[best].1.val, &candidates[best].1.test).is_none() {
        warn!("{strategy}: metric undefined on every checkpoint; keeping the earliest");
    }
    Ok(candidates[best].0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub strategy: Strategy,
    pub regime: Regime,
    pub trial: usize,
    /// Index into the chosen trial's checkpoint log.
    pub checkpoint: usize,
    pub step: usize,
    /// Validation value of the strategy's metric (test WGA for the oracle).
    pub score: Option<f64>,
    pub test: MetricsReport,
    /// Test WGA of this choice minus that of the oracle choice; never positive.
    pub gap_to_oracle: f64,
}

/// Selects a checkpoint within each trial, then the best trial by the
/// same criterion. Ties go to the earliest trial.
pub fn select(trials: &[Vec<Checkpoint>], strategy: Strategy, regime: Regime) -> Result<SelectionOutcome> {
    if trials.is_empty() {
        return Err(Error::Config("selection over zero trials".into()));
    }
    let pick = |st: Strategy| -> Result<(usize, usize)> {
        let per: Vec<usize> = trials
            .iter()
            .map(|log| select_checkpoint(log, st, regime))
            .collect::<Result<_>>()?;
        let t = first_best(&per.iter().enumerate().collect::<Vec<_>>(), |(t, &c)| {
            let ck = &trials[*t][c];
            st.score(regime, &ck.val, &ck.test)
        });
        Ok((t, per[t]))
    };
    let (trial, idx) = pick(strategy)?;
    let (ot, oi) = pick(Strategy::OracleTestWga)?;
    let chosen = &trials[trial][idx];
    let oracle_wga = trials[ot][oi].test.worst_group_acc;
    let raw = match strategy.val_metric(regime) {
        None => Some(chosen.test.worst_group_acc),
        Some(m) => m.value(&chosen.val),
    };
    Ok(SelectionOutcome {
        strategy,
        regime,
        trial,
        checkpoint: idx,
        step: chosen.step,
        score: raw,
        test: chosen.test.clone(),
        gap_to_oracle: chosen.test.worst_group_acc - oracle_wga,
    })
}

/// Mean and sample standard deviation (`n − 1`); sd is `None` for one value.
pub fn mean_sd(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some((m, sd))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub strategy: Strategy,
    pub mean_gap: f64,
    pub sd_gap: Option<f64>,
    pub units: usize,
}

/// Mean oracle gap of each strategy over selection units, one unit per
/// (dataset, algorithm, seed), each holding that unit's trial logs.
pub fn oracle_gap_table(units: &[Vec<Vec<Checkpoint>>], strategies: &[Strategy], regime: Regime) -> Result<Vec<GapRow>> {
    strategies
        .iter()
        .map(|&st| {
            let gaps: Vec<f64> = units
                .iter()
                .map(|trials| select(trials, st, regime).map(|o| o.gap_to_oracle))
                .collect::<Result<_>>()?;
            let (mean_gap, sd_gap) =
                mean_sd(&gaps).ok_or_else(|| Error::Config("oracle gap table over zero units".into()))?;
            Ok(GapRow {
                strategy: st,
                mean_gap,
                sd_gap,
                units: gaps.len(),
            })
        })
        .collect()
}
