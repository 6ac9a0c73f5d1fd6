//! Shift-severity statistics over the joint distribution of attribute and
//! label, and the dominant-shift bucketing built on them. Logs are base 2.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::shiftgen::ShiftType;

/// `A × C` table of counts `n(a, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let cols = counts.first().map_or(0, Vec::len);
        if counts.is_empty() || cols == 0 || counts.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidData("contingency table must be a nonempty rectangle".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_dataset(data: &Dataset) -> Self {
        let mut counts = vec![vec![0u64; data.num_classes()]; data.num_attributes()];
        for e in data.examples() {
            counts[e.attribute][e.label] += 1;
        }
        Self { counts }
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn num_attributes(&self) -> usize {
        self.counts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.counts[0].len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn attribute_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn class_totals(&self) -> Vec<u64> {
        (0..self.num_classes())
            .map(|y| self.counts.iter().map(|r| r[y]).sum())
            .collect()
    }

    fn require_mass(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Undefined("statistic of an empty contingency table".into())),
            n => Ok(n as f64),
        }
    }
}

fn marginal(totals: &[u64]) -> Vec<f64> {
    let n: u64 = totals.iter().sum();
    totals.iter().map(|&v| v as f64 / n as f64).collect()
}

fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

/// Entropy in bits of the distribution given by nonnegative counts. Terms
/// use the exact count ratio `n / c` so equal marginals give equal sums.
fn entropy_bits_of_counts(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| c as f64 / n as f64 * (n as f64 / c as f64).log2())
        .sum()
}

/// `I(A; Y)` in bits. Each term is `(c/n)·log2(c·n / (r·s))` with the
/// ratio formed from integer products, so independent cells contribute
/// exactly 0.
pub fn mutual_information(t: &ContingencyTable) -> Result<f64> {
    let n = t.require_mass()? as u128;
    let ra = t.attribute_totals();
    let cy = t.class_totals();
    let mut mi = 0.0;
    for (a, row) in t.counts.iter().enumerate() {
        for (y, &c) in row.iter().enumerate() {
            if c > 0 {
                let ratio = (c as u128 * n) as f64 / (ra[a] as u128 * cy[y] as u128) as f64;
                mi += c as f64 / n as f64 * ratio.log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// `2 I(A; Y) / (H(A) + H(Y))`; 0 with a warning when both entropies vanish.
pub fn normalized_mi(t: &ContingencyTable) -> Result<f64> {
    let mi = mutual_information(t)?;
    let denom = entropy_bits_of_counts(&t.attribute_totals()) + entropy_bits_of_counts(&t.class_totals());
    if denom <= 0.0 {
        warn!("normalized MI of a single-cell table is defined as 0");
        return Ok(0.0);
    }
    Ok((2.0 * mi / denom).clamp(0.0, 1.0))
}

/// Pearson χ² against the independence table. Cells with zero expected
/// count (an empty row or column) are excluded.
pub fn chi_squared(t: &ContingencyTable) -> Result<f64> {
    let n = t.require_mass()?;
    let ra = t.attribute_totals();
    let cy = t.class_totals();
    let mut chi2 = 0.0;
    let mut skipped = false;
    for (a, row) in t.counts.iter().enumerate() {
        for (y, &c) in row.iter().enumerate() {
            let expected = ra[a] as f64 * cy[y] as f64 / n;
            if expected == 0.0 {
                skipped = true;
                continue;
            }
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
    }
    if skipped {
        warn!("chi-squared: cells with zero expected count were excluded");
    }
    Ok(chi2)
}

pub fn cramers_v(t: &ContingencyTable) -> Result<f64> {
    let n = t.require_mass()?;
    let k = t.num_attributes().min(t.num_classes());
    if k < 2 {
        warn!("Cramér's V with a single row or column is defined as 0");
        return Ok(0.0);
    }
    Ok((chi_squared(t)? / (n * (k - 1) as f64)).sqrt().min(1.0))
}

pub fn tschuprows_t(t: &ContingencyTable) -> Result<f64> {
    let n = t.require_mass()?;
    let (a, c) = (t.num_attributes(), t.num_classes());
    if a.min(c) < 2 {
        warn!("Tschuprow's T with a single row or column is defined as 0");
        return Ok(0.0);
    }
    let denom = n * (((a - 1) * (c - 1)) as f64).sqrt();
    Ok((chi_squared(t)? / denom).sqrt().min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub entropy: f64,
    pub normalized: f64,
    pub pmax_minus_pmin: f64,
}

/// Entropy in bits, entropy normalized by `log2 |support|` (support counts
/// nonzero entries), and the spread `pmax − pmin` over every declared
/// category.
pub fn entropy_stats(p: &[f64]) -> Result<EntropyStats> {
    if p.is_empty() || p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidData("entropy_stats needs a nonempty nonnegative vector".into()));
    }
    if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidData("entropy_stats: probabilities must sum to 1".into()));
    }
    let entropy = entropy_bits(p);
    let support = p.iter().filter(|&&v| v > 0.0).count();
    let normalized = if support <= 1 {
        warn!("normalized entropy of a single-category support is defined as 0");
        0.0
    } else {
        (entropy / (support as f64).log2()).clamp(0.0, 1.0)
    };
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(EntropyStats {
        entropy,
        normalized,
        pmax_minus_pmin: max - min,
    })
}

/// True iff some group is absent from `train` but present in `test`.
pub fn attribute_generalization_indicator(train: &Dataset, test: &Dataset) -> Result<bool> {
    if train.num_classes() != test.num_classes() || train.num_attributes() != test.num_attributes() {
        return Err(Error::InvalidData("train and test disagree on (A, C)".into()));
    }
    let tr = train.group_counts();
    let te = test.group_counts();
    Ok(tr.iter().zip(&te).any(|(&a, &b)| a == 0 && b > 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftFingerprint {
    pub mi: f64,
    pub nmi: f64,
    pub cramers_v: f64,
    pub tschuprows_t: f64,
    pub entropy_y: f64,
    pub norm_entropy_y: f64,
    pub entropy_a: f64,
    pub norm_entropy_a: f64,
    pub pmax_minus_pmin_y: f64,
    pub pmax_minus_pmin_a: f64,
    pub attribute_generalization: bool,
}

/// Statistics of the training split, with the AG indicator comparing
/// train against test.
pub fn fingerprint(train: &Dataset, test: &Dataset) -> Result<ShiftFingerprint> {
    let t = ContingencyTable::from_dataset(train);
    let y = entropy_stats(&marginal(&t.class_totals()))?;
    let a = entropy_stats(&marginal(&t.attribute_totals()))?;
    Ok(ShiftFingerprint {
        mi: mutual_information(&t)?,
        nmi: normalized_mi(&t)?,
        cramers_v: cramers_v(&t)?,
        tschuprows_t: tschuprows_t(&t)?,
        entropy_y: y.entropy,
        norm_entropy_y: y.normalized,
        entropy_a: a.entropy,
        norm_entropy_a: a.normalized,
        pmax_minus_pmin_y: y.pmax_minus_pmin,
        pmax_minus_pmin_a: a.pmax_minus_pmin,
        attribute_generalization: attribute_generalization_indicator(train, test)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub sc_nmi: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { sc_nmi: 0.10 }
    }
}

/// AG if the indicator fires, SC if NMI reaches the threshold, otherwise
/// whichever marginal is further from uniform (AI for attributes, CI for
/// classes; a tie goes to CI).
pub fn dominant_shift(fp: &ShiftFingerprint, thresholds: Thresholds) -> ShiftType {
    if fp.attribute_generalization {
        ShiftType::AG
    } else if fp.nmi >= thresholds.sc_nmi {
        ShiftType::SC
    } else if 1.0 - fp.norm_entropy_a > 1.0 - fp.norm_entropy_y {
        ShiftType::AI
    } else {
        ShiftType::CI
    }
}
