//! Shared data model: examples, groups, splits and predictions.
//!
//! A group is the pair `(attribute, label)`, linearized as
//! `attribute * num_classes + label`. All bookkeeping over classes,
//! attributes and groups goes through [`Dataset`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidData(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    pub attribute: usize,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize, attribute: usize) -> Self {
        Self {
            features,
            label,
            attribute,
            weight: 1.0,
        }
    }

    pub fn group(&self) -> GroupId {
        GroupId::new(self.attribute, self.label)
    }
}

/// Subpopulation identifier `(attribute, label)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId {
    pub attribute: usize,
    pub label: usize,
}

impl GroupId {
    pub fn new(attribute: usize, label: usize) -> Self {
        Self { attribute, label }
    }

    pub fn index(self, num_classes: usize) -> usize {
        self.attribute * num_classes + self.label
    }

    pub fn from_index(index: usize, num_classes: usize) -> Self {
        Self {
            attribute: index / num_classes,
            label: index % num_classes,
        }
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(a={}, y={})", self.attribute, self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
    num_attributes: usize,
    dim: usize,
    split: Split,
}

impl Dataset {
    /// Validates label/attribute ranges, feature dimension and finiteness.
    pub fn new(
        examples: Vec<Example>,
        num_classes: usize,
        num_attributes: usize,
        dim: usize,
        split: Split,
    ) -> Result<Self> {
        if num_classes == 0 || num_attributes == 0 {
            return Err(Error::InvalidData(
                "num_classes and num_attributes must be positive".into(),
            ));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= num_classes {
                return Err(Error::InvalidData(format!(
                    "example {i}: label {} >= num_classes {num_classes}",
                    ex.label
                )));
            }
            if ex.attribute >= num_attributes {
                return Err(Error::InvalidData(format!(
                    "example {i}: attribute {} >= num_attributes {num_attributes}",
                    ex.attribute
                )));
            }
            if ex.features.len() != dim {
                return Err(Error::InvalidData(format!(
                    "example {i}: expected {dim} features, got {}",
                    ex.features.len()
                )));
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("example {i}: non-finite feature")));
            }
            if !(ex.weight.is_finite() && ex.weight >= 0.0) {
                return Err(Error::InvalidData(format!("example {i}: invalid weight")));
            }
        }
        Ok(Self {
            examples,
            num_classes,
            num_attributes,
            dim,
            split,
        })
    }

    pub fn empty(num_classes: usize, num_attributes: usize, dim: usize, split: Split) -> Self {
        Self {
            examples: Vec::new(),
            num_classes,
            num_attributes,
            dim,
            split,
        }
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.num_attributes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn group_index(&self, i: usize) -> usize {
        self.examples[i].group().index(self.num_classes)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn attributes(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.attribute).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    pub fn attribute_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_attributes];
        for ex in &self.examples {
            counts[ex.attribute] += 1;
        }
        counts
    }

    /// Counts indexed by [`GroupId::index`].
    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_groups()];
        for ex in &self.examples {
            counts[ex.group().index(self.num_classes)] += 1;
        }
        counts
    }

    pub fn group_count_map(&self) -> BTreeMap<GroupId, usize> {
        self.group_counts()
            .into_iter()
            .enumerate()
            .map(|(g, n)| (GroupId::from_index(g, self.num_classes), n))
            .collect()
    }

    /// Example indices per linearized group.
    pub fn group_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_groups()];
        for (i, ex) in self.examples.iter().enumerate() {
            members[ex.group().index(self.num_classes)].push(i);
        }
        members
    }

    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_classes];
        for (i, ex) in self.examples.iter().enumerate() {
            members[ex.label].push(i);
        }
        members
    }

    pub fn weights(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.weight).collect()
    }

    /// Replaces per-example weights. Length must match.
    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::InvalidData(format!(
                "weight vector has {} entries for {} examples",
                weights.len(),
                self.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidData("weights must be finite and nonnegative".into()));
        }
        let mut out = self.clone();
        for (ex, &w) in out.examples.iter_mut().zip(weights) {
            ex.weight = w;
        }
        Ok(out)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            num_classes: self.num_classes,
            num_attributes: self.num_attributes,
            dim: self.dim,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Whether every example's attribute already equals its label.
    pub fn is_degenerate(&self) -> bool {
        self.num_attributes == self.num_classes
            && self.examples.iter().all(|e| e.attribute == e.label)
    }
}

/// Replaces every attribute by the label, so group-based methods operate over classes.
pub fn degenerate_groups_to_classes(data: &Dataset) -> Dataset {
    let mut out = data.clone();
    out.num_attributes = data.num_classes;
    for ex in &mut out.examples {
        ex.attribute = ex.label;
    }
    out
}

pub fn group_counts(data: &Dataset) -> BTreeMap<GroupId, usize> {
    data.group_count_map()
}

/// Class probabilities and argmax for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub predicted: usize,
}

impl Prediction {
    /// Ties in the argmax go to the smaller class index.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let predicted = argmax(&probs);
        Self { probs, predicted }
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self::from_probs(exps.into_iter().map(|e| e / total).collect())
    }

    pub fn confidence(&self) -> f64 {
        self.probs[self.predicted]
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Train / validation / test triple sharing `(C, A, d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitSet {
    pub fn new(train: Dataset, val: Dataset, test: Dataset) -> Result<Self> {
        let shape = |d: &Dataset| (d.num_classes(), d.dim());
        if shape(&train) != shape(&val) || shape(&train) != shape(&test) {
            return Err(Error::InvalidData(
                "train/val/test disagree on number of classes or feature dimension".into(),
            ));
        }
        Ok(Self { train, val, test })
    }

    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn csv_header(dim: usize) -> Vec<String> {
    let mut header: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    header.extend(["y".to_string(), "a".to_string(), "split".to_string()]);
    header
}

/// Writes `x0..x{d-1},y,a,split` rows.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(csv_header(data.dim()))?;
    for ex in data.examples() {
        let mut row: Vec<String> = ex.features.iter().map(|v| format!("{v:?}")).collect();
        row.push(ex.label.to_string());
        row.push(ex.attribute.to_string());
        row.push(data.split().to_string());
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Rows of a CSV file before they are assembled into datasets.
#[derive(Debug, Default)]
pub struct CsvRows {
    pub dim: usize,
    pub rows: Vec<(Vec<f64>, usize, Option<usize>, Split)>,
}

pub fn read_csv_rows(path: &Path) -> Result<CsvRows> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let dim = header.iter().take_while(|h| h.starts_with('x')).count();
    for (j, h) in header.iter().take(dim).enumerate() {
        if h != format!("x{j}") {
            return Err(Error::InvalidData(format!(
                "{}: feature column {j} named `{h}`",
                path.display()
            )));
        }
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    let y_col = col("y").ok_or_else(|| {
        Error::InvalidData(format!("{}: missing `y` column", path.display()))
    })?;
    let a_col = col("a");
    let split_col = col("split").ok_or_else(|| {
        Error::InvalidData(format!("{}: missing `split` column", path.display()))
    })?;

    let parse_int = |s: &str, what: &str| -> Result<usize> {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidData(format!("{}: bad {what} `{s}`", path.display())))
    };

    let mut out = CsvRows {
        dim,
        rows: Vec::new(),
    };
    for record in reader.records() {
        let record = record?;
        let mut features = Vec::with_capacity(dim);
        for j in 0..dim {
            let v: f64 = record[j].trim().parse().map_err(|_| {
                Error::InvalidData(format!("{}: bad feature `{}`", path.display(), &record[j]))
            })?;
            features.push(v);
        }
        let label = parse_int(&record[y_col], "label")?;
        let attribute = match a_col {
            Some(c) if !record[c].trim().is_empty() => Some(parse_int(&record[c], "attribute")?),
            _ => None,
        };
        let split: Split = record[split_col].parse()?;
        out.rows.push((features, label, attribute, split));
    }
    Ok(out)
}

/// Loads `train.csv`, `val.csv`, `test.csv` from a directory.
///
/// Train rows may leave the attribute blank (or the file may omit the `a`
/// column); the train split is then degenerated to classes. Missing
/// attributes are rejected for val/test. `C` and `A` are taken from
/// `meta.json` when present and inferred from the data otherwise.
pub fn load_dir(dir: &Path) -> Result<SplitSet> {
    let mut parts = Vec::new();
    for split in Split::ALL {
        let path = dir.join(format!("{split}.csv"));
        let rows = read_csv_rows(&path)?;
        if rows.rows.iter().any(|r| r.3 != split) {
            return Err(Error::InvalidData(format!(
                "{}: rows tagged with a split other than `{split}`",
                path.display()
            )));
        }
        parts.push(rows);
    }
    let dim = parts[0].dim;
    if parts.iter().any(|p| p.dim != dim) {
        return Err(Error::InvalidData("splits disagree on feature dimension".into()));
    }

    let meta: Option<serde_json::Value> = match fs::read_to_string(dir.join("meta.json")) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    let from_meta = |key: &str| {
        meta.as_ref()
            .and_then(|m| m.get(key))
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
    };
    let all_rows = || parts.iter().flat_map(|p| p.rows.iter());
    let num_classes = from_meta("num_classes")
        .unwrap_or_else(|| all_rows().map(|r| r.1 + 1).max().unwrap_or(1));
    let num_attributes = from_meta("num_attributes")
        .unwrap_or_else(|| all_rows().filter_map(|r| r.2.map(|a| a + 1)).max().unwrap_or(1));

    let mut built = Vec::new();
    for (split, rows) in Split::ALL.into_iter().zip(parts) {
        let unknown = rows.rows.iter().any(|r| r.2.is_none());
        if unknown && split != Split::Train {
            return Err(Error::InvalidData(format!(
                "{split}.csv: attribute column may only be omitted for train rows"
            )));
        }
        let examples: Vec<Example> = rows
            .rows
            .into_iter()
            .map(|(x, y, a, _)| Example::new(x, y, a.unwrap_or(0)))
            .collect();
        let data = Dataset::new(examples, num_classes, num_attributes, dim, split)?;
        built.push(if unknown {
            degenerate_groups_to_classes(&data)
        } else {
            data
        });
    }
    let test = built.pop().expect("three splits");
    let val = built.pop().expect("three splits");
    let train = built.pop().expect("three splits");
    SplitSet::new(train, val, test)
}

pub fn write_dir(splits: &SplitSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        write_csv(splits.get(split), &dir.join(format!("{split}.csv")))?;
    }
    Ok(())
}
