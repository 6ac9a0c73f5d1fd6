//! Synthetic datasets realizing the four basic subpopulation shifts.
//!
//! Features are `[core ; spurious]`: the core block is a class mean plus
//! Gaussian noise, the spurious block an attribute mean plus Gaussian
//! noise. The shift type only controls how `(y, a)` pairs are drawn.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, Example, GroupId, Split, SplitSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShiftType {
    SC,
    AI,
    CI,
    AG,
    #[serde(rename = "composite")]
    Composite,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub shift_type: ShiftType,
    pub num_classes: usize,
    pub num_attributes: usize,
    pub core_dim: usize,
    pub spurious_dim: usize,
    /// Distance of each class mean from the origin.
    #[serde(default = "one")]
    pub core_scale: f64,
    /// Distance of each attribute mean from the origin.
    #[serde(default = "one")]
    pub spurious_scale: f64,
    /// `p_train(a = a*(y) | y)` with `a*(y) = y mod A`.
    #[serde(default)]
    pub correlation: Option<f64>,
    #[serde(default)]
    pub attribute_skew: Option<Vec<f64>>,
    #[serde(default)]
    pub class_skew: Option<Vec<f64>>,
    #[serde(default)]
    pub held_out_groups: Vec<GroupId>,
    /// Test class marginal for composite shifts; defaults to `class_skew`.
    #[serde(default)]
    pub test_class_skew: Option<Vec<f64>>,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl GenSpec {
    /// Binary SC spec with one core and one spurious dimension.
    pub fn spurious(correlation: f64, noise_sigma: f64, seed: u64) -> Self {
        Self {
            shift_type: ShiftType::SC,
            num_classes: 2,
            num_attributes: 2,
            core_dim: 1,
            spurious_dim: 1,
            core_scale: 1.0,
            spurious_scale: 1.0,
            correlation: Some(correlation),
            attribute_skew: None,
            class_skew: None,
            held_out_groups: Vec::new(),
            test_class_skew: None,
            noise_sigma,
            n_train: 2000,
            n_val: 1000,
            n_test: 2000,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.core_dim + self.spurious_dim
    }

    pub fn validate(&self) -> Result<()> {
        let (c, a) = (self.num_classes, self.num_attributes);
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if c < 2 {
            return bad("need at least two classes".into());
        }
        if a < 1 {
            return bad("need at least one attribute".into());
        }
        if self.core_dim < c.div_ceil(2) {
            return bad(format!("core_dim must be at least {} for {c} classes", c.div_ceil(2)));
        }
        if a > 1 && self.spurious_dim < a.div_ceil(2) {
            return bad(format!(
                "spurious_dim must be at least {} for {a} attributes",
                a.div_ceil(2)
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be finite and nonnegative".into());
        }
        for (name, scale) in [("core_scale", self.core_scale), ("spurious_scale", self.spurious_scale)] {
            if !(scale.is_finite() && scale > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_test < a * c {
            return bad(format!("n_test must be at least A·C = {}", a * c));
        }
        if self.n_val < a * c {
            return bad(format!("n_val must be at least A·C = {}", a * c));
        }
        check_simplex("class_skew", self.class_skew.as_deref(), c)?;
        check_simplex("attribute_skew", self.attribute_skew.as_deref(), a)?;
        check_simplex("test_class_skew", self.test_class_skew.as_deref(), c)?;
        if let Some(rho) = self.correlation {
            let floor = 1.0 / a as f64;
            if !(rho >= floor - 1e-12 && rho <= 1.0) {
                return bad(format!("correlation {rho} outside [1/A, 1] = [{floor}, 1]"));
            }
        }
        for g in &self.held_out_groups {
            if g.label >= c || g.attribute >= a {
                return bad(format!("held-out group {g} out of range"));
            }
        }
        for y in 0..c {
            let held = (0..a)
                .filter(|&attr| self.held_out_groups.contains(&GroupId::new(attr, y)))
                .count();
            if held == a {
                return bad(format!("held-out groups cover all of class {y}"));
            }
        }
        match self.shift_type {
            ShiftType::SC if self.correlation.is_none() => bad("SC needs `correlation`".into()),
            ShiftType::AI if self.attribute_skew.is_none() => {
                bad("AI needs `attribute_skew`".into())
            }
            ShiftType::CI if self.class_skew.is_none() => bad("CI needs `class_skew`".into()),
            ShiftType::AG if self.held_out_groups.is_empty() => {
                bad("AG needs at least one held-out group".into())
            }
            _ => Ok(()),
        }
    }
}

fn check_simplex(name: &str, p: Option<&[f64]>, len: usize) -> Result<()> {
    let Some(p) = p else {
        return Ok(());
    };
    if p.len() != len {
        return Err(Error::InvalidSpec(format!("{name} has {} entries, expected {len}", p.len())));
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSpec(format!("{name} is not a probability vector")));
    }
    Ok(())
}

/// Gaussian class and attribute means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeModel {
    pub class_means: Vec<Vec<f64>>,
    pub attribute_means: Vec<Vec<f64>>,
    pub noise_sigma: f64,
}

/// Vertices of a scaled cross-polytope: index `k` sits on axis `k / 2`
/// with sign `−` for even `k` and `+` for odd `k`.
fn cross_polytope(count: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let mut v = vec![0.0; dim];
            if dim > 0 {
                v[k / 2] = if k % 2 == 0 { -scale } else { scale };
            }
            v
        })
        .collect()
}

impl GenerativeModel {
    pub fn from_spec(spec: &GenSpec) -> Self {
        Self {
            class_means: cross_polytope(spec.num_classes, spec.core_dim, spec.core_scale),
            attribute_means: cross_polytope(
                spec.num_attributes,
                spec.spurious_dim,
                spec.spurious_scale,
            ),
            noise_sigma: spec.noise_sigma,
        }
    }

    pub fn sample_features(&self, label: usize, attribute: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.class_means[0].len() + self.attribute_means[0].len());
        for &mu in self.class_means[label]
            .iter()
            .chain(self.attribute_means[attribute].iter())
        {
            let z: f64 = StandardNormal.sample(rng);
            out.push(mu + self.noise_sigma * z);
        }
        out
    }
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn aligned_attribute(label: usize, num_attributes: usize) -> usize {
    label % num_attributes
}

/// Draws one training-distribution `(label, attribute)` pair.
fn draw_train_pair(spec: &GenSpec, rng: &mut impl Rng) -> (usize, usize) {
    let (c, a) = (spec.num_classes, spec.num_attributes);
    match spec.shift_type {
        ShiftType::SC => {
            let y = sample_categorical(&spec.class_skew.clone().unwrap_or_else(|| uniform(c)), rng);
            (y, draw_correlated(y, spec.correlation.unwrap_or(1.0), a, rng))
        }
        ShiftType::AI => {
            let y = rng.random_range(0..c);
            let attr = sample_categorical(spec.attribute_skew.as_deref().expect("validated"), rng);
            (y, attr)
        }
        ShiftType::CI => {
            let y = sample_categorical(spec.class_skew.as_deref().expect("validated"), rng);
            (y, rng.random_range(0..a))
        }
        ShiftType::AG => {
            let allowed: Vec<GroupId> = (0..a * c)
                .map(|g| GroupId::from_index(g, c))
                .filter(|g| !spec.held_out_groups.contains(g))
                .collect();
            let g = allowed[rng.random_range(0..allowed.len())];
            (g.label, g.attribute)
        }
        ShiftType::Composite => loop {
            let y = sample_categorical(&spec.class_skew.clone().unwrap_or_else(|| uniform(c)), rng);
            let attr = match (spec.correlation, &spec.attribute_skew) {
                (Some(rho), _) => draw_correlated(y, rho, a, rng),
                (None, Some(skew)) => sample_categorical(skew, rng),
                (None, None) => rng.random_range(0..a),
            };
            if !spec.held_out_groups.contains(&GroupId::new(attr, y)) {
                break (y, attr);
            }
        },
    }
}

fn draw_correlated(y: usize, rho: f64, num_attributes: usize, rng: &mut impl Rng) -> usize {
    let aligned = aligned_attribute(y, num_attributes);
    if num_attributes == 1 || rng.random::<f64>() < rho {
        return aligned;
    }
    let k = rng.random_range(0..num_attributes - 1);
    if k >= aligned {
        k + 1
    } else {
        k
    }
}

/// Largest-remainder allocation of `n` items to weights `w`.
fn allocate(n: usize, w: &[f64]) -> Vec<usize> {
    let total: f64 = w.iter().sum();
    let exact: Vec<f64> = w.iter().map(|v| n as f64 * v / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Test group weights indexed by [`GroupId::index`].
fn test_group_weights(spec: &GenSpec) -> Vec<f64> {
    let (c, a) = (spec.num_classes, spec.num_attributes);
    let class_marginal = match spec.shift_type {
        ShiftType::Composite => spec
            .test_class_skew
            .clone()
            .or_else(|| spec.class_skew.clone())
            .unwrap_or_else(|| uniform(c)),
        _ => uniform(c),
    };
    (0..a * c)
        .map(|g| class_marginal[GroupId::from_index(g, c).label] / a as f64)
        .collect()
}

fn split_rng(seed: u64, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split as u64 + 1);
    rng
}

/// Generates `(train, val, test)`. Val follows the training law; test is
/// group-balanced (composite: class marginal from `test_class_skew`,
/// attributes uniform within class) and includes held-out groups.
pub fn generate(spec: &GenSpec) -> Result<SplitSet> {
    spec.validate()?;
    let model = GenerativeModel::from_spec(spec);
    let (c, a, dim) = (spec.num_classes, spec.num_attributes, spec.dim());

    let draw_split = |split: Split, n: usize| -> Result<Dataset> {
        let mut rng = split_rng(spec.seed, split);
        let examples = (0..n)
            .map(|_| {
                let (y, attr) = draw_train_pair(spec, &mut rng);
                Example::new(model.sample_features(y, attr, &mut rng), y, attr)
            })
            .collect();
        Dataset::new(examples, c, a, dim, split)
    };
    let train = draw_split(Split::Train, spec.n_train)?;
    let val = draw_split(Split::Val, spec.n_val)?;

    let mut rng = split_rng(spec.seed, Split::Test);
    let counts = allocate(spec.n_test, &test_group_weights(spec));
    let mut examples = Vec::with_capacity(spec.n_test);
    for (g, &n) in counts.iter().enumerate() {
        let gid = GroupId::from_index(g, c);
        for _ in 0..n {
            let x = model.sample_features(gid.label, gid.attribute, &mut rng);
            examples.push(Example::new(x, gid.label, gid.attribute));
        }
    }
    examples.shuffle(&mut rng);
    let test = Dataset::new(examples, c, a, dim, Split::Test)?;
    SplitSet::new(train, val, test)
}

/// Per-group error of the equal-prior Bayes rule on core features,
/// indexed by [`GroupId::index`]. Core features do not depend on the
/// attribute, so every group of a class shares that class's error.
pub fn bayes_optimal_error(spec: &GenSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let model = GenerativeModel::from_spec(spec);
    let c = spec.num_classes;
    let class_error: Vec<f64> = if spec.noise_sigma == 0.0 {
        vec![0.0; c]
    } else if c == 2 {
        let dist: f64 = model.class_means[0]
            .iter()
            .zip(&model.class_means[1])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        vec![normal.cdf(-dist / (2.0 * spec.noise_sigma)); 2]
    } else {
        monte_carlo_class_error(&model, spec.seed, 200_000)
    };
    Ok((0..c * spec.num_attributes)
        .map(|g| class_error[GroupId::from_index(g, c).label])
        .collect())
}

fn monte_carlo_class_error(model: &GenerativeModel, seed: u64, draws: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7e);
    let means = &model.class_means;
    (0..means.len())
        .map(|y| {
            let mut wrong = 0usize;
            for _ in 0..draws {
                let x: Vec<f64> = means[y]
                    .iter()
                    .map(|mu| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu + model.noise_sigma * z
                    })
                    .collect();
                let nearest = (0..means.len())
                    .min_by(|&i, &j| sq_dist(&x, &means[i]).total_cmp(&sq_dist(&x, &means[j])))
                    .expect("classes");
                if nearest != y {
                    wrong += 1;
                }
            }
            wrong as f64 / draws as f64
        })
        .collect()
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sc_correlation_and_balanced_test() {
        let mut spec = GenSpec::spurious(0.95, 1.0, 7);
        spec.n_train = 4000;
        let s = generate(&spec).unwrap();
        let aligned = s
            .train
            .examples()
            .iter()
            .filter(|e| e.attribute == e.label)
            .count() as f64
            / 4000.0;
        assert!((0.93..=0.97).contains(&aligned), "{aligned}");
        let counts = s.test.group_counts();
        assert!(counts.iter().all(|&n| n == counts[0]));
    }

    #[test]
    fn ci_class_ratio() {
        let spec = GenSpec {
            shift_type: ShiftType::CI,
            class_skew: Some(vec![0.9, 0.1]),
            correlation: None,
            n_train: 10_000,
            ..GenSpec::spurious(0.5, 1.0, 3)
        };
        let s = generate(&spec).unwrap();
        let cc = s.train.class_counts();
        let ratio = cc[0] as f64 / cc[1] as f64;
        assert!((8.0..10.2).contains(&ratio), "{ratio}");
        let tc = s.test.class_counts();
        assert_eq!(tc[0], tc[1]);
    }

    #[test]
    fn ag_holds_out_group_from_train_only() {
        let held = GroupId::new(1, 0);
        let spec = GenSpec {
            shift_type: ShiftType::AG,
            correlation: None,
            held_out_groups: vec![held],
            ..GenSpec::spurious(0.5, 1.0, 5)
        };
        let s = generate(&spec).unwrap();
        assert_eq!(s.train.group_counts()[held.index(2)], 0);
        assert_eq!(s.val.group_counts()[held.index(2)], 0);
        assert!(s.test.group_counts()[held.index(2)] > 0);
    }

    #[test]
    fn rejects_anti_correlation_and_full_class_holdout() {
        assert!(generate(&GenSpec::spurious(0.3, 1.0, 0)).is_err());
        let spec = GenSpec {
            shift_type: ShiftType::AG,
            correlation: None,
            held_out_groups: vec![GroupId::new(0, 1), GroupId::new(1, 1)],
            ..GenSpec::spurious(0.5, 1.0, 5)
        };
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = GenSpec::spurious(0.9, 0.8, 42);
        let a = serde_json::to_string(&generate(&spec).unwrap()).unwrap();
        let b = serde_json::to_string(&generate(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = GenSpec { seed: 43, ..spec };
        assert_ne!(a, serde_json::to_string(&generate(&other).unwrap()).unwrap());
    }

    #[test]
    fn bayes_error_binary_gaussian() {
        let spec = GenSpec::spurious(0.5, 1.0, 0);
        let err = bayes_optimal_error(&spec).unwrap();
        // Φ(−1), means at ±1 with unit noise.
        for e in &err {
            assert!((e - 0.158_655_253_931_457_05).abs() < 1e-9);
        }
    }

    #[test]
    fn bayes_error_vanishes_without_noise() {
        let spec = GenSpec::spurious(0.5, 0.0, 0);
        assert!(bayes_optimal_error(&spec).unwrap().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn bayes_error_symmetric_multiclass() {
        let spec = GenSpec {
            num_classes: 4,
            num_attributes: 2,
            core_dim: 2,
            correlation: Some(0.7),
            ..GenSpec::spurious(0.7, 0.8, 9)
        };
        let err = bayes_optimal_error(&spec).unwrap();
        let mean = err.iter().sum::<f64>() / err.len() as f64;
        assert!(err.iter().all(|e| (e - mean).abs() < 0.01), "{err:?}");
    }

    #[test]
    fn allocation_is_exact() {
        assert_eq!(allocate(10, &[0.25; 4]), vec![3, 3, 2, 2]);
        assert_eq!(allocate(7, &[0.9, 0.1]).iter().sum::<usize>(), 7);
    }
}
