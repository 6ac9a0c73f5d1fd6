//! Last-layer retraining on balanced held-out data.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::trainer::{feature_matrix, Model};

pub const DEFAULT_SUBSAMPLES: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    #[default]
    L2,
    L1,
}

/// Multinomial logistic head `(W, b)` with `W` of shape `h×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Matrix,
    pub bias: Matrix,
    /// Penalized objective at the solution.
    pub objective: f64,
}

fn probs_row(x: &[f64], theta: &DVector<f64>, h: usize, c: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..c)
        .map(|k| {
            let base = k * (h + 1);
            theta[base + h] + (0..h).map(|j| theta[base + j] * x[j]).sum::<f64>()
        })
        .collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct Problem<'a> {
    x: &'a Matrix,
    labels: &'a [usize],
    c: usize,
    reg: f64,
}

impl Problem<'_> {
    fn h(&self) -> usize {
        self.x.cols()
    }

    fn smooth_loss(&self, theta: &DVector<f64>) -> f64 {
        let n = self.x.rows() as f64;
        (0..self.x.rows())
            .map(|i| -probs_row(self.x.row(i), theta, self.h(), self.c)[self.labels[i]].max(1e-300).ln())
            .sum::<f64>()
            / n
    }

    fn weight_norms(&self, theta: &DVector<f64>) -> (f64, f64) {
        let h = self.h();
        let mut l2 = 0.0;
        let mut l1 = 0.0;
        for k in 0..self.c {
            for j in 0..h {
                let w = theta[k * (h + 1) + j];
                l2 += w * w;
                l1 += w.abs();
            }
        }
        (l2, l1)
    }

    fn smooth_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        let (h, c) = (self.h(), self.c);
        let n = self.x.rows() as f64;
        let mut g = DVector::zeros(c * (h + 1));
        for i in 0..self.x.rows() {
            let x = self.x.row(i);
            let p = probs_row(x, theta, h, c);
            for k in 0..c {
                let r = (p[k] - if k == self.labels[i] { 1.0 } else { 0.0 }) / n;
                let base = k * (h + 1);
                for j in 0..h {
                    g[base + j] += r * x[j];
                }
                g[base + h] += r;
            }
        }
        g
    }

    fn is_weight(&self, idx: usize) -> bool {
        idx % (self.h() + 1) != self.h()
    }
}

/// L2: minimizes `mean CE + reg·‖W‖²_F` by damped Newton steps.
fn fit_l2(p: &Problem) -> DVector<f64> {
    let (h, c) = (p.h(), p.c);
    let dim = c * (h + 1);
    let objective = |t: &DVector<f64>| p.smooth_loss(t) + p.reg * p.weight_norms(t).0;
    let mut theta = DVector::zeros(dim);
    for _ in 0..200 {
        let mut g = p.smooth_grad(&theta);
        for idx in 0..dim {
            if p.is_weight(idx) {
                g[idx] += 2.0 * p.reg * theta[idx];
            }
        }
        if g.amax() < 1e-11 {
            break;
        }
        let mut hess = DMatrix::zeros(dim, dim);
        let n = p.x.rows() as f64;
        for i in 0..p.x.rows() {
            let mut xt = p.x.row(i).to_vec();
            xt.push(1.0);
            let pr = probs_row(p.x.row(i), &theta, h, c);
            for k in 0..c {
                for l in 0..c {
                    let s = (if k == l { pr[k] } else { 0.0 } - pr[k] * pr[l]) / n;
                    if s == 0.0 {
                        continue;
                    }
                    for a in 0..=h {
                        for b in 0..=h {
                            hess[(k * (h + 1) + a, l * (h + 1) + b)] += s * xt[a] * xt[b];
                        }
                    }
                }
            }
        }
        for idx in 0..dim {
            hess[(idx, idx)] += 1e-10 + if p.is_weight(idx) { 2.0 * p.reg } else { 0.0 };
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => match hess.lu().solve(&g) {
                Some(s) => s,
                None => g.clone(),
            },
        };
        let f0 = objective(&theta);
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta - t * &step;
            if objective(&cand) <= f0 - 1e-4 * t * slope {
                theta = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    theta
}

/// L1: minimizes `mean CE + reg·‖W‖₁` by proximal gradient descent.
fn fit_l1(p: &Problem) -> DVector<f64> {
    let dim = p.c * (p.h() + 1);
    let n = p.x.rows() as f64;
    let frob: f64 = p.x.frobenius_sq() + p.x.rows() as f64;
    let lipschitz = (frob / n).max(1e-12);
    let step = 1.0 / lipschitz;
    let mut theta = DVector::zeros(dim);
    for _ in 0..20_000 {
        let g = p.smooth_grad(&theta);
        let mut next = &theta - step * g;
        for idx in 0..dim {
            if p.is_weight(idx) {
                let v = next[idx];
                next[idx] = v.signum() * (v.abs() - step * p.reg).max(0.0);
            }
        }
        let delta = (&next - &theta).amax();
        theta = next;
        if delta < 1e-12 {
            break;
        }
    }
    theta
}

/// Penalized multinomial logistic regression on fixed features. The bias
/// is not penalized.
pub fn fit_logistic_head(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    reg: f64,
    penalty: Penalty,
) -> Result<Head> {
    if features.rows() == 0 || features.rows() != labels.len() {
        return Err(Error::InvalidData("head refit needs one label per feature row".into()));
    }
    if !(reg.is_finite() && reg >= 0.0) {
        return Err(Error::Config(format!("regularization must be finite and nonnegative, got {reg}")));
    }
    let p = Problem {
        x: features,
        labels,
        c: num_classes,
        reg,
    };
    let theta = match penalty {
        Penalty::L2 => fit_l2(&p),
        Penalty::L1 => fit_l1(&p),
    };
    let h = features.cols();
    let mut weight = Matrix::zeros(h, num_classes);
    let mut bias = Matrix::zeros(1, num_classes);
    for k in 0..num_classes {
        for j in 0..h {
            weight.set(j, k, theta[k * (h + 1) + j]);
        }
        bias.set(0, k, theta[k * (h + 1) + h]);
    }
    let (l2, l1) = p.weight_norms(&theta);
    let objective = p.smooth_loss(&theta)
        + reg
            * match penalty {
                Penalty::L2 => l2,
                Penalty::L1 => l1,
            };
    if !weight.is_finite() || !bias.is_finite() {
        return Err(Error::NonFinite("head refit".into()));
    }
    Ok(Head {
        weight,
        bias,
        objective,
    })
}

/// Indices of a balanced subsample: every stratum is subsampled without
/// replacement down to the smallest stratum size. Strata are groups, or
/// classes when the held-out split has been degenerated.
pub fn balanced_subsample(data: &Dataset, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let strata = if data.is_degenerate() {
        data.class_members()
    } else {
        data.group_members()
    };
    if let Some(g) = strata.iter().position(Vec::is_empty) {
        return Err(Error::EmptyStratum(format!(
            "balanced held-out subsample: stratum {g} has no examples"
        )));
    }
    let m = strata.iter().map(Vec::len).min().expect("strata");
    let mut out = Vec::with_capacity(m * strata.len());
    for s in &strata {
        out.extend(s.choose_multiple(rng, m).copied());
    }
    out.sort_unstable();
    Ok(out)
}

/// Replaces the head of `model` by the average of `subsamples` heads fit
/// on balanced subsamples of `heldout`; the featurizer is untouched.
/// Returns the mean penalized objective of the fits.
pub fn dfr_retrain(
    model: &mut Model,
    heldout: &Dataset,
    reg: f64,
    penalty: Penalty,
    subsamples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let features = model.features(&feature_matrix(heldout))?;
    let labels = heldout.labels();
    let (h, c) = (model.feat_dim(), model.num_classes());
    let mut weight = Matrix::zeros(h, c);
    let mut bias = Matrix::zeros(1, c);
    let mut objective = 0.0;
    let k = subsamples.max(1);
    for _ in 0..k {
        let idx = balanced_subsample(heldout, rng)?;
        let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let head = fit_logistic_head(&features.select_rows(&idx), &sub_labels, c, reg, penalty)?;
        weight.add_assign(&head.weight);
        bias.add_assign(&head.bias);
        objective += head.objective / k as f64;
    }
    model.set_head(weight.map(|v| v / k as f64), bias.map(|v| v / k as f64))?;
    Ok(objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noisy(n: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let shift = if y == 0 { -0.5 } else { 0.5 };
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            rows.push(vec![a + shift, b]);
            labels.push(y);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    /// Plain gradient descent on the unpenalized binary logistic loss,
    /// parameterized by the logit difference.
    fn gd_logistic(x: &Matrix, labels: &[usize]) -> Vec<f64> {
        let mut w = vec![0.0; x.cols() + 1];
        let n = x.rows() as f64;
        for _ in 0..200_000 {
            let mut g = vec![0.0; w.len()];
            for i in 0..x.rows() {
                let r = x.row(i);
                let z = w[x.cols()] + r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let e = p - labels[i] as f64;
                for j in 0..x.cols() {
                    g[j] += e * r[j] / n;
                }
                g[x.cols()] += e / n;
            }
            for (wj, gj) in w.iter_mut().zip(&g) {
                *wj -= 2.0 * gj;
            }
        }
        w
    }

    #[test]
    fn unpenalized_fit_matches_logistic_regression() {
        let (x, y) = noisy(200, 4);
        let head = fit_logistic_head(&x, &y, 2, 0.0, Penalty::L2).unwrap();
        let oracle = gd_logistic(&x, &y);
        for j in 0..2 {
            let diff = head.weight.get(j, 1) - head.weight.get(j, 0);
            assert!((diff - oracle[j]).abs() < 1e-6, "{diff} vs {}", oracle[j]);
        }
        let bdiff = head.bias.get(0, 1) - head.bias.get(0, 0);
        assert!((bdiff - oracle[2]).abs() < 1e-6);
    }

    #[test]
    fn heavy_penalty_zeroes_the_head() {
        let (x, y) = noisy(100, 5);
        for penalty in [Penalty::L2, Penalty::L1] {
            let head = fit_logistic_head(&x, &y, 2, 1e8, penalty).unwrap();
            assert!(head.weight.data().iter().all(|w| w.abs() < 1e-6), "{penalty:?}");
        }
    }

    #[test]
    fn l1_solution_is_sparser_than_l2() {
        let (x, y) = noisy(200, 6);
        let l1 = fit_logistic_head(&x, &y, 2, 0.05, Penalty::L1).unwrap();
        // The second feature carries no signal.
        assert!(l1.weight.get(1, 0).abs() < 1e-9 && l1.weight.get(1, 1).abs() < 1e-9);
    }
}
