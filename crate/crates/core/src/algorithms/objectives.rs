//! [`Objective`] implementations for the loss-based algorithms.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::losses::*;
use crate::autodiff::{median_pairwise_distance, Matrix, Tape, Var, MMD_BANDWIDTH_LADDER};
use crate::error::{Error, Result};
use crate::trainer::{weighted_mean, Batch, Model, ModelVars, Objective, Sgd, StepContext};

fn input(tape: &mut Tape, batch: &Batch) -> Var {
    tape.constant(batch.x.clone())
}

fn sample_beta(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("Beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

#[derive(Clone, Debug)]
pub struct Focal {
    pub gamma: f64,
}

impl Objective for Focal {
    fn loss(&mut self, tape: &mut Tape, m: &ModelVars, b: &Batch, _: &mut StepContext) -> Result<Var> {
        let x = input(tape, b);
        let z = m.logits(tape, x)?;
        let per = focal_per_example(tape, z, &b.labels, self.gamma)?;
        weighted_mean(tape, per, &b.weights)
    }
}

#[derive(Clone, Debug)]
pub struct Ldam {
    pub margins: Vec<f64>,
    pub scale: f64,
}

impl Objective for Ldam {
    fn loss(&mut self, tape: &mut Tape, m: &ModelVars, b: &Batch, _: &mut StepContext) -> Result<Var> {
        let x = input(tape, b);
        let z = m.logits(tape, x)?;
        let z = ldam_logits(tape, z, &b.labels, &self.margins, self.scale)?;
        let ce = tape.cross_entropy(z, &b.labels)?;
        weighted_mean(tape, ce, &b.weights)
    }
}

#[derive(Clone, Debug)]
pub struct BalancedSoftmax {
    pub log_priors: Vec<f64>,
}

impl Objective for BalancedSoftmax {
    fn loss(&mut self, tape: &mut Tape, m: &ModelVars, b: &Batch, _: &mut StepContext) -> Result<Var> {
        let x = input(tape, b);
        let z = m.logits(tape, x)?;
        let z = balanced_softmax_logits(tape, z, &self.log_priors)?;
        let ce = tape.cross_entropy(z, &b.labels)?;
        weighted_mean(tape, ce, &b.weights)
    }
}

#[derive(Clone, Debug)]
pub struct CvarDro {
    pub alpha: f64,
}

impl Objective for CvarDro {
    fn loss(&mut self, tape: &mut Tape, m: &ModelVars, b: &Batch, _: &mut StepContext) -> Result<Var> {
        let x = input(tape, b);
        let z = m.logits(tape, x)?;
        let ce = tape.cross_entropy(z, &b.labels)?;
        cvar_loss(tape, ce, self.alpha)
    }
}

/// Online GroupDRO: group weights `q` move toward high-loss groups before
/// each step's loss `Σ_g q_g·L_g` over the groups in the batch.
#[derive(Clone, Debug)]
pub struct GroupDro {
    pub eta: f64,
    pub q: Vec<f64>,
}

impl GroupDro {
    pub fn new(eta: f64, num_groups: usize) -> Self {
        Self {
            eta,
            q: vec![1.0 / num_groups as f64; num_groups],
        }
    }
}

impl Objective for GroupDro {
    fn loss(&mut self, tape: &mut Tape, m: &ModelVars, b: &Batch, ctx: &mut StepContext) -> Result<Var> {
        let x = input(tape, b);
        let z = m.logits(tape, x)?;
        let ce = tape.cross_entropy(z, &b.labels)?;
        let means = group_means(tape, ce, &b.groups, self.q.len())?;
        if ctx.update_state {
            let mut losses = vec![None; self.q.len()];
            for &(g, v) in &means {
                losses[g] = Some(tape.scalar_value(v));
            }
            groupdro_update(&mut self.q, &losses, self.eta)?;
        }
        let terms: Vec<(f64, Var)> = means.iter().map(|&(g, v)| (self.q[g], v)).collect();
        weighted_sum(tape, &terms)
    }
}

/// Weighted CE plus `λ_t`·IRMv1 penalty with environments = groups;
/// `λ_t = 1` before `anneal_iters` steps and `λ` afterwards. When
/// `λ_t > 1` the total is divided by `λ_t` to keep the step size stable.
#[derive(Clone, Debug)]
pub struct Irm {
    pub lambda: f64,
    pub anneal_iters: usize,
}

impl Objective for Irm {
    fn loss(&mut self, tape: &mut Tape, m: &ModelVars, b: &Batch, ctx: &mut StepContext) -> Result<Var> {
        let x = input(tape, b);
        let z = m.logits(tape, x)?;
        let ce = tape.cross_entropy(z, &b.labels)?;
        let erm = weighted_mean(tape, ce, &b.weights)?;
        let weight = if ctx.step > self.anneal_iters { self.lambda } else { 1.0 };
        let penalty = irm_penalty(tape, z, &b.labels, &b.groups, ctx.num_groups)?;
        let scaled = tape.scale(penalty, weight)?;
        let total = tape.add(erm, scaled)?;
        if weight > 1.0 {
            tape.scale(total, 1.0 / weight)
        } else {
            Ok(total)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Coral {
    pub gamma: f64,
}

impl Objective for Coral {
    fn loss(&mut self, tape: &mut Tape, m: &ModelVars, b: &Batch, ctx: &mut StepContext) -> Result<Var> {
        let x = input(tape, b);
        let f = m.features(tape, x)?;
        let z = m.head(tape, f)?;
        let ce = tape.cross_entropy(z, &b.labels)?;
        let erm = weighted_mean(tape, ce, &b.weights)?;
        let penalty = coral_penalty(tape, f, &b.groups, ctx.num_groups)?;
        let scaled = tape.scale(penalty, self.gamma)?;
        tape.add(erm, scaled)
    }
}

/// Weighted CE plus `γ`·MMD between group feature sets. Kernel bandwidths
/// are the fixed ladder times the median pairwise feature distance of the
/// batch; probes (`update_state = false`) reuse the last bandwidth.
#[derive(Clone, Debug)]
pub struct Mmd {
    pub gamma: f64,
    pub median: Option<f64>,
}

impl Objective for Mmd {
    fn loss(&mut self, tape: &mut Tape, m: &ModelVars, b: &Batch, ctx: &mut StepContext) -> Result<Var> {
        let x = input(tape, b);
        let f = m.features(tape, x)?;
        let z = m.head(tape, f)?;
        let ce = tape.cross_entropy(z, &b.labels)?;
        let erm = weighted_mean(tape, ce, &b.weights)?;
        if ctx.update_state || self.median.is_none() {
            let fv = tape.value(f).clone();
            self.median = Some(median_pairwise_distance(&fv, &fv));
        }
        let h = self.median.expect("set above");
        let bandwidths: Vec<f64> = MMD_BANDWIDTH_LADDER.iter().map(|s| s * h).collect();
        let penalty = mmd_penalty(tape, f, &b.groups, ctx.num_groups, &bandwidths)?;
        let scaled = tape.scale(penalty, self.gamma)?;
        tape.add(erm, scaled)
    }
}

/// Mixup with one `λ ~ Beta(α, α)` per batch and a random pairing.
/// `fixed_lambda` pins `λ` (used by neutral-setting checks).
#[derive(Clone, Debug)]
pub struct Mixup {
    pub alpha: f64,
    pub fixed_lambda: Option<f64>,
}

impl Objective for Mixup {
    fn loss(&mut self, tape: &mut Tape, m: &ModelVars, b: &Batch, ctx: &mut StepContext) -> Result<Var> {
        let lambda = match self.fixed_lambda {
            Some(l) => l,
            None => sample_beta(self.alpha, &mut *ctx.rng)?,
        };
        let mut partner: Vec<usize> = (0..b.len()).collect();
        partner.shuffle(&mut *ctx.rng);
        let lambdas = vec![lambda; b.len()];
        let x = tape.constant(mix_rows(&b.x, &partner, &lambdas));
        let z = m.logits(tape, x)?;
        let partner_labels: Vec<usize> = partner.iter().map(|&j| b.labels[j]).collect();
        let per = mixed_cross_entropy(tape, z, &b.labels, &partner_labels, &lambdas)?;
        weighted_mean(tape, per, &b.weights)
    }
}

/// Selective augmentation: each example is mixed with a partner of the
/// same label and another attribute (probability `p_select`, features
/// only) or of the same attribute and another label (features and
/// labels). Examples without an eligible partner stay unmixed.
#[derive(Clone, Debug)]
pub struct Lisa {
    pub alpha: f64,
    pub p_select: f64,
    pub fixed_lambda: Option<f64>,
    pub fallbacks: usize,
    pub mixed: usize,
}

impl Lisa {
    pub fn new(alpha: f64, p_select: f64) -> Self {
        Self {
            alpha,
            p_select,
            fixed_lambda: None,
            fallbacks: 0,
            mixed: 0,
        }
    }

    /// Partner index and mixing weight per example.
    pub fn pair(&mut self, b: &Batch, lambda: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<f64>) {
        let n = b.len();
        let mut partner = Vec::with_capacity(n);
        let mut lambdas = Vec::with_capacity(n);
        for i in 0..n {
            let intra_label = rng.random::<f64>() < self.p_select;
            let eligible: Vec<usize> = (0..n)
                .filter(|&j| {
                    if intra_label {
                        b.labels[j] == b.labels[i] && b.attributes[j] != b.attributes[i]
                    } else {
                        b.attributes[j] == b.attributes[i] && b.labels[j] != b.labels[i]
                    }
                })
                .collect();
            if eligible.is_empty() {
                self.fallbacks += 1;
                partner.push(i);
                lambdas.push(1.0);
            } else {
                self.mixed += 1;
                partner.push(eligible[rng.random_range(0..eligible.len())]);
                lambdas.push(lambda);
            }
        }
        (partner, lambdas)
    }
}

impl Objective for Lisa {
    fn loss(&mut self, tape: &mut Tape, m: &ModelVars, b: &Batch, ctx: &mut StepContext) -> Result<Var> {
        let lambda = match self.fixed_lambda {
            Some(l) => l,
            None => sample_beta(self.alpha, &mut *ctx.rng)?,
        };
        let (partner, lambdas) = self.pair(b, lambda, &mut *ctx.rng);
        let x = tape.constant(mix_rows(&b.x, &partner, &lambdas));
        let z = m.logits(tape, x)?;
        let partner_labels: Vec<usize> = partner.iter().map(|&j| b.labels[j]).collect();
        let per = mixed_cross_entropy(tape, z, &b.labels, &partner_labels, &lambdas)?;
        weighted_mean(tape, per, &b.weights)
    }
}

/// Learning from failure: a biased twin trained with generalized CE, and
/// the main model trained with CE weighted by the relative difficulty
/// `w = CE_b / (CE_b + CE_d)` (0.5 when both vanish). Probes reuse the
/// weights of the previous call so the weighting stays fixed under
/// finite differences.
#[derive(Clone, Debug)]
pub struct Lff {
    pub q: f64,
    pub biased: Model,
    opt: Sgd,
    last_weights: Option<Vec<f64>>,
}

impl Lff {
    pub fn new(q: f64, biased: Model, learning_rate: f64, momentum: f64) -> Self {
        let n = biased.params().len();
        Self {
            q,
            biased,
            opt: Sgd::new(learning_rate, momentum, n),
            last_weights: None,
        }
    }

    pub fn difficulty_weights(ce_biased: &[f64], ce_debiased: &[f64]) -> Vec<f64> {
        ce_biased
            .iter()
            .zip(ce_debiased)
            .map(|(&b, &d)| if b + d == 0.0 { 0.5 } else { b / (b + d) })
            .collect()
    }

    fn biased_ce(&self, x: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
        let z = self.biased.logits(x)?;
        Ok((0..z.rows())
            .map(|i| {
                let row = z.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[labels[i]]
            })
            .collect())
    }

    fn update_biased(&mut self, b: &Batch) -> Result<()> {
        let mut tape = Tape::new();
        let vars = self.biased.bind(&mut tape, false);
        let x = tape.constant(b.x.clone());
        let z = vars.logits(&mut tape, x)?;
        let gce = gce_per_example(&mut tape, z, &b.labels, self.q)?;
        let loss = tape.mean(gce)?;
        tape.backward(loss)?;
        for (i, &v) in vars.vars.iter().enumerate() {
            if let Some(g) = tape.grad(v) {
                let g = g.clone();
                self.opt.step(i, &mut self.biased.params_mut()[i], &g);
            }
        }
        if !self.biased.is_finite() {
            return Err(Error::NonFinite("LfF biased model diverged".into()));
        }
        Ok(())
    }
}

impl Objective for Lff {
    fn loss(&mut self, tape: &mut Tape, m: &ModelVars, b: &Batch, ctx: &mut StepContext) -> Result<Var> {
        let x = input(tape, b);
        let z = m.logits(tape, x)?;
        let ce = tape.cross_entropy(z, &b.labels)?;
        let weights = match (&self.last_weights, ctx.update_state) {
            (Some(w), false) if w.len() == b.len() => w.clone(),
            _ => {
                let cb = self.biased_ce(&b.x, &b.labels)?;
                let w = Self::difficulty_weights(&cb, tape.value(ce).data());
                self.last_weights = Some(w.clone());
                w
            }
        };
        if ctx.update_state {
            self.update_biased(b)?;
        }
        let combined: Vec<f64> = weights.iter().zip(&b.weights).map(|(a, c)| a * c).collect();
        weighted_mean(tape, ce, &combined)
    }
}

/// Warns once per run about LISA examples that found no partner.
pub fn report_lisa(lisa: &Lisa) {
    if lisa.fallbacks > 0 {
        warn!(
            "LISA: {} of {} examples had no eligible partner and were left unmixed",
            lisa.fallbacks,
            lisa.fallbacks + lisa.mixed
        );
    }
}
