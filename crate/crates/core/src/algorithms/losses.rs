//! Loss and penalty building blocks, on the tape where they need
//! gradients and as plain functions where they are bookkeeping.

use log::warn;

use crate::autodiff::{gaussian_kernel_mmd2, Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Floor applied to `1 − p_y` before a fractional power, keeping the
/// derivative finite at `p_y = 1`.
const FOCAL_FLOOR: f64 = 1e-12;

/// Per-example focal loss `(1 − p_y)^γ · (−log p_y)`, `n×1`.
pub fn focal_per_example(tape: &mut Tape, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let lp = tape.pick(logp, labels)?;
    let ce = tape.neg(lp)?;
    let p = tape.exp(lp)?;
    let neg_p = tape.neg(p)?;
    let one_minus = tape.add_scalar(neg_p, 1.0)?;
    let floored = tape.clamp_min(one_minus, FOCAL_FLOOR)?;
    let factor = tape.powf(floored, gamma)?;
    tape.mul(ce, factor)
}

/// Margin `Δ_y = max_m · n_y^{−1/4} / max_j n_j^{−1/4}`; the rarest class
/// gets exactly `max_m`.
pub fn ldam_margins(class_counts: &[usize], max_m: f64) -> Result<Vec<f64>> {
    if class_counts.contains(&0) {
        return Err(Error::InvalidData("LDAM margins need every class present".into()));
    }
    let raw: Vec<f64> = class_counts.iter().map(|&n| (n as f64).powf(-0.25)).collect();
    let top = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(raw.iter().map(|r| max_m * r / top).collect())
}

/// `scale · (z − Δ_y e_y)`: the true-class logit lowered by its margin.
pub fn ldam_logits(tape: &mut Tape, logits: Var, labels: &[usize], margins: &[f64], scale: f64) -> Result<Var> {
    let (n, c) = tape.shape(logits);
    let mut m = Matrix::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        m.set(i, y, margins[y]);
    }
    let m = tape.constant(m);
    let shifted = tape.sub(logits, m)?;
    tape.scale(shifted, scale)
}

/// `log(n_j / N)` for each class.
pub fn log_priors(class_counts: &[usize]) -> Result<Vec<f64>> {
    if class_counts.contains(&0) {
        return Err(Error::InvalidData("balanced softmax needs every class present".into()));
    }
    let total: usize = class_counts.iter().sum();
    Ok(class_counts
        .iter()
        .map(|&n| (n as f64 / total as f64).ln())
        .collect())
}

pub fn balanced_softmax_logits(tape: &mut Tape, logits: Var, log_priors: &[f64]) -> Result<Var> {
    let prior = tape.constant(Matrix::row_vector(log_priors));
    tape.add(logits, prior)
}

/// Generalized cross-entropy `(1 − p_y^q) / q`, `n×1`.
pub fn gce_per_example(tape: &mut Tape, logits: Var, labels: &[usize], q: f64) -> Result<Var> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("GCE needs 0 < q ≤ 1, got {q}")));
    }
    let logp = tape.log_softmax(logits)?;
    let lp = tape.pick(logp, labels)?;
    let scaled = tape.scale(lp, q)?;
    let pq = tape.exp(scaled)?;
    let neg = tape.neg(pq)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    tape.scale(one_minus, 1.0 / q)
}

/// Size of the CVaR tail, `⌈α·n⌉`.
pub fn cvar_count(alpha: f64, n: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("CVaR needs 0 < alpha ≤ 1, got {alpha}")));
    }
    Ok(((alpha * n as f64).ceil() as usize).clamp(1, n.max(1)))
}

/// Mean of the `⌈α·n⌉` largest per-example losses. The selected rows are
/// kept in their original order, so `α = 1` sums exactly like a plain mean.
pub fn cvar_loss(tape: &mut Tape, per_example: Var, alpha: f64) -> Result<Var> {
    let values = tape.value(per_example).data().to_vec();
    if values.is_empty() {
        return Err(Error::InvalidData("CVaR of an empty batch".into()));
    }
    let k = cvar_count(alpha, values.len())?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    let tail = tape.gather_rows(per_example, &top)?;
    tape.mean(tail)
}

/// Row indices of each group within a batch; absent groups are empty.
pub fn members_by_group(groups: &[usize], num_groups: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_groups];
    for (i, &g) in groups.iter().enumerate() {
        out[g].push(i);
    }
    out
}

/// Mean of `per_example` over each nonempty group, with the group id.
pub fn group_means(tape: &mut Tape, per_example: Var, groups: &[usize], num_groups: usize) -> Result<Vec<(usize, Var)>> {
    let mut out = Vec::new();
    for (g, rows) in members_by_group(groups, num_groups).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let part = tape.gather_rows(per_example, &rows)?;
        out.push((g, tape.mean(part)?));
    }
    Ok(out)
}

/// Online exponentiated-gradient step `q_g ← q_g·exp(η·L_g)` for the
/// groups with a loss, followed by renormalization.
pub fn groupdro_update(q: &mut [f64], losses: &[Option<f64>], eta: f64) -> Result<()> {
    if losses.iter().all(Option::is_none) {
        return Err(Error::InvalidData("GroupDRO update on an empty batch".into()));
    }
    for (qg, l) in q.iter_mut().zip(losses) {
        if let Some(l) = l {
            *qg *= (eta * l).exp();
        }
    }
    let total: f64 = q.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::NonFinite("GroupDRO weights".into()));
    }
    q.iter_mut().for_each(|v| *v /= total);
    Ok(())
}

/// Weighted sum `Σ c_k · v_k` of scalar vars.
pub fn weighted_sum(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(c, v) in terms {
        let t = tape.scale(v, c)?;
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidData("weighted sum of no terms".into()))
}

/// IRMv1 penalty: the squared derivative of each environment's risk
/// with respect to a scalar multiplier `w` on the logits at `w = 1`,
/// averaged over the environments present. For one example
/// `d CE(w·z, y)/dw |_{w=1} = Σ_j p_j z_j − z_y`.
pub fn irm_penalty(tape: &mut Tape, logits: Var, labels: &[usize], envs: &[usize], num_envs: usize) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let p = tape.exp(logp)?;
    let pz = tape.mul(p, logits)?;
    let expected = tape.sum_cols(pz)?;
    let true_logit = tape.pick(logits, labels)?;
    let dw = tape.sub(expected, true_logit)?;
    let means = group_means(tape, dw, envs, num_envs)?;
    let count = means.len() as f64;
    let mut terms = Vec::with_capacity(means.len());
    for (_, m) in means {
        terms.push((1.0 / count, tape.square(m)?));
    }
    weighted_sum(tape, &terms)
}

/// Mean over pairs of present groups of `‖μ₁ − μ₂‖² + ‖Σ₁ − Σ₂‖²_F`;
/// zero (a constant) when fewer than two groups are present.
pub fn coral_penalty(tape: &mut Tape, features: Var, groups: &[usize], num_groups: usize) -> Result<Var> {
    let mut stats = Vec::new();
    for rows in members_by_group(groups, num_groups) {
        if rows.is_empty() {
            continue;
        }
        let f = tape.gather_rows(features, &rows)?;
        stats.push((tape.mean_rows(f)?, tape.covariance(f)?));
    }
    pairwise_mean(tape, stats.len(), |tape, i, j| {
        let dm = tape.sub(stats[i].0, stats[j].0)?;
        let dm2 = tape.square(dm)?;
        let mean_term = tape.sum(dm2)?;
        let dc = tape.sub(stats[i].1, stats[j].1)?;
        let dc2 = tape.square(dc)?;
        let cov_term = tape.sum(dc2)?;
        tape.add(mean_term, cov_term)
    })
}

/// Mean over pairs of present groups of the Gaussian-kernel MMD².
pub fn mmd_penalty(
    tape: &mut Tape,
    features: Var,
    groups: &[usize],
    num_groups: usize,
    bandwidths: &[f64],
) -> Result<Var> {
    let mut parts = Vec::new();
    for rows in members_by_group(groups, num_groups) {
        if !rows.is_empty() {
            parts.push(tape.gather_rows(features, &rows)?);
        }
    }
    pairwise_mean(tape, parts.len(), |tape, i, j| {
        gaussian_kernel_mmd2(tape, parts[i], parts[j], bandwidths)
    })
}

fn pairwise_mean(
    tape: &mut Tape,
    count: usize,
    mut term: impl FnMut(&mut Tape, usize, usize) -> Result<Var>,
) -> Result<Var> {
    if count < 2 {
        warn!("feature-matching penalty needs two groups in the batch; using 0");
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let pairs = (count * (count - 1) / 2) as f64;
    let mut terms = Vec::new();
    for i in 0..count {
        for j in i + 1..count {
            terms.push((1.0 / pairs, term(tape, i, j)?));
        }
    }
    weighted_sum(tape, &terms)
}

/// Mixes rows of `x`: `λ_i·x_i + (1 − λ_i)·x_{partner[i]}`.
pub fn mix_rows(x: &Matrix, partner: &[usize], lambda: &[f64]) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let (l, j) = (lambda[i], partner[i]);
        let src = x.row(j).to_vec();
        for (o, s) in out.row_mut(i).iter_mut().zip(src) {
            *o = l * *o + (1.0 - l) * s;
        }
    }
    out
}

/// `λ_i·CE(z_i, y_i) + (1 − λ_i)·CE(z_i, y_{partner[i]})`, `n×1`.
pub fn mixed_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    partner_labels: &[usize],
    lambda: &[f64],
) -> Result<Var> {
    let ce_a = tape.cross_entropy(logits, labels)?;
    let ce_b = tape.cross_entropy(logits, partner_labels)?;
    let la = tape.constant(Matrix::column(lambda));
    let one_minus: Vec<f64> = lambda.iter().map(|l| 1.0 - l).collect();
    let lb = tape.constant(Matrix::column(&one_minus));
    let a = tape.mul(ce_a, la)?;
    let b = tape.mul(ce_b, lb)?;
    tape.add(a, b)
}

/// Raw class-balanced weights `(1 − β) / (1 − β^{n_y})`.
pub fn class_balanced_weights(class_counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!("CBLoss needs 0 ≤ beta < 1, got {beta}")));
    }
    if class_counts.contains(&0) {
        return Err(Error::InvalidData("CBLoss needs every class present".into()));
    }
    Ok(class_counts
        .iter()
        .map(|&n| (1.0 - beta) / (1.0 - beta.powi(n as i32)))
        .collect())
}
