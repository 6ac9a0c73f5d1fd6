//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! Build a fresh [`Tape`] per step, register parameters with
//! [`Tape::param`], compose ops, then call [`Tape::backward`] on a scalar.

mod matrix;
mod tape;

pub mod gradcheck;

pub use matrix::Matrix;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Bandwidth multipliers applied to the median pairwise distance.
pub const MMD_BANDWIDTH_LADDER: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Biased MMD² between two feature sets with a Gaussian kernel
/// `exp(−‖x−y‖² / (2h²))`, averaged over `bandwidths`.
pub fn gaussian_kernel_mmd2(tape: &mut Tape, x: Var, y: Var, bandwidths: &[f64]) -> Result<Var> {
    if tape.shape(x).0 == 0 || tape.shape(y).0 == 0 {
        return Err(Error::Autodiff("MMD needs two nonempty feature sets".into()));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(Error::Autodiff("MMD bandwidths must be positive".into()));
    }
    let dxx = tape.pairwise_sq_dist(x, x)?;
    let dyy = tape.pairwise_sq_dist(y, y)?;
    let dxy = tape.pairwise_sq_dist(x, y)?;
    let mut total: Option<Var> = None;
    for &h in bandwidths {
        let c = -1.0 / (2.0 * h * h);
        let term = |tape: &mut Tape, d: Var| -> Result<Var> {
            let scaled = tape.scale(d, c)?;
            let k = tape.exp(scaled)?;
            tape.mean(k)
        };
        let kxx = term(tape, dxx)?;
        let kyy = term(tape, dyy)?;
        let kxy = term(tape, dxy)?;
        let within = tape.add(kxx, kyy)?;
        let cross = tape.scale(kxy, -2.0)?;
        let mmd = tape.add(within, cross)?;
        total = Some(match total {
            Some(t) => tape.add(t, mmd)?,
            None => mmd,
        });
    }
    let sum = total.expect("nonempty bandwidths");
    tape.scale(sum, 1.0 / bandwidths.len() as f64)
}

/// Median of pairwise Euclidean distances over the union of both sets.
pub fn median_pairwise_distance(x: &Matrix, y: &Matrix) -> f64 {
    let rows: Vec<&[f64]> = (0..x.rows())
        .map(|i| x.row(i))
        .chain((0..y.rows()).map(|i| y.row(i)))
        .collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let d: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 1e-12 {
        median
    } else {
        1.0
    }
}
