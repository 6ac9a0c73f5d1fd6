use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::data::{Dataset, Prediction};
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    /// Identity featurizer: the head sees the raw features.
    Linear,
    /// One hidden ReLU layer.
    Mlp { hidden: usize },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mlp {
            hidden: DEFAULT_HIDDEN,
        }
    }
}

/// Featurizer followed by a linear head. Parameters are stored as
/// `[W1, b1, W, b]` for the MLP and `[W, b]` for the linear model; the
/// last two entries always form the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    arch: Architecture,
    input_dim: usize,
    num_classes: usize,
    params: Vec<Matrix>,
}

fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl Model {
    /// Weights and biases drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new(arch: Architecture, input_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        let feat_dim = match arch {
            Architecture::Linear => input_dim,
            Architecture::Mlp { hidden } => {
                params.push(uniform_init(input_dim, hidden, input_dim, rng));
                params.push(uniform_init(1, hidden, input_dim, rng));
                hidden
            }
        };
        params.push(uniform_init(feat_dim, num_classes, feat_dim, rng));
        params.push(uniform_init(1, num_classes, feat_dim, rng));
        Self {
            arch,
            input_dim,
            num_classes,
            params,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feat_dim(&self) -> usize {
        self.head_weight().rows()
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    /// Number of leading parameter tensors that belong to the featurizer.
    pub fn num_featurizer_params(&self) -> usize {
        self.params.len() - 2
    }

    pub fn featurizer_params(&self) -> &[Matrix] {
        &self.params[..self.num_featurizer_params()]
    }

    pub fn head_weight(&self) -> &Matrix {
        &self.params[self.params.len() - 2]
    }

    pub fn head_bias(&self) -> &Matrix {
        &self.params[self.params.len() - 1]
    }

    pub fn set_head(&mut self, weight: Matrix, bias: Matrix) -> Result<()> {
        if weight.shape() != self.head_weight().shape() || bias.shape() != self.head_bias().shape() {
            return Err(Error::Shape {
                op: "set_head",
                lhs: self.head_weight().shape(),
                rhs: weight.shape(),
            });
        }
        let n = self.params.len();
        self.params[n - 2] = weight;
        self.params[n - 1] = bias;
        Ok(())
    }

    /// Redraws the head from the initialization distribution.
    pub fn reset_head(&mut self, rng: &mut impl Rng) {
        let (h, c) = (self.feat_dim(), self.num_classes);
        let n = self.params.len();
        self.params[n - 2] = uniform_init(h, c, h, rng);
        self.params[n - 1] = uniform_init(1, c, h, rng);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Matrix::is_finite)
    }

    /// Records the parameters on `tape`; featurizer parameters become
    /// constants when `freeze_featurizer` is set.
    pub fn bind(&self, tape: &mut Tape, freeze_featurizer: bool) -> ModelVars {
        let k = self.num_featurizer_params();
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if freeze_featurizer && i < k {
                    tape.constant(p.clone())
                } else {
                    tape.param(p.clone())
                }
            })
            .collect();
        ModelVars {
            arch: self.arch,
            vars,
        }
    }

    /// Featurizer output without a tape.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        match self.arch {
            Architecture::Linear => Ok(x.clone()),
            Architecture::Mlp { .. } => {
                let mut h = x.matmul(&self.params[0])?;
                let b = self.params[1].data();
                for r in 0..h.rows() {
                    for (v, bb) in h.row_mut(r).iter_mut().zip(b) {
                        *v = (*v + bb).max(0.0);
                    }
                }
                Ok(h)
            }
        }
    }

    pub fn head_logits(&self, features: &Matrix) -> Result<Matrix> {
        let mut z = features.matmul(self.head_weight())?;
        let b = self.head_bias().data();
        for r in 0..z.rows() {
            for (v, bb) in z.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(z)
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.head_logits(&self.features(x)?)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<Prediction>> {
        let z = self.logits(x)?;
        Ok((0..z.rows()).map(|r| Prediction::from_logits(z.row(r))).collect())
    }
}

/// Tape handles for a bound [`Model`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    arch: Architecture,
    pub vars: Vec<Var>,
}

impl ModelVars {
    /// Handles for parameters created directly on a tape, in [`Model::params`] order.
    pub fn from_vars(arch: Architecture, vars: Vec<Var>) -> Self {
        Self { arch, vars }
    }

    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.arch {
            Architecture::Linear => Ok(x),
            Architecture::Mlp { .. } => {
                let h = tape.matmul(x, self.vars[0])?;
                let h = tape.add(h, self.vars[1])?;
                tape.relu(h)
            }
        }
    }

    pub fn head(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let n = self.vars.len();
        let z = tape.matmul(features, self.vars[n - 2])?;
        tape.add(z, self.vars[n - 1])
    }

    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let f = self.features(tape, x)?;
        self.head(tape, f)
    }
}

/// Feature matrix of a dataset, one row per example.
pub fn feature_matrix(data: &Dataset) -> Matrix {
    let rows: Vec<Vec<f64>> = data.examples().iter().map(|e| e.features.clone()).collect();
    if rows.is_empty() {
        return Matrix::zeros(0, data.dim());
    }
    Matrix::from_rows(&rows).expect("dataset rows share a dimension")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_and_direct_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(Architecture::default(), 3, 4, &mut rng);
        let x = Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.0, 0.3, -0.7]]).unwrap();
        let direct = model.logits(&x).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let xv = tape.constant(x);
        let z = vars.logits(&mut tape, xv).unwrap();
        assert_eq!(tape.value(z), &direct);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::new(Architecture::Mlp { hidden: 16 }, 9, 2, &mut rng);
        assert!(model.params()[0].data().iter().all(|v| v.abs() <= 1.0 / 3.0));
        assert!(model.head_weight().data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(model.feat_dim(), 16);
        let linear = Model::new(Architecture::Linear, 5, 3, &mut rng);
        assert_eq!(linear.num_featurizer_params(), 0);
        assert_eq!(linear.feat_dim(), 5);
    }
}
