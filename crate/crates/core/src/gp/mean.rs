use serde::{Deserialize, Serialize};

use crate::tensor::{Array, Var};

/// Prior mean function of a (multi-output) GP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MeanFunction {
    Zero,
    /// Output `j` copies input column `columns[j]`.
    Identity { columns: Vec<usize> },
    /// Fixed affine map `x ↦ W x + b`, with `W` of shape `n_out × d_in`.
    Linear { weights: Array, bias: Vec<f64> },
}

impl MeanFunction {
    /// Mean of output `j` at every row of `x`.
    pub fn eval(&self, x: &Array, j: usize) -> Vec<f64> {
        match self {
            MeanFunction::Zero => vec![0.0; x.rows()],
            MeanFunction::Identity { columns } => {
                (0..x.rows()).map(|i| x.at(i, columns[j])).collect()
            }
            MeanFunction::Linear { weights, bias } => (0..x.rows())
                .map(|i| {
                    x.row(i)
                        .iter()
                        .zip(weights.row(j))
                        .map(|(a, w)| a * w)
                        .sum::<f64>()
                        + bias[j]
                })
                .collect(),
        }
    }

    /// Tape version of [`MeanFunction::eval`]; `None` for the zero mean.
    pub fn eval_var<'t>(&self, x: Var<'t>, j: usize) -> Option<Var<'t>> {
        match self {
            MeanFunction::Zero => None,
            MeanFunction::Identity { columns } => Some(x.col(columns[j])),
            MeanFunction::Linear { weights, bias } => {
                let tape = x.tape();
                let w = tape.constant(Array::matrix(weights.cols(), 1, weights.row(j).to_vec()));
                Some(x.matmul(w) + bias[j])
            }
        }
    }
}
