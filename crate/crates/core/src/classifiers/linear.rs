use rand::Rng;

use crate::error::Result;
use crate::numerics::{Matrix, Tape, Var};

/// `y = x·W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Option<Matrix>,
}

impl Linear {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, with_bias: bool) -> Self {
        Self {
            weight: glorot_matrix(rng, fan_in, fan_out),
            bias: with_bias.then(|| Matrix::zeros(1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, with_bias: bool) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: with_bias.then(|| Matrix::zeros(1, fan_out)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub(crate) fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }

    /// Record the layer on `tape`; `params` receives the leaves it creates.
    pub(crate) fn record(&self, tape: &mut Tape, x: Var, params: &mut Vec<Var>) -> Result<Var> {
        let w = tape.leaf(self.weight.clone());
        params.push(w);
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.leaf(b.clone());
                params.push(b);
                tape.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

pub(crate) fn glorot_matrix<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("finite glorot draw")
}
