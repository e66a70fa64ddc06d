use rand::Rng;

use super::linear::Linear;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// One hidden layer: `linear -> relu -> dropout -> linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    pub input_linear: Linear,
    pub output_linear: Linear,
    pub dropout_rate: f64,
}

impl MlpClassifier {
    pub fn new<R: Rng>(
        rng: &mut R,
        feature_dim: usize,
        hidden: usize,
        classes: usize,
        dropout_rate: f64,
    ) -> Result<Self> {
        if feature_dim == 0 || hidden == 0 || classes == 0 {
            return Err(Error::input("mlp dimensions must be positive"));
        }
        check_dropout(dropout_rate)?;
        Ok(Self {
            input_linear: Linear::glorot(rng, feature_dim, hidden, true),
            output_linear: Linear::glorot(rng, hidden, classes, true),
            dropout_rate,
        })
    }

    pub fn zeros(feature_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input_linear: Linear::zeros(feature_dim, hidden, true),
            output_linear: Linear::zeros(hidden, classes, true),
            dropout_rate: 0.0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.input_linear.in_dim()
    }

    pub fn hidden_size(&self) -> usize {
        self.input_linear.out_dim()
    }

    pub fn class_count(&self) -> usize {
        self.output_linear.out_dim()
    }

    /// Parameter tensors in checkpoint order.
    pub(crate) fn tensors(&self) -> Vec<&Matrix> {
        self.input_linear
            .tensors()
            .chain(self.output_linear.tensors())
            .collect()
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.input_linear
            .tensors_mut()
            .chain(self.output_linear.tensors_mut())
            .collect()
    }

    /// Record the forward pass for a `batch x d` input. With `dropout` set,
    /// the hidden activations are masked by inverted dropout drawn from it.
    pub(crate) fn record<R: Rng>(
        &self,
        tape: &mut Tape,
        x: Var,
        dropout: Option<&mut R>,
        params: &mut Vec<Var>,
    ) -> Result<Var> {
        let h = self.input_linear.record(tape, x, params)?;
        let mut h = tape.relu(h);
        if let Some(rng) = dropout {
            if self.dropout_rate > 0.0 {
                let (r, c) = tape.value(h).shape();
                let keep = 1.0 - self.dropout_rate;
                let mask = (0..r * c)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                h = tape.mul_mask(h, Matrix::from_vec(r, c, mask)?)?;
            }
        }
        self.output_linear.record(tape, h, params)
    }
}

pub(crate) fn check_dropout(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::input(format!("dropout rate {rate} outside [0,1)")));
    }
    Ok(())
}
