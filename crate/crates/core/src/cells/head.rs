use serde::{Deserialize, Serialize};

use super::check_len;
use crate::error::{Error, Result};
use crate::linalg::{gemv_add, gemv_t_add, outer_add, sigmoid, softmax, Matrix, Real, Vector};

/// Nonlinearity applied to the output logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Softmax,
    Sigmoid,
}

/// `ŷ = act(w·h + b)`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputHead {
    pub w: Matrix,
    pub b: Vector,
    pub activation: OutputActivation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadCache {
    pub h: Vector,
    pub yhat: Vector,
}

impl OutputHead {
    pub fn zeros(hidden_dim: usize, output_dim: usize, activation: OutputActivation) -> Self {
        Self {
            w: Matrix::zeros(output_dim, hidden_dim),
            b: Vector::zeros(output_dim),
            activation,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, h: &[Real]) -> Result<(Vector, HeadCache)> {
        check_len("output_head", "h", h.len(), self.hidden_dim())?;
        let mut logits = self.b.clone();
        gemv_add(&self.w, h, &mut logits);
        let yhat = match self.activation {
            OutputActivation::Softmax => softmax(&logits),
            OutputActivation::Sigmoid => sigmoid(&logits),
        };
        Ok((
            yhat.clone(),
            HeadCache {
                h: Vector::from_raw(h.to_vec()),
                yhat,
            },
        ))
    }

    /// Gradient of `−Σ y log ŷ` with respect to the logits.
    ///
    /// Softmax: `ŷ − y`. Sigmoid: `y ⊛ (ŷ − 1)`, since only the entries with
    /// nonzero target contribute to the loss.
    pub fn logit_grad(&self, yhat: &[Real], y: &[Real]) -> Result<Vector> {
        if yhat.len() != y.len() {
            return Err(Error::shape("output_head backward", yhat.len(), y.len()));
        }
        Ok(Vector::from_raw(match self.activation {
            OutputActivation::Softmax => yhat.iter().zip(y).map(|(p, t)| p - t).collect(),
            OutputActivation::Sigmoid => yhat.iter().zip(y).map(|(p, t)| t * (p - 1.0)).collect(),
        }))
    }

    /// Accumulates head gradients for `dlogits` and returns the gradient for
    /// the hidden state.
    pub fn backward(&self, cache: &HeadCache, dlogits: &[Real], grads: Option<&mut OutputHead>) -> Vector {
        if let Some(g) = grads {
            outer_add(&mut g.w, dlogits, &cache.h);
            crate::linalg::add_into(&mut g.b, dlogits);
        }
        let mut dh = vec![0.0; self.hidden_dim()];
        gemv_t_add(&self.w, dlogits, &mut dh);
        Vector::from_raw(dh)
    }
}

pub fn output_head(head: &OutputHead, h: &Vector) -> Result<Vector> {
    Ok(head.forward(h)?.0)
}
