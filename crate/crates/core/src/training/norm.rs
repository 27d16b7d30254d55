use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Real, Vector};

pub const LAYER_NORM_EPS: Real = 1e-5;

/// Per-feature gain and shift applied after normalizing a pre-activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vector,
    pub shift: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormCache {
    pub normalized: Vector,
    pub inv_std: Real,
}

impl LayerNorm {
    /// Identity-initialized norm: unit gain, zero shift.
    pub fn new(len: usize) -> Self {
        Self {
            gain: Vector::filled(len, 1.0),
            shift: Vector::zeros(len),
        }
    }

    pub fn len(&self) -> usize {
        self.gain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gain.is_empty()
    }

    pub fn forward(&self, z: &[Real]) -> (Vector, NormCache) {
        let n = z.len() as Real;
        let mean = z.iter().sum::<Real>() / n;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let normalized: Vec<Real> = z.iter().map(|v| (v - mean) * inv_std).collect();
        let out = normalized
            .iter()
            .zip(self.gain.iter().zip(self.shift.iter()))
            .map(|(x, (g, s))| x * g + s)
            .collect();
        (
            Vector::from_raw(out),
            NormCache {
                normalized: Vector::from_raw(normalized),
                inv_std,
            },
        )
    }

    /// Returns the gradient with respect to the un-normalized input and, when
    /// `grads` is given, accumulates gain/shift gradients into it.
    pub fn backward(&self, cache: &NormCache, dy: &[Real], grads: Option<&mut LayerNorm>) -> Vector {
        let n = dy.len() as Real;
        let xhat = &cache.normalized;
        if let Some(g) = grads {
            for i in 0..dy.len() {
                g.gain[i] += dy[i] * xhat[i];
                g.shift[i] += dy[i];
            }
        }
        let dxhat: Vec<Real> = dy.iter().zip(self.gain.iter()).map(|(d, g)| d * g).collect();
        let sum_d: Real = dxhat.iter().sum();
        let sum_dx: Real = dxhat.iter().zip(xhat.iter()).map(|(d, x)| d * x).sum();
        Vector::from_raw(
            dxhat
                .iter()
                .zip(xhat.iter())
                .map(|(d, x)| cache.inv_std / n * (n * d - sum_d - x * sum_dx))
                .collect(),
        )
    }
}

/// `(z - mean) / sqrt(var + 1e-5) ⊛ gain + bias`
pub fn layer_norm(z: &Vector, gain: &Vector, bias: &Vector) -> Result<Vector> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("layer_norm of an empty vector".into()));
    }
    if gain.len() != z.len() || bias.len() != z.len() {
        return Err(Error::shape(
            "layer_norm",
            format!("[{}]", z.len()),
            format!("gain [{}], bias [{}]", gain.len(), bias.len()),
        ));
    }
    let norm = LayerNorm {
        gain: gain.clone(),
        shift: bias.clone(),
    };
    Ok(norm.forward(z).0)
}
