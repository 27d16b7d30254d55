use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::cells::{Arch, Cell};
use crate::error::Result;
use crate::linalg::{Matrix, Real, Rng, Vector};
use crate::sequence::{ModelLayout, ParamSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum InitScheme {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    #[default]
    Glorot,
    /// Uniform in `±scale`.
    Uniform { scale: Real },
}

impl InitScheme {
    pub fn limit(&self, rows: usize, cols: usize) -> Real {
        match *self {
            InitScheme::Glorot => (6.0 / (rows + cols) as Real).sqrt(),
            InitScheme::Uniform { scale } => scale,
        }
    }

    /// Variance of a single drawn weight.
    pub fn variance(&self, rows: usize, cols: usize) -> Real {
        let a = self.limit(rows, cols);
        a * a / 3.0
    }
}

fn draw(rng: &mut Rng, m: &mut Matrix, limit: Real) {
    let (r, c) = m.shape();
    *m = rng.uniform_matrix(r, c, -limit, limit);
}

/// Draws a fresh parameter set. Weights follow `config.init` (recurrent
/// matrices use `recurrent_init_scale` when set); biases start at zero
/// except the LSTM forget-gate bias, which is set to `config.forget_bias`.
pub fn init_params(layout: &ModelLayout, config: &TrainConfig, rng: &mut Rng) -> Result<ParamSet> {
    let mut p = ParamSet::zeros(layout)?;
    let scheme = config.init;
    if let Some(proj) = &mut p.projection {
        let (r, c) = proj.w.shape();
        draw(rng, &mut proj.w, scheme.limit(r, c));
    }
    for cell in &mut p.layers {
        for (_, gate) in cell.gates_mut() {
            let (r, c) = gate.w_in.shape();
            draw(rng, &mut gate.w_in, scheme.limit(r, c));
            let (r, c) = gate.w_rec.shape();
            let limit = config.recurrent_init_scale.unwrap_or_else(|| scheme.limit(r, c));
            draw(rng, &mut gate.w_rec, limit);
        }
        if let Cell::Lstm(lstm) = cell {
            lstm.forget.b = Vector::filled(lstm.hidden_dim(), config.forget_bias);
        }
    }
    let (r, c) = p.head.w.shape();
    draw(rng, &mut p.head.w, scheme.limit(r, c));
    debug_assert!(layout.arch != Arch::Lstm || p.layers.iter().all(|c| matches!(c, Cell::Lstm(_))));
    Ok(p)
}
