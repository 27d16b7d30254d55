use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::sequence::GradSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipMode {
    /// One L2 norm across every parameter.
    #[default]
    Global,
    /// Each tensor is capped independently.
    PerTensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipOutcome {
    pub applied: bool,
    /// Global norm before clipping.
    pub global_norm: Real,
}

fn check_threshold(threshold: Real) -> Result<()> {
    if threshold > 0.0 && threshold.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "clip threshold must be positive, got {threshold}"
        )))
    }
}

/// Rescales `g` in place so its global L2 norm is at most `threshold`.
/// Gradients already under the threshold are left untouched.
pub fn clip_gradients(g: &mut GradSet, threshold: Real) -> Result<ClipOutcome> {
    check_threshold(threshold)?;
    if !g.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let global_norm = g.global_norm();
    let applied = global_norm > threshold;
    if applied {
        g.scale(threshold / global_norm);
    }
    Ok(ClipOutcome { applied, global_norm })
}

pub fn clip_gradients_per_tensor(g: &mut GradSet, threshold: Real) -> Result<ClipOutcome> {
    check_threshold(threshold)?;
    if !g.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let global_norm = g.global_norm();
    let mut applied = false;
    for t in g.tensors_mut() {
        let norm = t.data.iter().map(|v| v * v).sum::<Real>().sqrt();
        if norm > threshold {
            let k = threshold / norm;
            t.data.iter_mut().for_each(|v| *v *= k);
            applied = true;
        }
    }
    Ok(ClipOutcome { applied, global_norm })
}

impl ClipMode {
    pub fn apply(self, g: &mut GradSet, threshold: Real) -> Result<ClipOutcome> {
        match self {
            ClipMode::Global => clip_gradients(g, threshold),
            ClipMode::PerTensor => clip_gradients_per_tensor(g, threshold),
        }
    }
}
