use crate::error::{Error, Result};
use crate::linalg::{Real, Rng, Vector};

/// Inverted-dropout mask: each entry is `0` with probability `1 - keep_prob`
/// and `1 / keep_prob` otherwise, so every entry has expectation one.
pub fn dropout_mask(rng: &mut Rng, len: usize, keep_prob: Real) -> Result<Vector> {
    check_keep_prob(keep_prob)?;
    if keep_prob == 1.0 {
        return Ok(Vector::filled(len, 1.0));
    }
    let scale = 1.0 / keep_prob;
    Ok(Vector::from_raw(
        (0..len)
            .map(|_| if rng.uniform() < keep_prob { scale } else { 0.0 })
            .collect(),
    ))
}

pub fn check_keep_prob(keep_prob: Real) -> Result<()> {
    if keep_prob > 0.0 && keep_prob <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "dropout keep probability must be in (0, 1], got {keep_prob}"
        )))
    }
}
