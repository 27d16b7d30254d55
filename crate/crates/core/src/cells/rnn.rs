use serde::{Deserialize, Serialize};

use super::{check_cache_len, check_len, Gate, GateCache, Squash};
use crate::error::Result;
use crate::linalg::{Real, Vector};

/// Vanilla recurrent cell: `h = tanh(w_in·x + w_rec·h_prev + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    pub hidden: Gate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub hidden: GateCache,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnStepGrads {
    pub grads: RnnParams,
    pub dh_prev: Vector,
    pub dx: Vector,
}

impl RnnParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, layer_norm: bool) -> Self {
        Self {
            hidden: Gate::zeros(input_dim, hidden_dim, layer_norm),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.hidden_dim()
    }

    pub fn step(&self, x: &[Real], h_prev: &[Real]) -> Result<(Vector, RnnCache)> {
        check_len("rnn_step", "x", x.len(), self.input_dim())?;
        check_len("rnn_step", "h_prev", h_prev.len(), self.hidden_dim())?;
        let hidden = self.hidden.forward(x, h_prev, Squash::Tanh);
        Ok((
            hidden.out.clone(),
            RnnCache {
                x: Vector::from_raw(x.to_vec()),
                h_prev: Vector::from_raw(h_prev.to_vec()),
                hidden,
            },
        ))
    }

    pub fn step_backward(&self, cache: &RnnCache, dh: &[Real]) -> Result<RnnStepGrads> {
        let mut grads = Self::zeros(self.input_dim(), self.hidden_dim(), self.hidden.norm.is_some());
        let (dh_prev, dx) = self.backward_into(cache, dh, Some(&mut grads))?;
        Ok(RnnStepGrads { grads, dh_prev, dx })
    }

    pub(crate) fn backward_into(
        &self,
        cache: &RnnCache,
        dh: &[Real],
        grads: Option<&mut RnnParams>,
    ) -> Result<(Vector, Vector)> {
        let n = self.hidden_dim();
        check_cache_len("rnn cache x", cache.x.len(), self.input_dim())?;
        check_cache_len("rnn cache h_prev", cache.h_prev.len(), n)?;
        check_cache_len("rnn cache h", cache.hidden.out.len(), n)?;
        check_len("rnn_step_backward", "dh", dh.len(), n)?;
        let mut dx = vec![0.0; self.input_dim()];
        let mut dh_prev = vec![0.0; n];
        self.hidden.backward(
            &cache.hidden,
            dh,
            Squash::Tanh,
            &cache.x,
            &cache.h_prev,
            grads.map(|g| &mut g.hidden),
            &mut dx,
            &mut dh_prev,
        );
        Ok((Vector::from_raw(dh_prev), Vector::from_raw(dx)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Matrix, Rng};

    fn random(rng: &mut Rng, m: usize, n: usize) -> RnnParams {
        RnnParams {
            hidden: Gate {
                w_in: rng.uniform_matrix(n, m, -1.0, 1.0),
                w_rec: rng.uniform_matrix(n, n, -1.0, 1.0),
                b: rng.uniform_vector(n, -0.5, 0.5),
                norm: None,
            },
        }
    }

    #[test]
    fn zero_params_give_zero_state() {
        let p = RnnParams::zeros(3, 2, false);
        let (h, _) = p.step(&[1.0, 2.0, 3.0], &[0.4, -0.2]).unwrap();
        assert_eq!(h, Vector::zeros(2));
    }

    #[test]
    fn identity_recurrence_is_tanh_of_previous() {
        let mut p = RnnParams::zeros(2, 3, false);
        p.hidden.w_rec = Matrix::identity(3);
        let h_prev = [0.3, -1.2, 2.0];
        let (h, _) = p.step(&[5.0, -5.0], &h_prev).unwrap();
        for (a, b) in h.iter().zip(h_prev) {
            assert_eq!(*a, b.tanh());
        }
    }

    #[test]
    fn matches_straight_line_evaluation() {
        let mut rng = Rng::new(17);
        let p = random(&mut rng, 2, 2);
        let x = [0.25, -0.75];
        let hp = [0.1, 0.6];
        let (h, _) = p.step(&x, &hp).unwrap();
        let (wi, wr, b) = (&p.hidden.w_in, &p.hidden.w_rec, &p.hidden.b);
        for i in 0..2 {
            let z = wi.get(i, 0) * x[0] + wi.get(i, 1) * x[1] + wr.get(i, 0) * hp[0] + wr.get(i, 1) * hp[1] + b[i];
            assert!((h[i] - z.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_and_zero_recurrence() {
        let mut rng = Rng::new(3);
        let p = random(&mut rng, 3, 2);
        let (_, cache) = p.step(&[0.1, 0.2, 0.3], &[0.5, -0.5]).unwrap();
        let out = p.step_backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(out.dh_prev.iter().chain(out.dx.iter()).all(|v| *v == 0.0));
        assert!(out.grads.hidden.w_in.as_slice().iter().all(|v| *v == 0.0));

        let mut p0 = p.clone();
        p0.hidden.w_rec = Matrix::zeros(2, 2);
        let (_, cache) = p0.step(&[0.1, 0.2, 0.3], &[0.5, -0.5]).unwrap();
        let out = p0.step_backward(&cache, &[1.0, -2.0]).unwrap();
        assert_eq!(out.dh_prev, Vector::zeros(2));
    }

    #[test]
    fn shape_errors() {
        let p = RnnParams::zeros(3, 2, false);
        assert!(p.step(&[0.0; 2], &[0.0; 2]).is_err());
        assert!(p.step(&[0.0; 3], &[0.0; 3]).is_err());
        let (_, cache) = p.step(&[0.0; 3], &[0.0; 2]).unwrap();
        assert!(RnnParams::zeros(4, 2, false).step_backward(&cache, &[0.0; 2]).is_err());
    }
}
