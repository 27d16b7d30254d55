use serde::{Deserialize, Serialize};

use super::{check_cache_len, check_len, Gate, GateCache, Squash};
use crate::error::Result;
use crate::linalg::{gemv_add, Real, Vector};

/// GRU cell.
///
/// ```text
/// z  = σ(w_zs·h_prev + w_zi·x + b_z)
/// r  = σ(w_rs·h_prev + w_ri·x + b_r)
/// h' = tanh(w_ci·x + r ⊛ (w_si·h_prev) + b_c)
/// h  = z ⊛ h_prev + (1 − z) ⊛ h'
/// ```
///
/// `z` close to 1 copies the previous state forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub update: Gate,
    pub reset: Gate,
    pub candidate: Gate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub update: GateCache,
    pub reset: GateCache,
    /// `w_si·h_prev`, before the reset gate is applied.
    pub recurrent: Vector,
    pub candidate: GateCache,
    pub h: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruStepGrads {
    pub grads: GruParams,
    pub dh_prev: Vector,
    pub dx: Vector,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, layer_norm: bool) -> Self {
        let gate = || Gate::zeros(input_dim, hidden_dim, layer_norm);
        Self {
            update: gate(),
            reset: gate(),
            candidate: gate(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.update.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.update.hidden_dim()
    }

    pub fn step(&self, x: &[Real], h_prev: &[Real]) -> Result<(Vector, GruCache)> {
        let n = self.hidden_dim();
        check_len("gru_step", "x", x.len(), self.input_dim())?;
        check_len("gru_step", "h_prev", h_prev.len(), n)?;
        let update = self.update.forward(x, h_prev, Squash::Sigmoid);
        let reset = self.reset.forward(x, h_prev, Squash::Sigmoid);
        let mut recurrent = vec![0.0; n];
        gemv_add(&self.candidate.w_rec, h_prev, &mut recurrent);
        let mut pre = self.candidate.input_affine(x);
        for k in 0..n {
            pre[k] += reset.out[k] * recurrent[k];
        }
        let candidate = self.candidate.activate(pre, Squash::Tanh);
        let h: Vec<Real> = (0..n)
            .map(|k| {
                let z = update.out[k];
                z * h_prev[k] + (1.0 - z) * candidate.out[k]
            })
            .collect();
        let h = Vector::from_raw(h);
        Ok((
            h.clone(),
            GruCache {
                x: Vector::from_raw(x.to_vec()),
                h_prev: Vector::from_raw(h_prev.to_vec()),
                update,
                reset,
                recurrent: Vector::from_raw(recurrent),
                candidate,
                h,
            },
        ))
    }

    pub fn step_backward(&self, cache: &GruCache, dh: &[Real]) -> Result<GruStepGrads> {
        let mut grads = Self::zeros(self.input_dim(), self.hidden_dim(), self.update.norm.is_some());
        let (dh_prev, dx) = self.backward_into(cache, dh, Some(&mut grads))?;
        Ok(GruStepGrads { grads, dh_prev, dx })
    }

    pub(crate) fn backward_into(
        &self,
        cache: &GruCache,
        dh: &[Real],
        mut grads: Option<&mut GruParams>,
    ) -> Result<(Vector, Vector)> {
        let n = self.hidden_dim();
        check_cache_len("gru cache x", cache.x.len(), self.input_dim())?;
        check_cache_len("gru cache h_prev", cache.h_prev.len(), n)?;
        check_cache_len("gru cache h", cache.h.len(), n)?;
        check_len("gru_step_backward", "dh", dh.len(), n)?;

        let z = &cache.update.out;
        let hc = &cache.candidate.out;
        let mut dh_prev: Vec<Real> = (0..n).map(|k| dh[k] * z[k]).collect();
        let dz: Vec<Real> = (0..n).map(|k| dh[k] * (cache.h_prev[k] - hc[k])).collect();
        let dhc: Vec<Real> = (0..n).map(|k| dh[k] * (1.0 - z[k])).collect();

        let mut dx = vec![0.0; self.input_dim()];
        let x = &cache.x;
        let hp = &cache.h_prev;

        // candidate: the recurrent term is modulated by the reset gate
        let dpre_c = self.candidate.pre_grad(
            &cache.candidate,
            &dhc,
            Squash::Tanh,
            grads.as_deref_mut().map(|g| &mut g.candidate),
        );
        self.candidate
            .input_backward(&dpre_c, x, grads.as_deref_mut().map(|g| &mut g.candidate), &mut dx);
        let drec: Vec<Real> = (0..n).map(|k| dpre_c[k] * cache.reset.out[k]).collect();
        self.candidate
            .recurrent_backward(&drec, hp, grads.as_deref_mut().map(|g| &mut g.candidate), &mut dh_prev);
        let dr: Vec<Real> = (0..n).map(|k| dpre_c[k] * cache.recurrent[k]).collect();

        self.update.backward(
            &cache.update,
            &dz,
            Squash::Sigmoid,
            x,
            hp,
            grads.as_deref_mut().map(|g| &mut g.update),
            &mut dx,
            &mut dh_prev,
        );
        self.reset.backward(
            &cache.reset,
            &dr,
            Squash::Sigmoid,
            x,
            hp,
            grads.map(|g| &mut g.reset),
            &mut dx,
            &mut dh_prev,
        );
        Ok((Vector::from_raw(dh_prev), Vector::from_raw(dx)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sigmoid_scalar, Rng};

    fn random_gate(rng: &mut Rng, m: usize, n: usize) -> Gate {
        Gate {
            w_in: rng.uniform_matrix(n, m, -1.0, 1.0),
            w_rec: rng.uniform_matrix(n, n, -1.0, 1.0),
            b: rng.uniform_vector(n, -0.5, 0.5),
            norm: None,
        }
    }

    fn random(rng: &mut Rng, m: usize, n: usize) -> GruParams {
        GruParams {
            update: random_gate(rng, m, n),
            reset: random_gate(rng, m, n),
            candidate: random_gate(rng, m, n),
        }
    }

    #[test]
    fn saturated_update_copies_or_replaces() {
        let mut rng = Rng::new(2);
        let mut p = random(&mut rng, 2, 3);
        let x = [0.4, -0.8];
        let hp = [0.3, -0.6, 0.9];
        p.update.w_in.scale(0.0);
        p.update.w_rec.scale(0.0);

        p.update.b = Vector::filled(3, 20.0);
        let (h, _) = p.step(&x, &hp).unwrap();
        for (a, b) in h.iter().zip(hp) {
            assert!((a - b).abs() < 1e-8);
        }

        p.update.b = Vector::filled(3, -20.0);
        let (h, cache) = p.step(&x, &hp).unwrap();
        for (a, b) in h.iter().zip(cache.candidate.out.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn matches_straight_line_evaluation() {
        let mut rng = Rng::new(29);
        let p = random(&mut rng, 2, 2);
        let x = [-0.5, 0.8];
        let hp = [0.6, -0.1];
        let (h, _) = p.step(&x, &hp).unwrap();
        let xin = |g: &Gate, k: usize| g.w_in.get(k, 0) * x[0] + g.w_in.get(k, 1) * x[1];
        let rec = |g: &Gate, k: usize| g.w_rec.get(k, 0) * hp[0] + g.w_rec.get(k, 1) * hp[1];
        for k in 0..2 {
            let z = sigmoid_scalar(rec(&p.update, k) + xin(&p.update, k) + p.update.b[k]);
            let r = sigmoid_scalar(rec(&p.reset, k) + xin(&p.reset, k) + p.reset.b[k]);
            let hc = (xin(&p.candidate, k) + r * rec(&p.candidate, k) + p.candidate.b[k]).tanh();
            let expect = z * hp[k] + (1.0 - z) * hc;
            assert!((h[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn output_is_convex_combination() {
        let mut rng = Rng::new(41);
        for _ in 0..50 {
            let p = random(&mut rng, 3, 4);
            let x = rng.uniform_vector(3, -2.0, 2.0);
            let hp = rng.uniform_vector(4, -1.0, 1.0);
            let (h, cache) = p.step(&x, &hp).unwrap();
            for k in 0..4 {
                let lo = hp[k].min(cache.candidate.out[k]);
                let hi = hp[k].max(cache.candidate.out[k]);
                assert!(h[k] >= lo - 1e-15 && h[k] <= hi + 1e-15);
            }
            assert!(cache
                .update
                .out
                .iter()
                .chain(cache.reset.out.iter())
                .all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let mut rng = Rng::new(4);
        let p = random(&mut rng, 2, 2);
        let (_, cache) = p.step(&[0.3, 0.1], &[0.2, 0.2]).unwrap();
        let g = p.step_backward(&cache, &[0.0; 2]).unwrap();
        assert!(g.dh_prev.iter().chain(g.dx.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_update_routes_gradient_through_copy_path() {
        let mut rng = Rng::new(6);
        let mut p = random(&mut rng, 2, 3);
        p.update.w_in.scale(0.0);
        p.update.w_rec.scale(0.0);
        p.update.b = Vector::filled(3, 20.0);
        let (_, cache) = p.step(&[0.5, 0.5], &[0.1, -0.2, 0.3]).unwrap();
        let dh = [1.0, -0.5, 2.0];
        let g = p.step_backward(&cache, &dh).unwrap();
        for (a, b) in g.dh_prev.iter().zip(dh) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!(g.grads.candidate.w_in.as_slice().iter().all(|v| v.abs() < 1e-7));
        assert!(g.grads.reset.w_rec.as_slice().iter().all(|v| v.abs() < 1e-7));
    }
}
