use serde::{Deserialize, Serialize};

use super::{check_cache_len, check_len, Gate, GateCache, Squash};
use crate::error::Result;
use crate::linalg::{tanh_grad_from_output, Real, Vector};

/// LSTM cell.
///
/// ```text
/// f = σ(affine_f)   i = σ(affine_i)   g = tanh(affine_g)   o = σ(affine_o)
/// c = f ⊛ c_prev + i ⊛ g
/// h = o ⊛ tanh(c)
/// ```
///
/// The forget gate multiplies the previous cell state inside the update, and
/// the candidate uses `tanh` so that cell updates can be negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub forget: Gate,
    pub input: Gate,
    pub candidate: Gate,
    pub output: Gate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub c_prev: Vector,
    pub forget: GateCache,
    pub input: GateCache,
    pub candidate: GateCache,
    pub output: GateCache,
    pub c: Vector,
    pub tanh_c: Vector,
    pub h: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmStepGrads {
    pub grads: LstmParams,
    pub dh_prev: Vector,
    pub dc_prev: Vector,
    pub dx: Vector,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, layer_norm: bool) -> Self {
        let gate = || Gate::zeros(input_dim, hidden_dim, layer_norm);
        Self {
            forget: gate(),
            input: gate(),
            candidate: gate(),
            output: gate(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forget.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.forget.hidden_dim()
    }

    pub fn step(&self, x: &[Real], h_prev: &[Real], c_prev: &[Real]) -> Result<(Vector, Vector, LstmCache)> {
        let n = self.hidden_dim();
        check_len("lstm_step", "x", x.len(), self.input_dim())?;
        check_len("lstm_step", "h_prev", h_prev.len(), n)?;
        check_len("lstm_step", "c_prev", c_prev.len(), n)?;
        let forget = self.forget.forward(x, h_prev, Squash::Sigmoid);
        let input = self.input.forward(x, h_prev, Squash::Sigmoid);
        let candidate = self.candidate.forward(x, h_prev, Squash::Tanh);
        let output = self.output.forward(x, h_prev, Squash::Sigmoid);
        let c: Vec<Real> = (0..n)
            .map(|k| forget.out[k] * c_prev[k] + input.out[k] * candidate.out[k])
            .collect();
        let tanh_c: Vec<Real> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<Real> = (0..n).map(|k| output.out[k] * tanh_c[k]).collect();
        let (h, c) = (Vector::from_raw(h), Vector::from_raw(c));
        let cache = LstmCache {
            x: Vector::from_raw(x.to_vec()),
            h_prev: Vector::from_raw(h_prev.to_vec()),
            c_prev: Vector::from_raw(c_prev.to_vec()),
            forget,
            input,
            candidate,
            output,
            c: c.clone(),
            tanh_c: Vector::from_raw(tanh_c),
            h: h.clone(),
        };
        Ok((h, c, cache))
    }

    pub fn step_backward(&self, cache: &LstmCache, dh: &[Real], dc: &[Real]) -> Result<LstmStepGrads> {
        let layer_norm = self.forget.norm.is_some();
        let mut grads = Self::zeros(self.input_dim(), self.hidden_dim(), layer_norm);
        let (dh_prev, dc_prev, dx) = self.backward_into(cache, dh, dc, Some(&mut grads))?;
        Ok(LstmStepGrads {
            grads,
            dh_prev,
            dc_prev,
            dx,
        })
    }

    pub(crate) fn backward_into(
        &self,
        cache: &LstmCache,
        dh: &[Real],
        dc: &[Real],
        mut grads: Option<&mut LstmParams>,
    ) -> Result<(Vector, Vector, Vector)> {
        let n = self.hidden_dim();
        check_cache_len("lstm cache x", cache.x.len(), self.input_dim())?;
        check_cache_len("lstm cache h_prev", cache.h_prev.len(), n)?;
        check_cache_len("lstm cache c", cache.c.len(), n)?;
        check_len("lstm_step_backward", "dh", dh.len(), n)?;
        check_len("lstm_step_backward", "dc", dc.len(), n)?;

        let (f, i, g, o) = (
            &cache.forget.out,
            &cache.input.out,
            &cache.candidate.out,
            &cache.output.out,
        );
        let mut d_o = vec![0.0; n];
        let mut d_f = vec![0.0; n];
        let mut d_i = vec![0.0; n];
        let mut d_g = vec![0.0; n];
        let mut dc_prev = vec![0.0; n];
        for k in 0..n {
            d_o[k] = dh[k] * cache.tanh_c[k];
            let dc_total = dc[k] + dh[k] * o[k] * tanh_grad_from_output(cache.tanh_c[k]);
            d_f[k] = dc_total * cache.c_prev[k];
            d_i[k] = dc_total * g[k];
            d_g[k] = dc_total * i[k];
            dc_prev[k] = dc_total * f[k];
        }

        let mut dx = vec![0.0; self.input_dim()];
        let mut dh_prev = vec![0.0; n];
        let (x, hp) = (&cache.x, &cache.h_prev);
        self.forget.backward(
            &cache.forget,
            &d_f,
            Squash::Sigmoid,
            x,
            hp,
            grads.as_deref_mut().map(|g| &mut g.forget),
            &mut dx,
            &mut dh_prev,
        );
        self.input.backward(
            &cache.input,
            &d_i,
            Squash::Sigmoid,
            x,
            hp,
            grads.as_deref_mut().map(|g| &mut g.input),
            &mut dx,
            &mut dh_prev,
        );
        self.candidate.backward(
            &cache.candidate,
            &d_g,
            Squash::Tanh,
            x,
            hp,
            grads.as_deref_mut().map(|g| &mut g.candidate),
            &mut dx,
            &mut dh_prev,
        );
        self.output.backward(
            &cache.output,
            &d_o,
            Squash::Sigmoid,
            x,
            hp,
            grads.map(|g| &mut g.output),
            &mut dx,
            &mut dh_prev,
        );
        Ok((
            Vector::from_raw(dh_prev),
            Vector::from_raw(dc_prev),
            Vector::from_raw(dx),
        ))
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

    fn random(rng: &mut Rng, m: usize, n: usize) -> LstmParams {
        LstmParams {
            forget: random_gate(rng, m, n),
            input: random_gate(rng, m, n),
            candidate: random_gate(rng, m, n),
            output: random_gate(rng, m, n),
        }
    }

    /// Forget gate pinned open, input gate pinned shut, no weights.
    fn carousel(m: usize, n: usize) -> LstmParams {
        let mut p = LstmParams::zeros(m, n, false);
        p.forget.b = Vector::filled(n, 20.0);
        p.input.b = Vector::filled(n, -20.0);
        p
    }

    #[test]
    fn saturated_gates_preserve_cell_state() {
        let p = carousel(2, 3);
        let c_prev = [0.7, -1.4, 3.0];
        let (_, c, _) = p.step(&[1.0, -1.0], &[0.2, 0.1, -0.3], &c_prev).unwrap();
        for (a, b) in c.iter().zip(c_prev) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_everything_gives_zero() {
        let p = LstmParams::zeros(2, 2, false);
        let (h, c, _) = p.step(&[0.5, 0.5], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(h, Vector::zeros(2));
        assert_eq!(c, Vector::zeros(2));
    }

    #[test]
    fn matches_straight_line_evaluation() {
        let mut rng = Rng::new(23);
        let p = random(&mut rng, 2, 2);
        let x = [0.3, -0.9];
        let hp = [0.2, -0.4];
        let cp = [1.1, -0.6];
        let (h, c, _) = p.step(&x, &hp, &cp).unwrap();
        let affine = |g: &Gate, k: usize| {
            g.w_in.get(k, 0) * x[0]
                + g.w_in.get(k, 1) * x[1]
                + g.w_rec.get(k, 0) * hp[0]
                + g.w_rec.get(k, 1) * hp[1]
                + g.b[k]
        };
        for k in 0..2 {
            let f = sigmoid_scalar(affine(&p.forget, k));
            let i = sigmoid_scalar(affine(&p.input, k));
            let g = affine(&p.candidate, k).tanh();
            let o = sigmoid_scalar(affine(&p.output, k));
            let ck = f * cp[k] + i * g;
            assert!((c[k] - ck).abs() < 1e-15);
            assert!((h[k] - o * ck.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let mut rng = Rng::new(8);
        let p = random(&mut rng, 3, 2);
        let (_, _, cache) = p.step(&[0.1, 0.2, 0.3], &[0.1, 0.2], &[0.3, 0.4]).unwrap();
        let g = p.step_backward(&cache, &[0.0; 2], &[0.0; 2]).unwrap();
        assert!(g
            .dh_prev
            .iter()
            .chain(g.dc_prev.iter())
            .chain(g.dx.iter())
            .all(|v| *v == 0.0));
        assert!(g.grads.forget.w_rec.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn carousel_passes_cell_gradient_undiminished() {
        let p = carousel(2, 3);
        let (_, _, cache) = p.step(&[0.5, -0.5], &[0.0; 3], &[0.4, -0.2, 0.9]).unwrap();
        let dc = [1.0, -2.0, 0.5];
        let g = p.step_backward(&cache, &[0.0; 3], &dc).unwrap();
        let n_in: Real = dc.iter().map(|v| v * v).sum::<Real>().sqrt();
        assert!((g.dc_prev.norm() - n_in).abs() < 1e-8 * n_in);
    }

    #[test]
    fn gate_ranges() {
        let mut rng = Rng::new(31);
        let p = random(&mut rng, 3, 4);
        let (h, _, cache) = p
            .step(&[2.0, -3.0, 1.0], &[0.5, -0.5, 0.9, 0.0], &[2.0, -1.0, 0.0, 5.0])
            .unwrap();
        for gate in [&cache.forget, &cache.input, &cache.output] {
            assert!(gate.out.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
        assert!(cache.candidate.out.iter().all(|v| v.abs() < 1.0));
        assert!(h.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn mismatched_cache_rejected() {
        let p = LstmParams::zeros(2, 2, false);
        let (_, _, cache) = p.step(&[0.0; 2], &[0.0; 2], &[0.0; 2]).unwrap();
        assert!(LstmParams::zeros(2, 3, false)
            .step_backward(&cache, &[0.0; 3], &[0.0; 3])
            .is_err());
    }
}
