use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemv_add, gemv_t_add, outer_add, tanh_grad_from_output, Matrix, Real, Vector};

/// Feed-forward `tanh(w·x + b)` layer placed in front of the first recurrent
/// layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub w: Matrix,
    pub b: Vector,
}

impl Projection {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self {
            w: Matrix::zeros(output_dim, input_dim),
            b: Vector::zeros(output_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &[Real]) -> Result<Vector> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("input_projection", &self.w, format!("[{}]", x.len())));
        }
        let mut pre = self.b.clone();
        gemv_add(&self.w, x, &mut pre);
        Ok(pre.map(Real::tanh))
    }

    /// Backward through the projection given its input `x`, its output `y`
    /// and the upstream gradient `dy`. Returns the gradient for `x`.
    pub fn backward(&self, x: &[Real], y: &[Real], dy: &[Real], grads: Option<&mut Projection>) -> Vector {
        let dpre: Vec<Real> = dy.iter().zip(y).map(|(d, y)| d * tanh_grad_from_output(*y)).collect();
        if let Some(g) = grads {
            outer_add(&mut g.w, &dpre, x);
            crate::linalg::add_into(&mut g.b, &dpre);
        }
        let mut dx = vec![0.0; self.input_dim()];
        gemv_t_add(&self.w, &dpre, &mut dx);
        Vector::from_raw(dx)
    }
}

pub fn input_projection(p: &Projection, x: &Vector) -> Result<Vector> {
    p.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    #[test]
    fn zero_weights_give_zero() {
        let p = Projection::zeros(3, 2);
        assert_eq!(p.forward(&[1.0, -2.0, 0.5]).unwrap(), Vector::zeros(2));
    }

    #[test]
    fn identity_weights_in_linear_regime() {
        let p = Projection {
            w: Matrix::identity(3),
            b: Vector::zeros(3),
        };
        let x = [0.01, -0.007, 0.002];
        let y = p.forward(&x).unwrap();
        for (a, b) in y.iter().zip(x) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn shape_mismatch() {
        assert!(Projection::zeros(3, 2).forward(&[0.0; 2]).is_err());
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = Rng::new(11);
        let p = Projection {
            w: rng.uniform_matrix(2, 3, -1.0, 1.0),
            b: rng.uniform_vector(2, -0.5, 0.5),
        };
        let x = rng.uniform_vector(3, -1.0, 1.0);
        let w = [0.7, -1.3];
        let loss = |p: &Projection| crate::linalg::dot(&p.forward(&x).unwrap(), &w);
        let y = p.forward(&x).unwrap();
        let mut g = Projection::zeros(3, 2);
        p.backward(&x, &y, &w, Some(&mut g));
        let h = 1e-5;
        for i in 0..6 {
            let mut pp = p.clone();
            pp.w.as_mut_slice()[i] += h;
            let mut pm = p.clone();
            pm.w.as_mut_slice()[i] -= h;
            let num = (loss(&pp) - loss(&pm)) / (2.0 * h);
            let ana = g.w.as_slice()[i];
            assert!((num - ana).abs() / ana.abs().max(1e-8) < 1e-6);
        }
    }
}
