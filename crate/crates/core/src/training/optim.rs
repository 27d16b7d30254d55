use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::sequence::{GradSet, ParamSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    pub learning_rate: Real,
    pub rmsprop_decay: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Accumulators carried between optimizer steps. Moment buffers mirror the
/// parameter set they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    /// Adam's first moment.
    pub first_moment: Option<GradSet>,
    /// Squared-gradient average (RMSprop) or Adam's second moment.
    pub second_moment: Option<GradSet>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        let zero = || Some(params.zeros_like());
        let (first_moment, second_moment) = match kind {
            OptimizerKind::Sgd => (None, None),
            OptimizerKind::Rmsprop => (None, zero()),
            OptimizerKind::Adam => (zero(), zero()),
        };
        Self {
            kind,
            step: 0,
            first_moment,
            second_moment,
        }
    }

    /// Applies one update of whichever optimizer this state belongs to.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &GradSet, hyper: &Hyper) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => {
                sgd_step(params, grads, hyper.learning_rate)?;
                self.step += 1;
                Ok(())
            }
            OptimizerKind::Rmsprop => rmsprop_step(params, grads, self, hyper),
            OptimizerKind::Adam => adam_step(params, grads, self, hyper),
        }
    }

    /// Named accumulator buffers in a fixed order, for persistence.
    pub fn buffers(&self) -> Vec<(&'static str, &GradSet)> {
        let mut out = Vec::new();
        if let Some(m) = &self.first_moment {
            out.push(("first_moment", m));
        }
        if let Some(v) = &self.second_moment {
            out.push(("second_moment", v));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut GradSet)> {
        let mut out = Vec::new();
        if let Some(m) = &mut self.first_moment {
            out.push(("first_moment", m));
        }
        if let Some(v) = &mut self.second_moment {
            out.push(("second_moment", v));
        }
        out
    }
}

fn check_pair(params: &ParamSet, grads: &GradSet, op: &'static str) -> Result<()> {
    let (a, b) = (params.num_scalars(), grads.num_scalars());
    if a != b || params.tensor_names() != grads.tensor_names() {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

fn moment<'a>(slot: &'a mut Option<GradSet>, params: &ParamSet, what: &str) -> Result<&'a mut GradSet> {
    let m = slot.get_or_insert_with(|| params.zeros_like());
    if m.num_scalars() != params.num_scalars() {
        return Err(Error::InvalidArgument(format!("{what} does not match the parameters")));
    }
    Ok(m)
}

fn commit(params: &mut ParamSet, theta: &[Real]) -> Result<()> {
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("optimizer update"));
    }
    params.copy_from_flat(theta)
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut ParamSet, grads: &GradSet, learning_rate: Real) -> Result<()> {
    check_pair(params, grads, "sgd_step")?;
    let g = grads.flatten();
    let mut theta = params.flatten();
    for (p, g) in theta.iter_mut().zip(&g) {
        *p -= learning_rate * g;
    }
    commit(params, &theta)
}

/// `v ← ρv + (1−ρ)g²`, `θ ← θ − lr·g/(√v + ε)`.
pub fn rmsprop_step(params: &mut ParamSet, grads: &GradSet, state: &mut OptimizerState, hyper: &Hyper) -> Result<()> {
    check_pair(params, grads, "rmsprop_step")?;
    let g = grads.flatten();
    let mut theta = params.flatten();
    let v_set = moment(&mut state.second_moment, params, "second moment")?;
    let mut v = v_set.flatten();
    let rho = hyper.rmsprop_decay;
    for i in 0..theta.len() {
        v[i] = rho * v[i] + (1.0 - rho) * g[i] * g[i];
        theta[i] -= hyper.learning_rate * g[i] / (v[i].sqrt() + hyper.epsilon);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("optimizer update"));
    }
    commit(params, &theta)?;
    v_set.copy_from_flat(&v)?;
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam.
pub fn adam_step(params: &mut ParamSet, grads: &GradSet, state: &mut OptimizerState, hyper: &Hyper) -> Result<()> {
    check_pair(params, grads, "adam_step")?;
    let g = grads.flatten();
    let mut theta = params.flatten();
    let mut m = moment(&mut state.first_moment, params, "first moment")?.flatten();
    let mut v = moment(&mut state.second_moment, params, "second moment")?.flatten();
    let t = state.step + 1;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
    if m.iter().chain(&v).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("optimizer update"));
    }
    commit(params, &theta)?;
    state
        .first_moment
        .as_mut()
        .expect("allocated above")
        .copy_from_flat(&m)?;
    state
        .second_moment
        .as_mut()
        .expect("allocated above")
        .copy_from_flat(&v)?;
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::Arch;
    use crate::linalg::Rng;
    use crate::sequence::ModelLayout;

    fn params(seed: u64) -> ParamSet {
        let mut p = ParamSet::zeros(&ModelLayout::new(Arch::Rnn, 2, 3, 2)).unwrap();
        let mut rng = Rng::new(seed);
        let flat: Vec<Real> = (0..p.num_scalars()).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        p.copy_from_flat(&flat).unwrap();
        p
    }

    fn half_sq_norm(p: &ParamSet) -> Real {
        0.5 * p.flatten().iter().map(|v| v * v).sum::<Real>()
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut p = params(1);
        let before = p.flatten();
        let mut g = p.zeros_like();
        let mut rng = Rng::new(2);
        let gv: Vec<Real> = (0..g.num_scalars()).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        g.copy_from_flat(&gv).unwrap();
        let hyper = Hyper {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut st = OptimizerState::new(OptimizerKind::Adam, &p);
        adam_step(&mut p, &g, &mut st, &hyper).unwrap();
        for ((a, b), g) in before.iter().zip(p.flatten()).zip(&gv) {
            let want = 0.01 * g.abs() / (g.abs() + 1e-8);
            assert!(((a - b).abs() - want).abs() < 1e-15, "{} vs {want}", (a - b).abs());
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Rmsprop, OptimizerKind::Adam] {
            let mut p = params(3);
            let before = p.clone();
            let g = p.zeros_like();
            let mut st = OptimizerState::new(kind, &p);
            st.apply(&mut p, &g, &Hyper::default()).unwrap();
            assert_eq!(p, before, "{kind}");
        }
    }

    // Trajectory from iterating the moment recurrences independently
    // (plain Python floats), frozen.
    const ADAM_ORACLE: [(usize, f64); 6] = [
        (1, -0.09999999900000002),
        (2, -0.19999999799999935),
        (10, -0.9999999899999985),
        (50, -4.999999949999999),
        (99, -9.899999901000005),
        (100, -9.999999900000004),
    ];

    #[test]
    fn adam_constant_gradient_trajectory() {
        let mut p = ParamSet::zeros(&ModelLayout::new(Arch::Rnn, 1, 1, 1)).unwrap();
        let mut g = p.zeros_like();
        g.fill(1.0);
        let hyper = Hyper {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut st = OptimizerState::new(OptimizerKind::Adam, &p);
        let mut traj = Vec::new();
        for _ in 0..100 {
            adam_step(&mut p, &g, &mut st, &hyper).unwrap();
            traj.push(p.scalar(0));
        }
        for (step, want) in ADAM_ORACLE {
            let got = traj[step - 1] as f64;
            assert!((got - want).abs() < 1e-10, "step {step}: {got} vs {want}");
        }
    }

    #[test]
    fn every_optimizer_decreases_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Rmsprop, OptimizerKind::Adam] {
            let mut p = params(11);
            let start = half_sq_norm(&p);
            let hyper = Hyper {
                learning_rate: 0.01,
                ..Default::default()
            };
            let mut st = OptimizerState::new(kind, &p);
            let mut prev = start;
            for _ in 0..100 {
                // gradient of ½‖θ‖² is θ
                let g = p.clone();
                st.apply(&mut p, &g, &hyper).unwrap();
                let now = half_sq_norm(&p);
                assert!(now < prev, "{kind}: {now} >= {prev}");
                prev = now;
            }
            assert!(prev < start);
            assert_eq!(st.step, 100);
        }
    }

    #[test]
    fn rejects_mismatched_shapes_and_nonfinite() {
        let mut p = params(1);
        let other = ParamSet::zeros(&ModelLayout::new(Arch::Gru, 2, 3, 2)).unwrap();
        let mut st = OptimizerState::new(OptimizerKind::Adam, &p);
        assert!(adam_step(&mut p, &other, &mut st, &Hyper::default()).is_err());
        assert!(sgd_step(&mut p, &other, 0.1).is_err());

        let before = p.clone();
        let mut g = p.zeros_like();
        g.set_scalar(0, Real::NAN);
        for kind in [OptimizerKind::Sgd, OptimizerKind::Rmsprop, OptimizerKind::Adam] {
            let mut st = OptimizerState::new(kind, &p);
            let err = st.apply(&mut p, &g, &Hyper::default()).unwrap_err();
            assert!(matches!(err, Error::NonFinite(_)));
            assert_eq!(p, before);
            assert_eq!(st.step, 0);
        }
    }

    #[test]
    fn rmsprop_matches_hand_computation() {
        let mut p = ParamSet::zeros(&ModelLayout::new(Arch::Rnn, 1, 1, 1)).unwrap();
        p.fill(1.0);
        let mut g = p.zeros_like();
        g.fill(2.0);
        let hyper = Hyper {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut st = OptimizerState::new(OptimizerKind::Rmsprop, &p);
        rmsprop_step(&mut p, &g, &mut st, &hyper).unwrap();
        // v = 0.1·4 = 0.4; θ = 1 − 0.1·2/(√0.4 + 1e-8)
        let want = 1.0 - 0.1 * 2.0 / ((0.4 as Real).sqrt() + 1e-8);
        assert!((p.scalar(0) - want).abs() < 1e-15);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("ADAM".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert!("lbfgs".parse::<OptimizerKind>().is_err());
    }
}
