//! Single-timestep forward and backward passes for the vanilla RNN, LSTM and
//! GRU cells, plus the output head shared by all of them.
//!
//! Every gate is an affine map of the step input and the previous hidden
//! state, optionally layer-normalized, followed by a squashing nonlinearity.
//! Backward functions take an optional gradient accumulator: `None` computes
//! only the gradients flowing to the previous state and the input.

mod gru;
mod head;
mod lstm;
mod rnn;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use gru::{GruCache, GruParams, GruStepGrads};
pub use head::{output_head, HeadCache, OutputActivation, OutputHead};
pub use lstm::{LstmCache, LstmParams, LstmStepGrads};
pub use rnn::{RnnCache, RnnParams, RnnStepGrads};

use crate::error::{Error, Result};
use crate::linalg::{
    gemv_add, gemv_t_add, outer_add, sigmoid_grad_from_output, sigmoid_scalar, tanh_grad_from_output, Matrix, Real,
    Vector,
};
use crate::training::norm::{LayerNorm, NormCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Rnn,
    Lstm,
    Gru,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Rnn, Arch::Lstm, Arch::Gru];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Rnn => "rnn",
            Arch::Lstm => "lstm",
            Arch::Gru => "gru",
        }
    }

    pub fn has_cell_state(self) -> bool {
        self == Arch::Lstm
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(Arch::Rnn),
            "lstm" => Ok(Arch::Lstm),
            "gru" => Ok(Arch::Gru),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?} (expected rnn, lstm or gru)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Squash {
    Sigmoid,
    Tanh,
}

impl Squash {
    fn apply(self, v: Real) -> Real {
        match self {
            Squash::Sigmoid => sigmoid_scalar(v),
            Squash::Tanh => v.tanh(),
        }
    }

    fn grad_from_output(self, y: Real) -> Real {
        match self {
            Squash::Sigmoid => sigmoid_grad_from_output(y),
            Squash::Tanh => tanh_grad_from_output(y),
        }
    }
}

/// One affine block `w_in·x + w_rec·h + b` with an optional layer norm on
/// the result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub w_in: Matrix,
    pub w_rec: Matrix,
    pub b: Vector,
    pub norm: Option<LayerNorm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateCache {
    /// Affine pre-activation before normalization.
    pub pre: Vector,
    pub norm: Option<NormCache>,
    /// Post-nonlinearity output.
    pub out: Vector,
}

impl Gate {
    pub fn zeros(input_dim: usize, hidden_dim: usize, layer_norm: bool) -> Self {
        Self {
            w_in: Matrix::zeros(hidden_dim, input_dim),
            w_rec: Matrix::zeros(hidden_dim, hidden_dim),
            b: Vector::zeros(hidden_dim),
            norm: layer_norm.then(|| LayerNorm::new(hidden_dim)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.rows()
    }

    pub(crate) fn check_shapes(&self, name: &str) -> Result<()> {
        let n = self.hidden_dim();
        let norm_ok = self
            .norm
            .as_ref()
            .is_none_or(|ln| ln.gain.len() == n && ln.shift.len() == n);
        if self.w_rec.shape() != (n, n) || self.b.len() != n || !norm_ok {
            return Err(Error::InvalidArgument(format!(
                "gate {name}: inconsistent shapes w_in {}, w_rec {}, b [{}]",
                self.w_in,
                self.w_rec,
                self.b.len()
            )));
        }
        Ok(())
    }

    /// `b + w_in·x`
    fn input_affine(&self, x: &[Real]) -> Vector {
        let mut pre = self.b.clone();
        gemv_add(&self.w_in, x, &mut pre);
        pre
    }

    fn forward(&self, x: &[Real], h: &[Real], squash: Squash) -> GateCache {
        let mut pre = self.input_affine(x);
        gemv_add(&self.w_rec, h, &mut pre);
        self.activate(pre, squash)
    }

    fn activate(&self, pre: Vector, squash: Squash) -> GateCache {
        let (normed, norm) = match &self.norm {
            Some(ln) => {
                let (y, c) = ln.forward(&pre);
                (y, Some(c))
            }
            None => (pre.clone(), None),
        };
        GateCache {
            out: normed.map(|v| squash.apply(v)),
            pre,
            norm,
        }
    }

    /// Gradient with respect to the affine pre-activation given the gradient
    /// with respect to the gate output.
    fn pre_grad(&self, cache: &GateCache, dout: &[Real], squash: Squash, grads: Option<&mut Gate>) -> Vector {
        let dnormed: Vec<Real> = dout
            .iter()
            .zip(cache.out.iter())
            .map(|(d, y)| d * squash.grad_from_output(*y))
            .collect();
        match (&self.norm, &cache.norm) {
            (Some(ln), Some(nc)) => {
                let g = grads.and_then(|g| g.norm.as_mut());
                ln.backward(nc, &dnormed, g)
            }
            _ => Vector::from_raw(dnormed),
        }
    }

    fn input_backward(&self, dpre: &[Real], x: &[Real], grads: Option<&mut Gate>, dx: &mut [Real]) {
        if let Some(g) = grads {
            outer_add(&mut g.w_in, dpre, x);
            crate::linalg::add_into(&mut g.b, dpre);
        }
        gemv_t_add(&self.w_in, dpre, dx);
    }

    fn recurrent_backward(&self, drec: &[Real], h_prev: &[Real], grads: Option<&mut Gate>, dh_prev: &mut [Real]) {
        if let Some(g) = grads {
            outer_add(&mut g.w_rec, drec, h_prev);
        }
        gemv_t_add(&self.w_rec, drec, dh_prev);
    }

    /// Full backward of a plain gate: input, bias and recurrent paths.
    fn backward(
        &self,
        cache: &GateCache,
        dout: &[Real],
        squash: Squash,
        x: &[Real],
        h_prev: &[Real],
        mut grads: Option<&mut Gate>,
        dx: &mut [Real],
        dh_prev: &mut [Real],
    ) {
        let dpre = self.pre_grad(cache, dout, squash, grads.as_deref_mut());
        self.input_backward(&dpre, x, grads.as_deref_mut(), dx);
        self.recurrent_backward(&dpre, h_prev, grads, dh_prev);
    }
}

/// Recurrent state carried between steps. `c` is present only for LSTM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub h: Vector,
    pub c: Option<Vector>,
}

impl CellState {
    pub fn zeros(arch: Arch, hidden_dim: usize) -> Self {
        Self {
            h: Vector::zeros(hidden_dim),
            c: arch.has_cell_state().then(|| Vector::zeros(hidden_dim)),
        }
    }

    /// Euclidean norm over all components of the state.
    pub fn norm(&self) -> Real {
        let c2 = self.c.as_ref().map_or(0.0, |c| c.iter().map(|v| v * v).sum());
        (self.h.iter().map(|v| v * v).sum::<Real>() + c2).sqrt()
    }

    pub(crate) fn add_assign(&mut self, other: &CellState) {
        crate::linalg::add_into(&mut self.h, &other.h);
        if let (Some(c), Some(o)) = (self.c.as_mut(), other.c.as_ref()) {
            crate::linalg::add_into(c, o);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepCache {
    Rnn(RnnCache),
    Lstm(LstmCache),
    Gru(GruCache),
}

impl StepCache {
    pub fn arch(&self) -> Arch {
        match self {
            StepCache::Rnn(_) => Arch::Rnn,
            StepCache::Lstm(_) => Arch::Lstm,
            StepCache::Gru(_) => Arch::Gru,
        }
    }

    pub fn input(&self) -> &Vector {
        match self {
            StepCache::Rnn(c) => &c.x,
            StepCache::Lstm(c) => &c.x,
            StepCache::Gru(c) => &c.x,
        }
    }

    /// Total gradient with respect to this step's cell state, given the
    /// gradient arriving from the future and from above: the carried `dc`
    /// plus the part flowing through `h_t = o ⊙ tanh(c_t)`. LSTM only.
    pub fn cell_state_grad(&self, dstate: &CellState) -> Option<Vector> {
        let StepCache::Lstm(c) = self else { return None };
        let n = c.c.len();
        Some(Vector::from_raw(
            (0..n)
                .map(|k| {
                    let carried = dstate.c.as_ref().map_or(0.0, |dc| dc[k]);
                    carried + dstate.h[k] * c.output.out[k] * crate::linalg::tanh_grad_from_output(c.tanh_c[k])
                })
                .collect(),
        ))
    }

    pub fn state(&self) -> CellState {
        match self {
            StepCache::Rnn(c) => CellState {
                h: c.hidden.out.clone(),
                c: None,
            },
            StepCache::Lstm(c) => CellState {
                h: c.h.clone(),
                c: Some(c.c.clone()),
            },
            StepCache::Gru(c) => CellState {
                h: c.h.clone(),
                c: None,
            },
        }
    }
}

/// Parameters of one recurrent layer of any architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Rnn(RnnParams),
    Lstm(LstmParams),
    Gru(GruParams),
}

impl Cell {
    pub fn zeros(arch: Arch, input_dim: usize, hidden_dim: usize, layer_norm: bool) -> Self {
        match arch {
            Arch::Rnn => Cell::Rnn(RnnParams::zeros(input_dim, hidden_dim, layer_norm)),
            Arch::Lstm => Cell::Lstm(LstmParams::zeros(input_dim, hidden_dim, layer_norm)),
            Arch::Gru => Cell::Gru(GruParams::zeros(input_dim, hidden_dim, layer_norm)),
        }
    }

    pub fn arch(&self) -> Arch {
        match self {
            Cell::Rnn(_) => Arch::Rnn,
            Cell::Lstm(_) => Arch::Lstm,
            Cell::Gru(_) => Arch::Gru,
        }
    }

    /// Gates in a fixed order; this order defines tensor layout everywhere.
    pub fn gates(&self) -> Vec<(&'static str, &Gate)> {
        match self {
            Cell::Rnn(p) => vec![("hidden", &p.hidden)],
            Cell::Lstm(p) => vec![
                ("forget", &p.forget),
                ("input", &p.input),
                ("candidate", &p.candidate),
                ("output", &p.output),
            ],
            Cell::Gru(p) => vec![("update", &p.update), ("reset", &p.reset), ("candidate", &p.candidate)],
        }
    }

    pub fn gates_mut(&mut self) -> Vec<(&'static str, &mut Gate)> {
        match self {
            Cell::Rnn(p) => vec![("hidden", &mut p.hidden)],
            Cell::Lstm(p) => vec![
                ("forget", &mut p.forget),
                ("input", &mut p.input),
                ("candidate", &mut p.candidate),
                ("output", &mut p.output),
            ],
            Cell::Gru(p) => vec![
                ("update", &mut p.update),
                ("reset", &mut p.reset),
                ("candidate", &mut p.candidate),
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.gates()[0].1.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.gates()[0].1.hidden_dim()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (m, n) = (self.input_dim(), self.hidden_dim());
        for (name, g) in self.gates() {
            g.check_shapes(name)?;
            if g.input_dim() != m || g.hidden_dim() != n {
                return Err(Error::InvalidArgument(format!(
                    "gate {name} has w_in {}, expected {n}x{m}",
                    g.w_in
                )));
            }
        }
        Ok(())
    }

    pub fn step(&self, x: &[Real], state: &CellState) -> Result<(CellState, StepCache)> {
        match self {
            Cell::Rnn(p) => {
                let (h, cache) = p.step(x, &state.h)?;
                Ok((CellState { h, c: None }, StepCache::Rnn(cache)))
            }
            Cell::Lstm(p) => {
                let c_prev = state
                    .c
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("LSTM step requires a cell state".into()))?;
                let (h, c, cache) = p.step(x, &state.h, c_prev)?;
                Ok((CellState { h, c: Some(c) }, StepCache::Lstm(cache)))
            }
            Cell::Gru(p) => {
                let (h, cache) = p.step(x, &state.h)?;
                Ok((CellState { h, c: None }, StepCache::Gru(cache)))
            }
        }
    }

    /// Backward through one step. Returns the gradient for the incoming state
    /// and for the step input.
    pub fn step_backward(
        &self,
        cache: &StepCache,
        dstate: &CellState,
        grads: Option<&mut Cell>,
    ) -> Result<(CellState, Vector)> {
        let mismatch = || Error::CacheMismatch(format!("{} cache for {} params", cache.arch(), self.arch()));
        match (self, cache) {
            (Cell::Rnn(p), StepCache::Rnn(c)) => {
                let g = match grads {
                    Some(Cell::Rnn(g)) => Some(g),
                    None => None,
                    Some(_) => return Err(mismatch()),
                };
                let (dh_prev, dx) = p.backward_into(c, &dstate.h, g)?;
                Ok((CellState { h: dh_prev, c: None }, dx))
            }
            (Cell::Lstm(p), StepCache::Lstm(c)) => {
                let g = match grads {
                    Some(Cell::Lstm(g)) => Some(g),
                    None => None,
                    Some(_) => return Err(mismatch()),
                };
                let zero;
                let dc = match &dstate.c {
                    Some(dc) => dc,
                    None => {
                        zero = Vector::zeros(p.hidden_dim());
                        &zero
                    }
                };
                let (dh_prev, dc_prev, dx) = p.backward_into(c, &dstate.h, dc, g)?;
                Ok((
                    CellState {
                        h: dh_prev,
                        c: Some(dc_prev),
                    },
                    dx,
                ))
            }
            (Cell::Gru(p), StepCache::Gru(c)) => {
                let g = match grads {
                    Some(Cell::Gru(g)) => Some(g),
                    None => None,
                    Some(_) => return Err(mismatch()),
                };
                let (dh_prev, dx) = p.backward_into(c, &dstate.h, g)?;
                Ok((CellState { h: dh_prev, c: None }, dx))
            }
            _ => Err(mismatch()),
        }
    }
}

pub(crate) fn check_len(op: &'static str, what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("{what} [{got}]"),
            format!("expected [{want}]"),
        ))
    }
}

pub(crate) fn check_cache_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::CacheMismatch(format!(
            "{what} has length {got}, params expect {want}"
        )))
    }
}
