//! Unrolling a network over a sequence, sequence losses, and
//! backpropagation through time.
//!
//! All timesteps share one [`ParamSet`]. The forward pass keeps a per-step
//! cache ([`ForwardTrace`]) so the backward pass never recomputes anything.

mod bptt;
mod params;
mod topology;

pub use bptt::{bptt, per_step_contributions, truncated_bptt, Backward};
pub use params::{GradSet, ModelLayout, ParamSet, TensorMut, TensorView};
pub use topology::{Topology, TopologyKind};

use crate::cells::{CellState, HeadCache, StepCache};
use crate::error::{Error, Result};
use crate::linalg::{hadamard, Real, Rng, Vector};
use crate::training::dropout::{check_keep_prob, dropout_mask};

/// Floor applied to the predicted probability before taking its log.
pub const LOG_EPS: Real = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub step: usize,
    pub y: Vector,
}

/// Input sequence plus one-hot targets at selected steps.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub inputs: Vec<Vector>,
    pub targets: Vec<Target>,
}

impl SequenceSample {
    pub fn new(inputs: Vec<Vector>, targets: Vec<Target>) -> Result<Self> {
        let s = Self { inputs, targets };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn target_at(&self, step: usize) -> Option<&Vector> {
        self.targets.iter().find(|t| t.step == step).map(|t| &t.y)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let m = self.inputs[0].len();
        if let Some(bad) = self.inputs.iter().find(|x| x.len() != m) {
            return Err(Error::shape("sequence inputs", m, bad.len()));
        }
        for t in &self.targets {
            if t.step >= self.inputs.len() {
                return Err(Error::InvalidArgument(format!(
                    "target step {} outside sequence of length {}",
                    t.step,
                    self.inputs.len()
                )));
            }
            let ones = t.y.iter().filter(|v| **v == 1.0).count();
            let zeros = t.y.iter().filter(|v| **v == 0.0).count();
            if ones != 1 || ones + zeros != t.y.len() {
                return Err(Error::InvalidArgument(format!(
                    "target at step {} is not one-hot",
                    t.step
                )));
            }
        }
        Ok(())
    }
}

/// Dropout masks used by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    /// `[step][layer]`: mask on the input of each recurrent layer.
    pub layer_inputs: Vec<Vec<Vector>>,
    /// `[step]`: mask on the top hidden state before the output head.
    pub head: Vec<Vector>,
}

#[derive(Default)]
pub enum DropoutPlan<'a> {
    /// Evaluation mode: exact identity.
    #[default]
    Off,
    /// Draw fresh masks from `rng`.
    Sample { keep_prob: Real, rng: &'a mut Rng },
    /// Reuse masks from an earlier pass.
    Fixed(&'a DropoutMasks),
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Overrides the initial state (otherwise learned or zero).
    pub initial: Option<Vec<CellState>>,
    pub dropout: DropoutPlan<'a>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub topology: Topology,
    pub mask: Vec<bool>,
    /// Raw per-step inputs actually fed (after topology substitution).
    pub inputs: Vec<Vector>,
    /// Input-projection outputs, when the network has one.
    pub projected: Option<Vec<Vector>>,
    /// `[layer][step]`
    pub layers: Vec<Vec<StepCache>>,
    pub heads: Vec<Option<HeadCache>>,
    pub outputs: Vec<Option<Vector>>,
    pub initial: Vec<CellState>,
    pub dropout: Option<DropoutMasks>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn outputs(&self) -> &[Option<Vector>] {
        &self.outputs
    }

    pub fn final_states(&self) -> Vec<CellState> {
        self.layers
            .iter()
            .map(|steps| steps.last().expect("non-empty trace").state())
            .collect()
    }

    pub fn loss(&self, sample: &SequenceSample) -> Result<Real> {
        total_loss(sample, &self.outputs, &self.mask)
    }

    /// Recomputes every step from its cached inputs and incoming state and
    /// returns the resulting outputs.
    pub fn replay(&self, params: &ParamSet) -> Result<Vec<Option<Vector>>> {
        let top = self.layers.len() - 1;
        let mut outputs = vec![None; self.len()];
        for t in 0..self.len() {
            let mut h_top = None;
            for (l, cell) in params.layers.iter().enumerate() {
                let cache = &self.layers[l][t];
                let (state, _) = cell.step(cache.input(), &incoming_state(cache))?;
                if l == top {
                    h_top = Some(state.h);
                }
            }
            if self.mask[t] {
                let mut h = h_top.expect("at least one layer");
                if let Some(m) = &self.dropout {
                    h = hadamard(&h, &m.head[t])?;
                }
                outputs[t] = Some(params.head.forward(&h)?.0);
            }
        }
        Ok(outputs)
    }
}

fn incoming_state(cache: &StepCache) -> CellState {
    match cache {
        StepCache::Rnn(c) => CellState {
            h: c.h_prev.clone(),
            c: None,
        },
        StepCache::Lstm(c) => CellState {
            h: c.h_prev.clone(),
            c: Some(c.c_prev.clone()),
        },
        StepCache::Gru(c) => CellState {
            h: c.h_prev.clone(),
            c: None,
        },
    }
}

pub fn initial_states(params: &ParamSet) -> Vec<CellState> {
    match &params.initial_state {
        Some(s) => s.clone(),
        None => params
            .layers
            .iter()
            .map(|c| CellState::zeros(c.arch(), c.hidden_dim()))
            .collect(),
    }
}

/// Runs the network over `sample` with default options: zero (or learned)
/// initial state and no dropout.
pub fn unroll_forward(params: &ParamSet, sample: &SequenceSample, topology: Topology) -> Result<ForwardTrace> {
    unroll_forward_with(params, sample, topology, ForwardOptions::default())
}

/// Forward pass through a stack of layers. Each layer's hidden sequence is
/// the next layer's input and only the top layer feeds the output head.
pub fn stack_forward(params: &ParamSet, sample: &SequenceSample, topology: Topology) -> Result<ForwardTrace> {
    unroll_forward(params, sample, topology)
}

pub fn unroll_forward_with(
    params: &ParamSet,
    sample: &SequenceSample,
    topology: Topology,
    opts: ForwardOptions<'_>,
) -> Result<ForwardTrace> {
    params.validate()?;
    sample.validate()?;
    let lay = &params.layout;
    let steps = sample.len();
    let mask = topology.mask(steps)?;
    if sample.inputs[0].len() != lay.input_dim {
        return Err(Error::shape(
            "unroll_forward",
            format!("input dim {}", lay.input_dim),
            sample.inputs[0].len(),
        ));
    }
    let feed_previous = topology.feed_previous && topology.kind == TopologyKind::OneToMany;
    if feed_previous && lay.output_dim != lay.input_dim {
        return Err(Error::InvalidArgument(
            "feeding previous outputs back requires output dim == input dim".into(),
        ));
    }

    let initial = match opts.initial {
        Some(s) => {
            let ok = s.len() == params.layers.len()
                && s.iter()
                    .zip(&params.layers)
                    .all(|(st, c)| st.h.len() == c.hidden_dim() && st.c.is_some() == c.arch().has_cell_state());
            if !ok {
                return Err(Error::InvalidArgument("initial state does not match layers".into()));
            }
            s
        }
        None => initial_states(params),
    };

    let mut plan = opts.dropout;
    if let DropoutPlan::Sample { keep_prob, .. } = &plan {
        check_keep_prob(*keep_prob)?;
    }
    if let DropoutPlan::Fixed(m) = &plan {
        if m.head.len() != steps || m.layer_inputs.len() != steps {
            return Err(Error::InvalidArgument("dropout masks do not cover the sequence".into()));
        }
    }
    let mut masks = match plan {
        DropoutPlan::Sample { .. } => Some(DropoutMasks {
            layer_inputs: Vec::with_capacity(steps),
            head: Vec::with_capacity(steps),
        }),
        DropoutPlan::Fixed(m) => Some(m.clone()),
        DropoutPlan::Off => None,
    };

    let nl = params.layers.len();
    let mut states = initial.clone();
    let mut inputs = Vec::with_capacity(steps);
    let mut projected = params.projection.as_ref().map(|_| Vec::with_capacity(steps));
    let mut layers: Vec<Vec<StepCache>> = (0..nl).map(|_| Vec::with_capacity(steps)).collect();
    let mut heads = Vec::with_capacity(steps);
    let mut outputs: Vec<Option<Vector>> = Vec::with_capacity(steps);

    for t in 0..steps {
        let x_raw = if topology.reads_input(t) {
            sample.inputs[t].clone()
        } else if feed_previous {
            let prev = outputs[t - 1].as_ref().expect("one-to-many emits every step");
            let mut v = Vector::zeros(lay.input_dim);
            v[prev.argmax().unwrap_or(0)] = 1.0;
            v
        } else {
            Vector::zeros(lay.input_dim)
        };
        let mut x = match (&params.projection, projected.as_mut()) {
            (Some(p), Some(store)) => {
                let y = p.forward(&x_raw)?;
                store.push(y.clone());
                y
            }
            _ => x_raw.clone(),
        };
        inputs.push(x_raw);

        if let DropoutPlan::Sample { keep_prob, rng } = &mut plan {
            let m = masks.as_mut().expect("allocated for sampling");
            let mut per_layer = Vec::with_capacity(nl);
            for cell in &params.layers {
                per_layer.push(dropout_mask(rng, cell.input_dim(), *keep_prob)?);
            }
            m.layer_inputs.push(per_layer);
            m.head.push(dropout_mask(rng, lay.hidden_dim, *keep_prob)?);
        }

        for (l, cell) in params.layers.iter().enumerate() {
            if let Some(m) = &masks {
                x = hadamard(&x, &m.layer_inputs[t][l])?;
            }
            let (next, cache) = cell.step(&x, &states[l])?;
            x = next.h.clone();
            states[l] = next;
            layers[l].push(cache);
        }

        if mask[t] {
            let h = match &masks {
                Some(m) => hadamard(&x, &m.head[t])?,
                None => x,
            };
            let (yhat, cache) = params.head.forward(&h)?;
            outputs.push(Some(yhat));
            heads.push(Some(cache));
        } else {
            outputs.push(None);
            heads.push(None);
        }
    }

    Ok(ForwardTrace {
        topology,
        mask,
        inputs,
        projected,
        layers,
        heads,
        outputs,
        initial,
        dropout: masks,
    })
}

/// Cross-entropy `−Σ y log ŷ` for one step, with `ŷ` floored at
/// [`LOG_EPS`].
pub fn step_loss(y: &[Real], yhat: &[Real]) -> Result<Real> {
    if y.len() != yhat.len() {
        return Err(Error::shape("step_loss", y.len(), yhat.len()));
    }
    let loss: Real = y
        .iter()
        .zip(yhat)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| -t * p.max(LOG_EPS).ln())
        .sum();
    Ok(loss)
}

/// Sum of [`step_loss`] over every step where `mask` is set. Targets at
/// unmasked steps are ignored.
pub fn total_loss(sample: &SequenceSample, outputs: &[Option<Vector>], mask: &[bool]) -> Result<Real> {
    if outputs.len() != mask.len() {
        return Err(Error::shape("total_loss", outputs.len(), mask.len()));
    }
    let mut total = 0.0;
    for (t, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let yhat = outputs[t].as_ref().ok_or(Error::MissingStep {
            what: "output",
            step: t,
        })?;
        let y = sample.target_at(t).ok_or(Error::MissingStep {
            what: "target",
            step: t,
        })?;
        total += step_loss(y, yhat)?;
    }
    Ok(total)
}

/// Step-at-a-time inference used for generation.
pub struct Predictor<'a> {
    params: &'a ParamSet,
    states: Vec<CellState>,
}

impl<'a> Predictor<'a> {
    pub fn new(params: &'a ParamSet) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            states: initial_states(params),
        })
    }

    /// Feeds one input and returns the prediction at this step.
    pub fn step(&mut self, x: &[Real]) -> Result<Vector> {
        let mut x = match &self.params.projection {
            Some(p) => p.forward(x)?,
            None => {
                crate::cells::check_len("predict", "x", x.len(), self.params.layout.input_dim)?;
                Vector::from_raw(x.to_vec())
            }
        };
        for (cell, state) in self.params.layers.iter().zip(self.states.iter_mut()) {
            let (next, _) = cell.step(&x, state)?;
            x = next.h.clone();
            *state = next;
        }
        Ok(self.params.head.forward(&x)?.0)
    }

    /// Prediction from the current top-layer state without advancing.
    pub fn current(&self) -> Result<Vector> {
        let h = &self.states.last().expect("at least one layer").h;
        Ok(self.params.head.forward(h)?.0)
    }

    pub fn states(&self) -> &[CellState] {
        &self.states
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::Arch;

    fn onehot(k: usize, n: usize) -> Vector {
        let mut v = Vector::zeros(n);
        v[k] = 1.0;
        v
    }

    #[test]
    fn step_loss_values() {
        assert_eq!(step_loss(&onehot(1, 3), &onehot(1, 3)).unwrap(), 0.0);
        let u = Vector::filled(4, 0.25);
        assert!((step_loss(&onehot(2, 4), &u).unwrap() - (4.0 as Real).ln()).abs() < 1e-15);
        let l = step_loss(&[0.0, 1.0], &[0.25, 0.75]).unwrap();
        // -ln 0.75 via mpmath
        assert!((l - 0.287_682_072_451_780_9).abs() < 1e-15);
        let clamped = step_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(clamped.is_finite());
        assert!((clamped - -(LOG_EPS.ln())).abs() < 1e-9);
    }

    #[test]
    fn total_loss_additivity_and_missing() {
        let sample = SequenceSample::new(
            vec![Vector::zeros(1); 2],
            vec![
                Target {
                    step: 0,
                    y: onehot(0, 2),
                },
                Target {
                    step: 1,
                    y: onehot(1, 2),
                },
            ],
        )
        .unwrap();
        let a = Vector::from_vec(vec![0.4, 0.6]).unwrap();
        let b = Vector::from_vec(vec![0.1, 0.9]).unwrap();
        let la = step_loss(&onehot(0, 2), &a).unwrap();
        let lb = step_loss(&onehot(1, 2), &b).unwrap();
        let outs = vec![Some(a.clone()), Some(b)];
        assert_eq!(total_loss(&sample, &outs, &[true, true]).unwrap(), la + lb);
        assert_eq!(total_loss(&sample, &outs, &[true, false]).unwrap(), la);
        let missing = vec![Some(a), None];
        assert!(matches!(
            total_loss(&sample, &missing, &[true, true]),
            Err(Error::MissingStep {
                what: "output",
                step: 1
            })
        ));
    }

    #[test]
    fn sample_validation() {
        assert!(matches!(SequenceSample::new(vec![], vec![]), Err(Error::EmptySequence)));
        let bad = SequenceSample::new(
            vec![Vector::zeros(2)],
            vec![Target {
                step: 1,
                y: onehot(0, 2),
            }],
        );
        assert!(bad.is_err());
        let not_onehot = SequenceSample::new(
            vec![Vector::zeros(2)],
            vec![Target {
                step: 0,
                y: Vector::filled(2, 0.5),
            }],
        );
        assert!(not_onehot.is_err());
    }

    #[test]
    fn forward_shape_errors() {
        let p = ParamSet::zeros(&ModelLayout::new(Arch::Rnn, 3, 2, 2)).unwrap();
        let sample = SequenceSample::new(
            vec![Vector::zeros(4)],
            vec![Target {
                step: 0,
                y: onehot(0, 2),
            }],
        )
        .unwrap();
        assert!(unroll_forward(&p, &sample, Topology::many_to_one()).is_err());
    }

    #[test]
    fn predictor_matches_unrolled_outputs() {
        let mut rng = Rng::new(3);
        let mut p = ParamSet::zeros(&ModelLayout::new(Arch::Gru, 2, 3, 2)).unwrap();
        let flat: Vec<Real> = (0..p.num_scalars()).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        p.copy_from_flat(&flat).unwrap();
        let inputs: Vec<Vector> = (0..4).map(|_| rng.uniform_vector(2, -1.0, 1.0)).collect();
        let targets = (0..4)
            .map(|t| Target {
                step: t,
                y: onehot(t % 2, 2),
            })
            .collect();
        let sample = SequenceSample::new(inputs.clone(), targets).unwrap();
        let trace = unroll_forward(&p, &sample, Topology::many_to_many()).unwrap();
        let mut pred = Predictor::new(&p).unwrap();
        for (t, x) in inputs.iter().enumerate() {
            assert_eq!(&pred.step(x).unwrap(), trace.outputs[t].as_ref().unwrap());
        }
    }
}
