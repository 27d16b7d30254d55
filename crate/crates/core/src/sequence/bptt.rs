use crate::cells::{Cell, CellState, StepCache};
use crate::error::{Error, Result};
use crate::linalg::{hadamard, Real, Vector};

use super::{ForwardTrace, GradSet, ParamSet, SequenceSample};

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Backward {
    pub grads: GradSet,
    /// `‖∂L/∂h_t‖` of the top layer for every step.
    pub hidden_grad_norms: Vec<Real>,
    /// `‖∂L/∂c_t‖` of the top layer (LSTM only), including the path
    /// through `h_t`.
    pub cell_grad_norms: Option<Vec<Real>>,
    /// Gradient with respect to each raw input `x_t`.
    pub input_grads: Vec<Vector>,
}

/// Full backpropagation through time. Contributions are accumulated from
/// the last step to the first.
pub fn bptt(params: &ParamSet, trace: &ForwardTrace, sample: &SequenceSample) -> Result<Backward> {
    backward(params, trace, sample, None)
}

/// Backpropagation through time where the gradient originating at each
/// loss-bearing step travels back through at most `k` steps (the step itself
/// included). The forward pass is untouched.
pub fn truncated_bptt(params: &ParamSet, trace: &ForwardTrace, sample: &SequenceSample, k: usize) -> Result<Backward> {
    if k < 1 {
        return Err(Error::InvalidArgument("truncation length must be at least 1".into()));
    }
    backward(params, trace, sample, Some(k))
}

/// Same recursion as [`bptt`] / [`truncated_bptt`] but every timestep's
/// parameter contribution lands in its own buffer; `result[t]` holds what
/// step `t` adds to the shared parameters.
pub fn per_step_contributions(
    params: &ParamSet,
    trace: &ForwardTrace,
    sample: &SequenceSample,
    truncation: Option<usize>,
) -> Result<Vec<GradSet>> {
    if truncation == Some(0) {
        return Err(Error::InvalidArgument("truncation length must be at least 1".into()));
    }
    let zero = params.zeros_like();
    let mut sinks = vec![zero; trace.len()];
    run(params, trace, sample, truncation, &mut Sink::PerStep(&mut sinks))?;
    Ok(sinks)
}

fn backward(
    params: &ParamSet,
    trace: &ForwardTrace,
    sample: &SequenceSample,
    truncation: Option<usize>,
) -> Result<Backward> {
    let mut grads = params.zeros_like();
    let out = run(params, trace, sample, truncation, &mut Sink::Single(&mut grads))?;
    Ok(Backward {
        grads,
        hidden_grad_norms: out.hidden_norms,
        cell_grad_norms: out.cell_norms,
        input_grads: out.input_grads,
    })
}

enum Sink<'a> {
    Single(&'a mut GradSet),
    PerStep(&'a mut [GradSet]),
}

impl Sink<'_> {
    fn at(&mut self, t: usize) -> &mut GradSet {
        match self {
            Sink::Single(g) => g,
            Sink::PerStep(v) => &mut v[t],
        }
    }
}

struct RunOutput {
    hidden_norms: Vec<Real>,
    cell_norms: Option<Vec<Real>>,
    input_grads: Vec<Vector>,
}

fn check_trace(params: &ParamSet, trace: &ForwardTrace) -> Result<()> {
    let steps = trace.len();
    let consistent = trace.layers.len() == params.layers.len()
        && trace.mask.len() == steps
        && trace.heads.len() == steps
        && trace
            .layers
            .iter()
            .zip(&params.layers)
            .all(|(caches, cell)| caches.len() == steps && caches.iter().all(|c| c.arch() == cell.arch()));
    if consistent {
        Ok(())
    } else {
        Err(Error::CacheMismatch(
            "trace was not produced by these parameters".into(),
        ))
    }
}

fn run(
    params: &ParamSet,
    trace: &ForwardTrace,
    sample: &SequenceSample,
    truncation: Option<usize>,
    sink: &mut Sink<'_>,
) -> Result<RunOutput> {
    check_trace(params, trace)?;
    let steps = trace.len();
    let nl = params.layers.len();

    // loss → logits → top hidden state
    let mut injections: Vec<Option<Vector>> = vec![None; steps];
    for t in (0..steps).rev() {
        if !trace.mask[t] {
            continue;
        }
        let cache = trace.heads[t].as_ref().ok_or(Error::MissingStep {
            what: "output",
            step: t,
        })?;
        let y = sample.target_at(t).ok_or(Error::MissingStep {
            what: "target",
            step: t,
        })?;
        let dlogits = params.head.logit_grad(&cache.yhat, y)?;
        let mut dh = params.head.backward(cache, &dlogits, Some(&mut sink.at(t).head));
        if let Some(m) = &trace.dropout {
            dh = hadamard(&dh, &m.head[t])?;
        }
        injections[t] = Some(dh);
    }

    let mut hidden_norms = vec![0.0; steps];
    let mut cell_norms = None;
    let mut input_grads = Vec::new();
    for l in (0..nl).rev() {
        let layer = layer_backward(&params.layers[l], &trace.layers[l], &injections, truncation, sink, l)?;
        if l == nl - 1 {
            hidden_norms = layer.hidden_norms;
            cell_norms = layer.cell_norms;
        }
        if let Some(d0) = layer.initial_grad {
            if let Some(init) = sink.at(0).initial_state.as_mut() {
                init[l].add_assign(&d0);
            }
        }
        let mut dx = layer.dx;
        if let Some(m) = &trace.dropout {
            for (t, d) in dx.iter_mut().enumerate() {
                *d = hadamard(d, &m.layer_inputs[t][l])?;
            }
        }
        if l > 0 {
            injections = dx.into_iter().map(Some).collect();
        } else {
            input_grads = match (&params.projection, &trace.projected) {
                (Some(p), Some(projected)) => {
                    // last to first, like every other accumulation
                    let mut out = Vec::with_capacity(steps);
                    for t in (0..steps).rev() {
                        let g = sink.at(t).projection.as_mut();
                        out.push(p.backward(&trace.inputs[t], &projected[t], &dx[t], g));
                    }
                    out.reverse();
                    out
                }
                _ => dx,
            };
        }
    }
    Ok(RunOutput {
        hidden_norms,
        cell_norms,
        input_grads,
    })
}

struct LayerBackward {
    dx: Vec<Vector>,
    hidden_norms: Vec<Real>,
    cell_norms: Option<Vec<Real>>,
    initial_grad: Option<CellState>,
}

/// State gradients that share the step at which they stop propagating.
struct Chain {
    /// Earliest step this chain still reaches; `0` for chains that run all
    /// the way back (and into the initial state).
    reach: usize,
    d: CellState,
}

fn layer_backward(
    cell: &Cell,
    caches: &[StepCache],
    injections: &[Option<Vector>],
    truncation: Option<usize>,
    sink: &mut Sink<'_>,
    layer: usize,
) -> Result<LayerBackward> {
    let steps = caches.len();
    let n = cell.hidden_dim();
    let has_c = cell.arch().has_cell_state();
    let mut dx = vec![Vector::zeros(cell.input_dim()); steps];
    let mut hidden_norms = vec![0.0; steps];
    let mut cell_norms = has_c.then(|| vec![0.0; steps]);
    let mut chains: Vec<Chain> = Vec::new();
    let mut initial_grad = None;

    for t in (0..steps).rev() {
        if let Some(inj) = &injections[t] {
            let reach = truncation.map_or(0, |k| (t + 1).saturating_sub(k));
            match chains.iter_mut().find(|c| c.reach == reach) {
                Some(c) => crate::linalg::add_into(&mut c.d.h, inj),
                None => chains.push(Chain {
                    reach,
                    d: CellState {
                        h: inj.clone(),
                        c: has_c.then(|| Vector::zeros(n)),
                    },
                }),
            }
        }
        if chains.is_empty() {
            continue;
        }

        let mut total = chains[0].d.clone();
        for c in &chains[1..] {
            total.add_assign(&c.d);
        }
        hidden_norms[t] = total.h.norm();
        if let (Some(norms), Some(dc)) = (cell_norms.as_mut(), caches[t].cell_state_grad(&total)) {
            norms[t] = dc.norm();
        }

        let grads = &mut sink.at(t).layers[layer];
        let (dprev, dxt) = cell.step_backward(&caches[t], &total, Some(grads))?;
        dx[t] = dxt;

        // chains ending at this step are dropped; the one reaching step 0
        // also feeds the initial state
        let before = chains.len();
        chains.retain(|c| c.reach < t || c.reach == 0);
        if chains.len() == 1 && before == 1 {
            chains[0].d = dprev;
        } else {
            for c in chains.iter_mut() {
                c.d = cell.step_backward(&caches[t], &c.d, None)?.0;
            }
        }
        if t == 0 {
            initial_grad = chains.pop().map(|c| c.d);
        }
    }

    Ok(LayerBackward {
        dx,
        hidden_norms,
        cell_norms,
        initial_grad,
    })
}
