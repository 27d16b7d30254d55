//! Finite-difference gradient checking and gradient-flow measurement.

mod dd;
mod reference;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cells::Arch;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real, Rng, Vector};
use crate::sequence::{
    bptt, truncated_bptt, unroll_forward_with, DropoutMasks, DropoutPlan, ForwardOptions, GradSet, ModelLayout,
    ParamSet, SequenceSample, Target, Topology, TopologyKind,
};
use crate::training::{dropout_mask, init_params, TrainConfig};

/// Anything that can be viewed as a flat vector of scalars.
pub trait Parameters: Clone {
    fn to_flat(&self) -> Vec<Real>;
    fn set_flat(&mut self, flat: &[Real]) -> Result<()>;
}

impl Parameters for ParamSet {
    fn to_flat(&self) -> Vec<Real> {
        self.flatten()
    }

    fn set_flat(&mut self, flat: &[Real]) -> Result<()> {
        self.copy_from_flat(flat)
    }
}

impl Parameters for Vec<Real> {
    fn to_flat(&self) -> Vec<Real> {
        self.clone()
    }

    fn set_flat(&mut self, flat: &[Real]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape("set_flat", self.len(), flat.len()));
        }
        self.copy_from_slice(flat);
        Ok(())
    }
}

/// Central differences `(L(θ+εe_i) − L(θ−εe_i)) / 2ε` for every scalar.
pub fn finite_diff_grad<P, F>(mut loss: F, params: &P, epsilon: Real) -> Result<P>
where
    P: Parameters,
    F: FnMut(&P) -> Result<Real>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let base = params.to_flat();
    let mut flat = base.clone();
    let mut probe = params.clone();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        flat[i] = base[i] + epsilon;
        probe.set_flat(&flat)?;
        let plus = loss(&probe)?;
        flat[i] = base[i] - epsilon;
        probe.set_flat(&flat)?;
        let minus = loss(&probe)?;
        flat[i] = base[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite-difference loss"));
        }
        grad[i] = (plus - minus) / (2.0 * epsilon);
    }
    let mut out = params.clone();
    out.set_flat(&grad)?;
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// How the numeric side of a gradient check evaluates the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Oracle {
    /// Independent forward pass in double-double arithmetic. Loss
    /// differences keep about 30 significant digits, so tiny gradient
    /// entries are not drowned in `f64` roundoff.
    #[default]
    Extended,
    /// The production `f64` forward pass. Its roundoff puts an absolute
    /// noise floor of roughly `1e-15 / 2ε` on every numeric entry.
    Native,
}

impl std::str::FromStr for Oracle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "extended" => Ok(Oracle::Extended),
            "native" => Ok(Oracle::Native),
            other => Err(Error::InvalidArgument(format!("unknown oracle '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub arch: Arch,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub steps: usize,
    pub topology: TopologyKind,
    pub seed: u64,
    pub tolerance: Real,
    pub epsilon: Real,
    pub layers: usize,
    pub layer_norm: bool,
    pub projection_dim: Option<usize>,
    pub trainable_initial_state: bool,
    /// When below one, a fixed set of dropout masks is drawn and used for
    /// both the analytic and numeric gradients.
    pub keep_prob: Real,
    /// Analytic side only; the numeric side is always the full gradient, so
    /// this agrees only when `k ≥ T`.
    pub truncation: Option<usize>,
    pub oracle: Oracle,
}

impl GradCheckConfig {
    pub fn new(arch: Arch, input_dim: usize, hidden_dim: usize, output_dim: usize, steps: usize) -> Self {
        Self {
            arch,
            input_dim,
            hidden_dim,
            output_dim,
            steps,
            topology: TopologyKind::ManyToMany,
            seed: 0,
            tolerance: 1e-6,
            epsilon: 1e-5,
            layers: 1,
            layer_norm: false,
            projection_dim: None,
            trainable_initial_state: false,
            keep_prob: 1.0,
            truncation: None,
            oracle: Oracle::Extended,
        }
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout {
            layers: self.layers,
            projection_dim: self.projection_dim,
            layer_norm: self.layer_norm,
            trainable_initial_state: self.trainable_initial_state,
            ..ModelLayout::new(self.arch, self.input_dim, self.hidden_dim, self.output_dim)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub name: String,
    pub max_rel_error: Real,
    /// Offset of the worst entry inside the tensor.
    pub worst_index: usize,
    pub analytic: Real,
    pub numeric: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: Option<GradCheckConfig>,
    pub tolerance: Real,
    pub tensors: Vec<TensorError>,
    pub max_rel_error: Real,
    pub passed: bool,
}

impl GradCheckReport {
    /// Tensor holding the largest error.
    pub fn worst(&self) -> Option<&TensorError> {
        self.tensors
            .iter()
            .fold(None, |best: Option<&TensorError>, t| match best {
                Some(b) if b.max_rel_error >= t.max_rel_error => Some(b),
                _ => Some(t),
            })
    }

    pub fn failing(&self) -> impl Iterator<Item = &TensorError> {
        self.tensors.iter().filter(move |t| t.max_rel_error >= self.tolerance)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("param_name,rel_error\n");
        for t in &self.tensors {
            let _ = writeln!(s, "{},{:e}", t.name, t.max_rel_error);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        if let Some(c) = &self.config {
            let _ = writeln!(
                s,
                "arch={} dims=({},{},{}) T={} topology={} seed={}",
                c.arch, c.input_dim, c.hidden_dim, c.output_dim, c.steps, c.topology, c.seed
            );
        }
        for t in &self.tensors {
            let _ = writeln!(s, "  {:<28} {:.3e}", t.name, t.max_rel_error);
        }
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let _ = write!(
            s,
            "max relative error {:.3e} (tolerance {:.1e}): {verdict}",
            self.max_rel_error, self.tolerance
        );
        if let (false, Some(w)) = (self.passed, self.worst()) {
            let _ = write!(
                s,
                "\nworst: {}[{}] analytic {:e} numeric {:e}",
                w.name, w.worst_index, w.analytic, w.numeric
            );
        }
        s
    }
}

/// Entrywise comparison of two gradient sets with the same structure.
pub fn compare_gradients(analytic: &GradSet, numeric: &GradSet, tolerance: Real) -> Result<GradCheckReport> {
    let a = analytic.tensors();
    let n = numeric.tensors();
    if a.len() != n.len()
        || a.iter()
            .zip(&n)
            .any(|(x, y)| x.name != y.name || x.data.len() != y.data.len())
    {
        return Err(Error::shape(
            "compare_gradients",
            analytic.num_scalars(),
            numeric.num_scalars(),
        ));
    }
    let mut tensors = Vec::with_capacity(a.len());
    let mut max_rel_error: Real = 0.0;
    for (ta, tn) in a.iter().zip(&n) {
        let mut worst = TensorError {
            name: ta.name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: ta.data.first().copied().unwrap_or(0.0),
            numeric: tn.data.first().copied().unwrap_or(0.0),
        };
        for (i, (&x, &y)) in ta.data.iter().zip(tn.data).enumerate() {
            let e = relative_error(x, y);
            // NaN compares false, so force it to register as a failure
            if e > worst.max_rel_error || e.is_nan() {
                worst = TensorError {
                    max_rel_error: if e.is_nan() { Real::INFINITY } else { e },
                    worst_index: i,
                    analytic: x,
                    numeric: y,
                    ..worst
                };
            }
        }
        max_rel_error = max_rel_error.max(worst.max_rel_error);
        tensors.push(worst);
    }
    Ok(GradCheckReport {
        config: None,
        tolerance,
        tensors,
        max_rel_error,
        passed: max_rel_error < tolerance,
    })
}

/// Random parameters for checking: every scalar, biases included, is drawn
/// so no term of the analytic gradient hides behind a zero.
pub fn random_params(layout: &ModelLayout, rng: &mut Rng, scale: Real) -> Result<ParamSet> {
    let mut p = ParamSet::zeros(layout)?;
    for t in p.tensors_mut() {
        let center = if t.name.ends_with("norm_gain") { 1.0 } else { 0.0 };
        for v in t.data.iter_mut() {
            *v = center + rng.uniform_range(-scale, scale);
        }
    }
    Ok(p)
}

/// Random sample with uniform inputs in `[-1, 1]` and random one-hot targets
/// at every step the topology scores.
pub fn random_sample(
    rng: &mut Rng,
    input_dim: usize,
    output_dim: usize,
    steps: usize,
    topology: Topology,
) -> Result<SequenceSample> {
    let mask = topology.mask(steps)?;
    let inputs = (0..steps).map(|_| rng.uniform_vector(input_dim, -1.0, 1.0)).collect();
    let targets = mask
        .iter()
        .enumerate()
        .filter(|(_, on)| **on)
        .map(|(t, _)| {
            let mut y = Vector::zeros(output_dim);
            y[rng.below(output_dim)] = 1.0;
            Target { step: t, y }
        })
        .collect();
    SequenceSample::new(inputs, targets)
}

fn random_masks(rng: &mut Rng, params: &ParamSet, steps: usize, keep_prob: Real) -> Result<DropoutMasks> {
    let mut layer_inputs = Vec::with_capacity(steps);
    let mut head = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut per = Vec::with_capacity(params.layers.len());
        for cell in &params.layers {
            per.push(dropout_mask(rng, cell.input_dim(), keep_prob)?);
        }
        layer_inputs.push(per);
        head.push(dropout_mask(rng, params.layout.hidden_dim, keep_prob)?);
    }
    Ok(DropoutMasks { layer_inputs, head })
}

/// Builds a random network and sample from `config.seed`, then compares the
/// analytic backward pass against central differences.
pub fn grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    if config.steps == 0 {
        return Err(Error::EmptySequence);
    }
    let layout = config.layout();
    let mut rng = Rng::new(config.seed);
    let params = random_params(&layout, &mut rng, 0.5)?;
    let topology = Topology::new(config.topology);
    let sample = random_sample(&mut rng, config.input_dim, config.output_dim, config.steps, topology)?;
    let masks = if config.keep_prob < 1.0 {
        Some(random_masks(&mut rng, &params, config.steps, config.keep_prob)?)
    } else {
        None
    };
    let plan = || match &masks {
        Some(m) => DropoutPlan::Fixed(m),
        None => DropoutPlan::Off,
    };
    let forward = |p: &ParamSet| {
        unroll_forward_with(
            p,
            &sample,
            topology,
            ForwardOptions {
                initial: None,
                dropout: plan(),
            },
        )
    };

    let trace = forward(&params)?;
    let analytic = match config.truncation {
        Some(k) => truncated_bptt(&params, &trace, &sample, k)?.grads,
        None => bptt(&params, &trace, &sample)?.grads,
    };
    let numeric = match config.oracle {
        Oracle::Native => finite_diff_grad(|p: &ParamSet| forward(p)?.loss(&sample), &params, config.epsilon)?,
        Oracle::Extended => reference::Reference::new(&params).finite_diff(
            &params,
            &sample,
            topology,
            masks.as_ref(),
            config.epsilon,
        )?,
    };
    let mut report = compare_gradients(&analytic, &numeric, config.tolerance)?;
    report.config = Some(config.clone());
    Ok(report)
}

/// Per-step gradient norms of a loss placed on the final step only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub arch: Arch,
    /// `‖∂L/∂h_t‖₂` of the top layer, `t = 0..T`.
    pub norms: Vec<Real>,
    /// `‖∂L/∂c_t‖₂` for LSTM.
    pub cell_norms: Option<Vec<Real>>,
    /// Free-form description of the configuration that produced the trace.
    pub config: String,
}

impl FlowTrace {
    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// `‖∂L/∂h_0‖ / ‖∂L/∂h_{T−1}‖`.
    pub fn decay_ratio(&self) -> Real {
        match (self.norms.first(), self.norms.last()) {
            (Some(first), Some(last)) if *last > 0.0 => first / last,
            _ => 0.0,
        }
    }

    /// Columns `t,grad_norm`, plus `cell_grad_norm` for LSTM.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,grad_norm");
        if self.cell_norms.is_some() {
            s.push_str(",cell_grad_norm");
        }
        s.push('\n');
        for (t, n) in self.norms.iter().enumerate() {
            let _ = write!(s, "{t},{n:e}");
            if let Some(c) = &self.cell_norms {
                let _ = write!(s, ",{:e}", c[t]);
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv())
    }
}

/// Runs full BPTT on a many-to-one sample and reports how the gradient
/// norm changes as it travels back from the final step.
pub fn gradient_flow(params: &ParamSet, sample: &SequenceSample) -> Result<FlowTrace> {
    let steps = sample.len();
    if sample.targets.len() != 1 || sample.targets[0].step + 1 != steps {
        return Err(Error::InvalidArgument(
            "gradient flow needs exactly one target, at the final step".into(),
        ));
    }
    let topology = Topology::many_to_one();
    let trace = unroll_forward_with(params, sample, topology, ForwardOptions::default())?;
    let back = bptt(params, &trace, sample)?;
    let l = &params.layout;
    Ok(FlowTrace {
        arch: params.arch(),
        norms: back.hidden_grad_norms,
        cell_norms: back.cell_grad_norms,
        config: format!(
            "arch={} input={} hidden={} output={} layers={} T={steps}",
            l.arch, l.input_dim, l.hidden_dim, l.output_dim, l.layers
        ),
    })
}

/// Initialises a network from `config` (seeded), draws a many-to-one sample
/// of `steps` uniform inputs with one target at the end, and traces the
/// gradient back through it. `zero_recurrent` clears every recurrent matrix
/// after initialisation.
pub fn trace_initial_flow(
    layout: &ModelLayout,
    config: &TrainConfig,
    steps: usize,
    zero_recurrent: bool,
) -> Result<FlowTrace> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let mut params = init_params(layout, config, &mut rng)?;
    if zero_recurrent {
        for w in params.recurrent_matrices_mut() {
            w.scale(0.0);
        }
    }
    let sample = random_sample(
        &mut rng,
        layout.input_dim,
        layout.output_dim,
        steps,
        Topology::many_to_one(),
    )?;
    let mut trace = gradient_flow(&params, &sample)?;
    trace.config = format!("{} seed={}", trace.config, config.seed);
    Ok(trace)
}

/// Power-iteration estimate of the largest singular value of `w`, started
/// from the normalized all-ones vector.
pub fn recurrent_spectral_radius(w: &Matrix, iterations: usize) -> Result<Real> {
    if w.rows() != w.cols() {
        return Err(Error::shape("recurrent_spectral_radius", w.rows(), w.cols()));
    }
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    let n = w.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut v = Vector::filled(n, 1.0 / (n as Real).sqrt());
    for _ in 0..iterations {
        let u = w.matvec(&v)?;
        let z = w.transpose_matvec(&u)?;
        let norm = z.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = z.map(|x| x / norm);
    }
    Ok(w.matvec(&v)?.norm())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}
