//! A second, independent forward pass evaluated in double-double precision.
//! It shares no code with the production forward pass; it reads every
//! tensor out of one flat vector laid out like [`ParamSet::tensors`].

use super::dd::Dd;
use crate::cells::{Arch, OutputActivation};
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::sequence::{DropoutMasks, GradSet, ParamSet, SequenceSample, Topology, TopologyKind, LOG_EPS};
use crate::training::norm::LAYER_NORM_EPS;

#[derive(Clone, Copy)]
struct Mat {
    off: usize,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Copy)]
struct Span {
    off: usize,
    len: usize,
}

struct RefGate {
    w_in: Mat,
    w_rec: Mat,
    b: Span,
    norm: Option<(Span, Span)>,
}

struct RefLayer {
    arch: Arch,
    gates: Vec<RefGate>,
    hidden: usize,
}

pub(crate) struct Reference {
    base: Vec<Dd>,
    input_dim: usize,
    output_dim: usize,
    projection: Option<(Mat, Span)>,
    layers: Vec<RefLayer>,
    head: (Mat, Span),
    activation: OutputActivation,
    initial: Option<Vec<(Span, Option<Span>)>>,
}

struct Cursor(usize);

impl Cursor {
    fn mat(&mut self, rows: usize, cols: usize) -> Mat {
        let m = Mat {
            off: self.0,
            rows,
            cols,
        };
        self.0 += rows * cols;
        m
    }

    fn span(&mut self, len: usize) -> Span {
        let s = Span { off: self.0, len };
        self.0 += len;
        s
    }
}

fn affine_add(theta: &[Dd], m: Mat, x: &[Dd], out: &mut [Dd]) {
    for (r, o) in out.iter_mut().enumerate().take(m.rows) {
        let row = &theta[m.off + r * m.cols..m.off + (r + 1) * m.cols];
        let mut acc = *o;
        for (w, v) in row.iter().zip(x) {
            acc = acc + *w * *v;
        }
        *o = acc;
    }
}

fn read(theta: &[Dd], s: Span) -> Vec<Dd> {
    theta[s.off..s.off + s.len].to_vec()
}

fn layer_norm(theta: &[Dd], z: &mut [Dd], gain: Span, shift: Span) {
    let n = Dd::from(z.len() as f64);
    let mean = z.iter().fold(Dd::ZERO, |a, v| a + *v) / n;
    let var = z.iter().fold(Dd::ZERO, |a, v| a + (*v - mean) * (*v - mean)) / n;
    let inv = Dd::ONE / (var + Dd::from(LAYER_NORM_EPS as f64)).sqrt();
    for (k, v) in z.iter_mut().enumerate() {
        *v = (*v - mean) * inv * theta[gain.off + k] + theta[shift.off + k];
    }
}

fn finish(theta: &[Dd], gate: &RefGate, mut pre: Vec<Dd>, tanh: bool) -> Vec<Dd> {
    if let Some((g, s)) = gate.norm {
        layer_norm(theta, &mut pre, g, s);
    }
    pre.into_iter()
        .map(|v| if tanh { v.tanh() } else { v.sigmoid() })
        .collect()
}

fn gate_forward(theta: &[Dd], gate: &RefGate, x: &[Dd], h: &[Dd], tanh: bool) -> Vec<Dd> {
    let mut pre = read(theta, gate.b);
    affine_add(theta, gate.w_in, x, &mut pre);
    affine_add(theta, gate.w_rec, h, &mut pre);
    finish(theta, gate, pre, tanh)
}

impl Reference {
    pub(crate) fn new(params: &ParamSet) -> Self {
        let mut cur = Cursor(0);
        let projection = params
            .projection
            .as_ref()
            .map(|p| (cur.mat(p.w.rows(), p.w.cols()), cur.span(p.b.len())));
        let layers = params
            .layers
            .iter()
            .map(|cell| {
                let gates = cell
                    .gates()
                    .into_iter()
                    .map(|(_, g)| RefGate {
                        w_in: cur.mat(g.w_in.rows(), g.w_in.cols()),
                        w_rec: cur.mat(g.w_rec.rows(), g.w_rec.cols()),
                        b: cur.span(g.b.len()),
                        norm: g
                            .norm
                            .as_ref()
                            .map(|ln| (cur.span(ln.gain.len()), cur.span(ln.shift.len()))),
                    })
                    .collect();
                RefLayer {
                    arch: cell.arch(),
                    gates,
                    hidden: cell.hidden_dim(),
                }
            })
            .collect();
        let head = (
            cur.mat(params.head.w.rows(), params.head.w.cols()),
            cur.span(params.head.b.len()),
        );
        let initial = params.initial_state.as_ref().map(|states| {
            states
                .iter()
                .map(|s| (cur.span(s.h.len()), s.c.as_ref().map(|c| cur.span(c.len()))))
                .collect()
        });
        let base: Vec<Dd> = params.flatten().into_iter().map(|v| Dd::from(v as f64)).collect();
        assert_eq!(cur.0, base.len(), "reference layout out of sync with ParamSet::tensors");
        Self {
            base,
            input_dim: params.layout.input_dim,
            output_dim: params.layout.output_dim,
            projection,
            layers,
            head,
            activation: params.head.activation,
            initial,
        }
    }

    fn step(&self, theta: &[Dd], layer: &RefLayer, x: &[Dd], h: &[Dd], c: Option<&[Dd]>) -> (Vec<Dd>, Option<Vec<Dd>>) {
        let n = layer.hidden;
        let g = &layer.gates;
        match layer.arch {
            Arch::Rnn => (gate_forward(theta, &g[0], x, h, true), None),
            Arch::Lstm => {
                let f = gate_forward(theta, &g[0], x, h, false);
                let i = gate_forward(theta, &g[1], x, h, false);
                let cand = gate_forward(theta, &g[2], x, h, true);
                let o = gate_forward(theta, &g[3], x, h, false);
                let c_prev = c.expect("lstm carries a cell state");
                let c_new: Vec<Dd> = (0..n).map(|k| f[k] * c_prev[k] + i[k] * cand[k]).collect();
                let h_new = (0..n).map(|k| o[k] * c_new[k].tanh()).collect();
                (h_new, Some(c_new))
            }
            Arch::Gru => {
                let z = gate_forward(theta, &g[0], x, h, false);
                let r = gate_forward(theta, &g[1], x, h, false);
                let mut rec = vec![Dd::ZERO; n];
                affine_add(theta, g[2].w_rec, h, &mut rec);
                let mut pre = read(theta, g[2].b);
                affine_add(theta, g[2].w_in, x, &mut pre);
                for k in 0..n {
                    pre[k] = pre[k] + r[k] * rec[k];
                }
                let cand = finish(theta, &g[2], pre, true);
                let h_new = (0..n).map(|k| z[k] * h[k] + (Dd::ONE - z[k]) * cand[k]).collect();
                (h_new, None)
            }
        }
    }

    /// Summed cross-entropy over the scored steps.
    pub(crate) fn loss(
        &self,
        theta: &[Dd],
        sample: &SequenceSample,
        topology: Topology,
        masks: Option<&DropoutMasks>,
    ) -> Result<Dd> {
        let steps = sample.len();
        let scored = topology.mask(steps)?;
        let feed_previous = topology.feed_previous && topology.kind == TopologyKind::OneToMany;
        let mut states: Vec<(Vec<Dd>, Option<Vec<Dd>>)> = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| match &self.initial {
                Some(init) => (read(theta, init[l].0), init[l].1.map(|s| read(theta, s))),
                None => (
                    vec![Dd::ZERO; layer.hidden],
                    (layer.arch == Arch::Lstm).then(|| vec![Dd::ZERO; layer.hidden]),
                ),
            })
            .collect();
        let mut prev_out: Option<Vec<Dd>> = None;
        let mut total = Dd::ZERO;
        for t in 0..steps {
            let raw: Vec<Dd> = if topology.reads_input(t) {
                sample.inputs[t].iter().map(|v| Dd::from(*v as f64)).collect()
            } else if feed_previous {
                let p = prev_out.as_ref().ok_or(Error::MissingStep {
                    what: "output",
                    step: t - 1,
                })?;
                let mut best = 0;
                for k in 1..p.len() {
                    if p[k] > p[best] {
                        best = k;
                    }
                }
                let mut v = vec![Dd::ZERO; self.input_dim];
                v[best] = Dd::ONE;
                v
            } else {
                vec![Dd::ZERO; self.input_dim]
            };
            let mut x = match self.projection {
                Some((w, b)) => {
                    let mut pre = read(theta, b);
                    affine_add(theta, w, &raw, &mut pre);
                    pre.into_iter().map(Dd::tanh).collect()
                }
                None => raw,
            };
            for (l, layer) in self.layers.iter().enumerate() {
                if let Some(m) = masks {
                    for (v, k) in x.iter_mut().zip(m.layer_inputs[t][l].iter()) {
                        *v = *v * Dd::from(*k as f64);
                    }
                }
                let (h, c) = &states[l];
                let next = self.step(theta, layer, &x, h, c.as_deref());
                x = next.0.clone();
                states[l] = next;
            }
            if !scored[t] {
                prev_out = None;
                continue;
            }
            if let Some(m) = masks {
                for (v, k) in x.iter_mut().zip(m.head[t].iter()) {
                    *v = *v * Dd::from(*k as f64);
                }
            }
            let (w, b) = self.head;
            let mut z = read(theta, b);
            affine_add(theta, w, &x, &mut z);
            let yhat: Vec<Dd> = match self.activation {
                OutputActivation::Softmax => {
                    let m = z.iter().copied().fold(z[0], Dd::max);
                    let e: Vec<Dd> = z.iter().map(|v| (*v - m).exp()).collect();
                    let s = e.iter().fold(Dd::ZERO, |a, v| a + *v);
                    e.into_iter().map(|v| v / s).collect()
                }
                OutputActivation::Sigmoid => z.into_iter().map(Dd::sigmoid).collect(),
            };
            let y = sample.target_at(t).ok_or(Error::MissingStep {
                what: "target",
                step: t,
            })?;
            if y.len() != self.output_dim {
                return Err(Error::shape("reference loss", self.output_dim, y.len()));
            }
            let floor = Dd::from(LOG_EPS as f64);
            for (yk, pk) in y.iter().zip(&yhat) {
                if *yk != 0.0 {
                    total = total - Dd::from(*yk as f64) * pk.max(floor).ln();
                }
            }
            prev_out = Some(yhat);
        }
        Ok(total)
    }

    /// Central differences with the loss and the perturbation both carried in
    /// double-double precision.
    pub(crate) fn finite_diff(
        &self,
        params: &ParamSet,
        sample: &SequenceSample,
        topology: Topology,
        masks: Option<&DropoutMasks>,
        epsilon: Real,
    ) -> Result<GradSet> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        let eps = Dd::from(epsilon as f64);
        let two_eps = Dd::from(2.0 * epsilon as f64);
        let mut theta = self.base.clone();
        let mut grad = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let b = theta[i];
            theta[i] = b + eps;
            let plus = self.loss(&theta, sample, topology, masks)?;
            theta[i] = b - eps;
            let minus = self.loss(&theta, sample, topology, masks)?;
            theta[i] = b;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("finite-difference loss"));
            }
            grad.push(((plus - minus) / two_eps).to_f64() as Real);
        }
        let mut out = params.zeros_like();
        out.copy_from_flat(&grad)?;
        Ok(out)
    }

    #[cfg(test)]
    pub(crate) fn base_loss(
        &self,
        sample: &SequenceSample,
        topology: Topology,
        masks: Option<&DropoutMasks>,
    ) -> Result<Dd> {
        self.loss(&self.base, sample, topology, masks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{random_params, random_sample};
    use crate::linalg::Rng;
    use crate::sequence::{unroll_forward, ModelLayout};

    #[test]
    fn agrees_with_production_forward() {
        for arch in Arch::ALL {
            for (ln, proj, layers, init) in [(false, None, 1, false), (true, Some(3), 2, true)] {
                let layout = ModelLayout {
                    layer_norm: ln,
                    projection_dim: proj,
                    layers,
                    trainable_initial_state: init,
                    ..ModelLayout::new(arch, 2, 4, 3)
                };
                let mut rng = Rng::new(3);
                let p = random_params(&layout, &mut rng, 0.5).unwrap();
                for topo in [
                    Topology::many_to_many(),
                    Topology::many_to_one(),
                    Topology::one_to_many(),
                ] {
                    let s = random_sample(&mut rng, 2, 3, 6, topo).unwrap();
                    let want = unroll_forward(&p, &s, topo).unwrap().loss(&s).unwrap();
                    let got = Reference::new(&p).base_loss(&s, topo, None).unwrap().to_f64();
                    assert!(
                        (got - want as f64).abs() < 1e-12 * want.abs() as f64,
                        "{arch} {got} {want}"
                    );
                }
            }
        }
    }
}
