#![allow(dead_code)]

use seqgrad::cells::{Arch, Cell, CellState};
use seqgrad::diagnostics::{random_params, random_sample};
use seqgrad::linalg::{Real, Rng};
use seqgrad::sequence::{ModelLayout, ParamSet, SequenceSample, Topology, TopologyKind};

pub struct Instance {
    pub params: ParamSet,
    pub sample: SequenceSample,
    pub topology: Topology,
}

/// Random network and sample: any architecture and topology, up to two
/// layers, optional layer norm, projection and learned initial state.
pub fn random_instance(rng: &mut Rng) -> Instance {
    let arch = Arch::ALL[rng.below(3)];
    let kind = [
        TopologyKind::OneToOne,
        TopologyKind::OneToMany,
        TopologyKind::ManyToOne,
        TopologyKind::ManyToMany,
    ][rng.below(4)];
    let steps = if kind == TopologyKind::OneToOne {
        1
    } else {
        1 + rng.below(10)
    };
    let layout = ModelLayout {
        layers: 1 + rng.below(2),
        layer_norm: rng.below(2) == 1,
        projection_dim: (rng.below(3) == 0).then(|| 1 + rng.below(3)),
        trainable_initial_state: rng.below(2) == 1,
        ..ModelLayout::new(arch, 1 + rng.below(4), 1 + rng.below(5), 2 + rng.below(3))
    };
    let params = random_params(&layout, rng, 0.7).unwrap();
    let topology = Topology::new(kind);
    let sample = random_sample(rng, layout.input_dim, layout.output_dim, steps, topology).unwrap();
    Instance {
        params,
        sample,
        topology,
    }
}

pub const SATURATE: Real = 50.0;

/// LSTM whose forget gate is pinned open and input gate pinned shut by
/// large biases, with every recurrent matrix zero. The candidate and output
/// gates keep random input weights.
pub fn carousel_lstm(rng: &mut Rng, input_dim: usize, hidden_dim: usize) -> ParamSet {
    let layout = ModelLayout::new(Arch::Lstm, input_dim, hidden_dim, 2);
    let mut p = random_params(&layout, rng, 0.5).unwrap();
    for w in p.recurrent_matrices_mut() {
        w.scale(0.0);
    }
    let Cell::Lstm(l) = &mut p.layers[0] else {
        unreachable!()
    };
    l.forget.w_in.scale(0.0);
    l.input.w_in.scale(0.0);
    l.forget.b.as_mut_slice().fill(SATURATE);
    l.input.b.as_mut_slice().fill(-SATURATE);
    p
}

pub fn random_lstm_state(rng: &mut Rng, n: usize) -> CellState {
    CellState {
        h: rng.uniform_vector(n, -1.0, 1.0),
        c: Some(rng.uniform_vector(n, -2.0, 2.0)),
    }
}

/// Sum of per-step contributions in the order the backward pass visits the
/// steps (last to first).
pub fn sum_last_to_first(params: &ParamSet, parts: &[ParamSet]) -> ParamSet {
    let mut acc = params.zeros_like();
    for p in parts.iter().rev() {
        acc.add_assign(p).unwrap();
    }
    acc
}

pub fn max_abs_diff(a: &ParamSet, b: &ParamSet) -> Real {
    a.max_abs_diff(b).unwrap()
}
