use serde::{Deserialize, Serialize};

use crate::cells::{Arch, Cell, CellState, Gate, OutputActivation, OutputHead};
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::training::projection::Projection;

fn one() -> usize {
    1
}

/// Structural description of a network: everything needed to allocate a
/// [`ParamSet`] except the values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub arch: Arch,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default)]
    pub projection_dim: Option<usize>,
    #[serde(default)]
    pub layer_norm: bool,
    #[serde(default)]
    pub trainable_initial_state: bool,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl ModelLayout {
    pub fn new(arch: Arch, input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            arch,
            input_dim,
            hidden_dim,
            output_dim,
            layers: 1,
            projection_dim: None,
            layer_norm: false,
            trainable_initial_state: false,
            output_activation: OutputActivation::Softmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.hidden_dim, self.output_dim, self.layers];
        if dims.contains(&0) || self.projection_dim == Some(0) {
            return Err(Error::InvalidArgument(format!(
                "dimensions must be positive: input {}, hidden {}, output {}, layers {}, projection {:?}",
                self.input_dim, self.hidden_dim, self.output_dim, self.layers, self.projection_dim
            )));
        }
        Ok(())
    }

    /// Input dimension seen by the first recurrent layer.
    pub fn cell_input_dim(&self) -> usize {
        self.projection_dim.unwrap_or(self.input_dim)
    }
}

/// All trainable tensors of a network. A [`GradSet`] is the same structure
/// holding gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layout: ModelLayout,
    pub projection: Option<Projection>,
    pub layers: Vec<Cell>,
    pub head: OutputHead,
    /// Learned initial states, one per layer, when enabled in the layout.
    pub initial_state: Option<Vec<CellState>>,
}

pub type GradSet = ParamSet;

pub struct TensorView<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [Real],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [Real],
}

impl ParamSet {
    /// Allocates every tensor of `layout` filled with zeros, except layer-norm
    /// gains, which start at one.
    pub fn zeros(layout: &ModelLayout) -> Result<Self> {
        layout.validate()?;
        let n = layout.hidden_dim;
        let projection = layout.projection_dim.map(|p| Projection::zeros(layout.input_dim, p));
        let layers = (0..layout.layers)
            .map(|l| {
                let m = if l == 0 { layout.cell_input_dim() } else { n };
                Cell::zeros(layout.arch, m, n, layout.layer_norm)
            })
            .collect();
        let head = OutputHead::zeros(n, layout.output_dim, layout.output_activation);
        let initial_state = layout
            .trainable_initial_state
            .then(|| vec![CellState::zeros(layout.arch, n); layout.layers]);
        Ok(Self {
            layout: layout.clone(),
            projection,
            layers,
            head,
            initial_state,
        })
    }

    pub fn arch(&self) -> Arch {
        self.layout.arch
    }

    /// Checks that the tensors agree with each other and with the layout.
    pub fn validate(&self) -> Result<()> {
        let lay = &self.layout;
        lay.validate()?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match (&self.projection, lay.projection_dim) {
            (None, None) => {}
            (Some(p), Some(d)) if p.input_dim() == lay.input_dim && p.output_dim() == d && p.b.len() == d => {}
            _ => return bad("projection does not match layout".into()),
        }
        if self.layers.len() != lay.layers {
            return bad(format!("{} layers, layout says {}", self.layers.len(), lay.layers));
        }
        let mut expect_in = lay.cell_input_dim();
        for (l, cell) in self.layers.iter().enumerate() {
            if cell.arch() != lay.arch {
                return bad(format!("layer {l} is {}, layout says {}", cell.arch(), lay.arch));
            }
            cell.check_shapes()?;
            if cell.input_dim() != expect_in {
                return Err(Error::shape(
                    "stack",
                    format!("layer {l} input dim {}", cell.input_dim()),
                    format!("previous output dim {expect_in}"),
                ));
            }
            expect_in = cell.hidden_dim();
        }
        let top = expect_in;
        if self.head.hidden_dim() != top
            || self.head.b.len() != self.head.output_dim()
            || self.head.output_dim() != lay.output_dim
        {
            return bad(format!(
                "head {} does not match hidden {top} / output {}",
                self.head.w, lay.output_dim
            ));
        }
        if let Some(init) = &self.initial_state {
            if init.len() != self.layers.len()
                || init.iter().zip(&self.layers).any(|(s, c)| {
                    s.h.len() != c.hidden_dim()
                        || s.c.as_ref().map(|v| v.len()) != lay.arch.has_cell_state().then(|| c.hidden_dim())
                })
            {
                return bad("initial state does not match layers".into());
            }
        } else if lay.trainable_initial_state {
            return bad("layout requires a trainable initial state".into());
        }
        Ok(())
    }

    /// All tensors in canonical order: projection, layers (gate by gate:
    /// `w_in`, `w_rec`, `b`, norm gain, norm shift), head, initial states.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        fn push<'a>(out: &mut Vec<TensorView<'a>>, name: String, rows: usize, cols: usize, data: &'a [Real]) {
            out.push(TensorView { name, rows, cols, data });
        }
        let mut out = Vec::new();
        if let Some(p) = &self.projection {
            push(&mut out, "projection.w".into(), p.w.rows(), p.w.cols(), p.w.as_slice());
            push(&mut out, "projection.b".into(), p.b.len(), 1, &p.b);
        }
        for (l, cell) in self.layers.iter().enumerate() {
            for (gname, g) in cell.gates() {
                let pre = format!("layer{l}.{gname}");
                let Gate { w_in, w_rec, b, norm } = g;
                push(
                    &mut out,
                    format!("{pre}.w_in"),
                    w_in.rows(),
                    w_in.cols(),
                    w_in.as_slice(),
                );
                push(
                    &mut out,
                    format!("{pre}.w_rec"),
                    w_rec.rows(),
                    w_rec.cols(),
                    w_rec.as_slice(),
                );
                push(&mut out, format!("{pre}.b"), b.len(), 1, b);
                if let Some(ln) = norm {
                    push(&mut out, format!("{pre}.norm_gain"), ln.gain.len(), 1, &ln.gain);
                    push(&mut out, format!("{pre}.norm_shift"), ln.shift.len(), 1, &ln.shift);
                }
            }
        }
        let h = &self.head;
        push(&mut out, "head.w".into(), h.w.rows(), h.w.cols(), h.w.as_slice());
        push(&mut out, "head.b".into(), h.b.len(), 1, &h.b);
        if let Some(init) = &self.initial_state {
            for (l, s) in init.iter().enumerate() {
                push(&mut out, format!("initial{l}.h"), s.h.len(), 1, &s.h);
                if let Some(c) = &s.c {
                    push(&mut out, format!("initial{l}.c"), c.len(), 1, c);
                }
            }
        }
        out
    }

    /// Mutable counterpart of [`ParamSet::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        fn push<'a>(out: &mut Vec<TensorMut<'a>>, name: String, data: &'a mut [Real]) {
            out.push(TensorMut { name, data });
        }
        let mut out = Vec::new();
        if let Some(p) = &mut self.projection {
            push(&mut out, "projection.w".into(), p.w.as_mut_slice());
            push(&mut out, "projection.b".into(), &mut p.b);
        }
        for (l, cell) in self.layers.iter_mut().enumerate() {
            for (gname, g) in cell.gates_mut() {
                let pre = format!("layer{l}.{gname}");
                let Gate { w_in, w_rec, b, norm } = g;
                push(&mut out, format!("{pre}.w_in"), w_in.as_mut_slice());
                push(&mut out, format!("{pre}.w_rec"), w_rec.as_mut_slice());
                push(&mut out, format!("{pre}.b"), b);
                if let Some(ln) = norm {
                    push(&mut out, format!("{pre}.norm_gain"), &mut ln.gain);
                    push(&mut out, format!("{pre}.norm_shift"), &mut ln.shift);
                }
            }
        }
        let h = &mut self.head;
        push(&mut out, "head.w".into(), h.w.as_mut_slice());
        push(&mut out, "head.b".into(), &mut h.b);
        if let Some(init) = &mut self.initial_state {
            for (l, s) in init.iter_mut().enumerate() {
                push(&mut out, format!("initial{l}.h"), &mut s.h);
                if let Some(c) = &mut s.c {
                    push(&mut out, format!("initial{l}.c"), c);
                }
            }
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors().into_iter().map(|t| t.name).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Same structure with every entry zero.
    pub fn zeros_like(&self) -> GradSet {
        let mut g = self.clone();
        g.fill(0.0);
        g
    }

    pub fn fill(&mut self, v: Real) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = v);
        }
    }

    pub fn flatten(&self) -> Vec<Real> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }

    pub fn copy_from_flat(&mut self, flat: &[Real]) -> Result<()> {
        let n = self.num_scalars();
        if flat.len() != n {
            return Err(Error::shape("copy_from_flat", n, flat.len()));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let len = t.data.len();
            t.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    pub fn scalar(&self, index: usize) -> Real {
        let mut i = index;
        for t in self.tensors() {
            if i < t.data.len() {
                return t.data[i];
            }
            i -= t.data.len();
        }
        panic!("scalar index {index} out of range");
    }

    pub fn set_scalar(&mut self, index: usize, v: Real) {
        let mut i = index;
        for t in self.tensors_mut() {
            if i < t.data.len() {
                t.data[i] = v;
                return;
            }
            i -= t.data.len();
        }
        panic!("scalar index {index} out of range");
    }

    /// Name of the tensor holding flat index `index`, and the offset inside it.
    pub fn locate(&self, index: usize) -> Option<(String, usize)> {
        let mut i = index;
        for t in self.tensors() {
            if i < t.data.len() {
                return Some((t.name, i));
            }
            i -= t.data.len();
        }
        None
    }

    fn check_same_structure(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        let a = self.tensors();
        let b = other.tensors();
        let same = a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.name == y.name && x.data.len() == y.data.len());
        if same {
            Ok(())
        } else {
            Err(Error::shape(op, self.num_scalars(), other.num_scalars()))
        }
    }

    pub fn add_assign(&mut self, other: &GradSet) -> Result<()> {
        self.check_same_structure(other, "add_assign")?;
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            crate::linalg::add_into(dst.data, src.data);
        }
        Ok(())
    }

    pub fn scale(&mut self, k: Real) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// L2 norm over every entry of every tensor.
    pub fn global_norm(&self) -> Real {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<Real>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<Real> {
        self.check_same_structure(other, "max_abs_diff")?;
        Ok(self
            .flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max))
    }

    /// Mutable access to the recurrent matrices of every gate in every layer.
    pub fn recurrent_matrices_mut(&mut self) -> Vec<&mut crate::linalg::Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|c| c.gates_mut().into_iter().map(|(_, g)| &mut g.w_rec))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ModelLayout {
        ModelLayout {
            layers: 2,
            projection_dim: Some(3),
            layer_norm: true,
            trainable_initial_state: true,
            ..ModelLayout::new(Arch::Lstm, 2, 4, 5)
        }
    }

    #[test]
    fn tensor_counts() {
        let mut p = ParamSet::zeros(&layout()).unwrap();
        p.validate().unwrap();
        // projection 2*3+3, layer0 4 gates*(4*3+16+4+4+4), layer1 4*(16+16+12), head 20+5, init 2*(4+4)
        let expect = 9 + 4 * 40 + 4 * 44 + 25 + 16;
        assert_eq!(p.num_scalars(), expect);
        assert_eq!(p.tensors().len(), p.tensors_mut().len());
        assert_eq!(p.flatten().len(), expect);
    }

    #[test]
    fn flat_roundtrip_and_scalar_access() {
        let mut p = ParamSet::zeros(&layout()).unwrap();
        let flat: Vec<Real> = (0..p.num_scalars()).map(|i| i as Real * 0.5).collect();
        p.copy_from_flat(&flat).unwrap();
        assert_eq!(p.flatten(), flat);
        assert_eq!(p.scalar(17), 8.5);
        p.set_scalar(17, -1.0);
        assert_eq!(p.flatten()[17], -1.0);
        assert_eq!(p.locate(0).unwrap().0, "projection.w");
        assert!(p.locate(p.num_scalars()).is_none());
    }

    #[test]
    fn zero_like_and_norms() {
        let mut p = ParamSet::zeros(&ModelLayout::new(Arch::Rnn, 1, 1, 1)).unwrap();
        p.fill(2.0);
        let z = p.zeros_like();
        assert_eq!(z.global_norm(), 0.0);
        // w_in, w_rec, b, head.w, head.b
        assert!((p.global_norm() - (5.0 * 4.0 as Real).sqrt()).abs() < 1e-15);
        let mut q = p.clone();
        q.add_assign(&p).unwrap();
        assert_eq!(q.max_abs_diff(&p).unwrap(), 2.0);
    }

    #[test]
    fn validation_catches_stack_mismatch() {
        let mut p = ParamSet::zeros(&ModelLayout {
            layers: 2,
            ..ModelLayout::new(Arch::Gru, 2, 3, 2)
        })
        .unwrap();
        p.layers[1] = Cell::zeros(Arch::Gru, 5, 3, false);
        assert!(matches!(p.validate(), Err(Error::Shape { .. })));
        assert!(ParamSet::zeros(&ModelLayout::new(Arch::Gru, 0, 3, 2)).is_err());
    }
}
