//! Dense row-major matrices and vectors, the scalar nonlinearities used by
//! the cells, and the seeded random generator every other module draws from.

use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

fn check_finite(data: &[Real], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<Real>,
}

impl Vector {
    /// Builds a vector, rejecting NaN and infinite entries.
    pub fn from_vec(data: Vec<Real>) -> Result<Self> {
        check_finite(&data, "Vector::from_vec")?;
        Ok(Self { data })
    }

    pub(crate) fn from_raw(data: Vec<Real>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn filled(len: usize, value: Real) -> Self {
        Self { data: vec![value; len] }
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Real> {
        self.data
    }

    pub fn norm(&self) -> Real {
        self.data.iter().map(|v| v * v).sum::<Real>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Vector {
        Vector::from_raw(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        same_len(self, other, "add")?;
        Ok(Vector::from_raw(
            self.iter().zip(other.iter()).map(|(a, b)| a + b).collect(),
        ))
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, Real)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }
}

impl Deref for Vector {
    type Target = [Real];

    fn deref(&self) -> &[Real] {
        &self.data
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }
}

impl fmt::Display for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vector[{}]", self.data.len())
    }
}

fn same_len(a: &[Real], b: &[Real], op: &'static str) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("[{}]", a.len()), format!("[{}]", b.len())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl Matrix {
    /// Builds a row-major matrix. The data length must equal `rows * cols`
    /// and every entry must be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("data length {}", data.len()),
            ));
        }
        check_finite(&data, "Matrix::from_vec")?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[Real]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[Real]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> Real {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Real) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Real] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn scale(&mut self, k: Real) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// `self · x`
    pub fn matvec(&self, x: &[Real]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                format!("{}x{}", self.rows, self.cols),
                format!("[{}]", x.len()),
            ));
        }
        let mut out = vec![0.0; self.rows];
        gemv_add(self, x, &mut out);
        Ok(Vector::from_raw(out))
    }

    /// `selfᵀ · y`
    pub fn transpose_matvec(&self, y: &[Real]) -> Result<Vector> {
        if y.len() != self.rows {
            return Err(Error::shape(
                "transpose_matvec",
                format!("{}x{}", self.rows, self.cols),
                format!("[{}]", y.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        gemv_t_add(self, y, &mut out);
        Ok(Vector::from_raw(out))
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a, b));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

pub fn hadamard(a: &Vector, b: &Vector) -> Result<Vector> {
    same_len(a, b, "hadamard")?;
    Ok(Vector::from_raw(a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()))
}

pub fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += w · x`; callers guarantee shapes.
pub(crate) fn gemv_add(w: &Matrix, x: &[Real], out: &mut [Real]) {
    debug_assert_eq!(w.cols, x.len());
    debug_assert_eq!(w.rows, out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w.data[r * w.cols..(r + 1) * w.cols], x);
    }
}

/// `out += wᵀ · y`
pub(crate) fn gemv_t_add(w: &Matrix, y: &[Real], out: &mut [Real]) {
    debug_assert_eq!(w.rows, y.len());
    debug_assert_eq!(w.cols, out.len());
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &w.data[r * w.cols..(r + 1) * w.cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += wv * yr;
        }
    }
}

/// `g += y · xᵀ`
pub(crate) fn outer_add(g: &mut Matrix, y: &[Real], x: &[Real]) {
    debug_assert_eq!(g.rows, y.len());
    debug_assert_eq!(g.cols, x.len());
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &mut g.data[r * g.cols..(r + 1) * g.cols];
        for (gv, &xv) in row.iter_mut().zip(x) {
            *gv += yr * xv;
        }
    }
}

pub(crate) fn add_into(acc: &mut [Real], v: &[Real]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Logistic function, split on sign so neither branch overflows.
pub fn sigmoid_scalar(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the logistic function expressed through its output.
pub fn sigmoid_grad_from_output(y: Real) -> Real {
    y * (1.0 - y)
}

pub fn tanh_grad_from_output(y: Real) -> Real {
    1.0 - y * y
}

pub fn sigmoid(x: &Vector) -> Vector {
    x.map(sigmoid_scalar)
}

pub fn tanh_act(x: &Vector) -> Vector {
    x.map(Real::tanh)
}

/// Max-shifted softmax. Panics on empty input.
pub fn softmax(z: &Vector) -> Vector {
    assert!(!z.is_empty(), "softmax of an empty vector");
    let max = z.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let exps: Vec<Real> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: Real = exps.iter().sum();
    Vector::from_raw(exps.into_iter().map(|e| e / total).collect())
}

/// Serializable position of an [`Rng`] stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, stored as a decimal string because JSON numbers
    /// cannot carry 128 bits.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Seeded generator backed by ChaCha8 (`rand_chacha`), seeded through
/// `SeedableRng::seed_from_u64`. The stream position is exposed so a
/// checkpoint can resume mid-stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::new(state.seed);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> Real {
        self.inner.gen::<Real>()
    }

    pub fn uniform_range(&mut self, lo: Real, hi: Real) -> Real {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Draws an index from a discrete distribution given by `probs`.
    pub fn categorical(&mut self, probs: &[Real]) -> usize {
        let u = self.uniform() * probs.iter().sum::<Real>();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len().saturating_sub(1)
    }

    pub fn uniform_vector(&mut self, len: usize, lo: Real, hi: Real) -> Vector {
        Vector::from_raw((0..len).map(|_| self.uniform_range(lo, hi)).collect())
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: Real, hi: Real) -> Matrix {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| self.uniform_range(lo, hi)).collect(),
        }
    }
}
