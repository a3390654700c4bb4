//! Dense complex linear algebra for desk-scale quantum objects.
//!
//! Storage is row-major. Composite indices follow a single global convention:
//! the leftmost tensor factor is the slowest-varying index, so the basis state
//! `|i⟩|j⟩` of an `m ⊗ n` space sits at index `i * n + j`.

use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_from_seed;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Default cap on any single matrix side.
pub const DEFAULT_MAX_DIM: usize = 4096;

/// Environment variable overriding [`DEFAULT_MAX_DIM`].
pub const MAX_DIM_ENV: &str = "RHO_LAB_MAX_DIM";

/// Gram–Schmidt candidates whose residual norm falls below this are skipped.
pub const COMPLETION_THRESHOLD: f64 = 1e-6;

/// The dimension cap in force: `RHO_LAB_MAX_DIM` if set and parseable, else the default.
pub fn max_dim() -> usize {
    std::env::var(MAX_DIM_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(DEFAULT_MAX_DIM)
}

/// Which tensor factor of a bipartite space to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    First,
    Second,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixJson", into = "MatrixJson")]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("{rows}x{cols} matrix has an empty side")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite { row: pos / cols, col: pos % cols });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix sides must be positive");
        Self { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix sides must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Real row-major entries.
    pub fn from_real(rows: usize, cols: usize, entries: &[f64]) -> Result<Self> {
        Self::new(rows, cols, entries.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn diag(entries: &[C64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &z) in entries.iter().enumerate() {
            m[(i, i)] = z;
        }
        m
    }

    pub fn real_diag(entries: &[f64]) -> Self {
        Self::diag(&entries.iter().map(|&x| C64::new(x, 0.0)).collect::<Vec<_>>())
    }

    /// `|v⟩⟨w|`
    pub fn outer(v: &[C64], w: &[C64]) -> Self {
        Self::from_fn(v.len(), w.len(), |i, j| v[i] * w[j].conj())
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<C64>]) -> Self {
        let rows = columns[0].len();
        Self::from_fn(rows, columns.len(), |i, j| columns[j][i])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == ZERO {
                    continue;
                }
                let row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(self.cols, v.len(), "matrix-vector shape mismatch");
        self.data.chunks(self.cols).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn add(&self, rhs: &Self) -> Self {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn scale(&self, s: C64) -> Self {
        self.map(|z| z * s)
    }

    pub fn scale_real(&self, s: f64) -> Self {
        self.map(|z| z * s)
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&z| f(z)).collect() }
    }

    fn zip_with(&self, rhs: &Self, f: impl Fn(C64, C64) -> C64) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "elementwise shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Max-norm of `self - rhs`.
    pub fn max_abs_diff(&self, rhs: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "elementwise shape mismatch");
        self.data.iter().zip(&rhs.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// Largest `|m_ij - conj(m_ji)|`; infinite for non-square input.
    pub fn hermitian_deviation(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut dev = 0.0_f64;
        for i in 0..self.rows {
            for j in i..self.cols {
                dev = dev.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        dev
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermitian_deviation() <= tol
    }

    /// `‖U†U − I‖_max`; infinite for non-square input.
    pub fn unitarity_deviation(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        self.adjoint().matmul(self).max_abs_diff(&Self::identity(self.rows))
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_deviation() <= tol
    }

    /// `(M + M†)/2`
    pub fn hermitian_part(&self) -> Self {
        self.add(&self.adjoint()).scale_real(0.5)
    }

    /// Conjugation `U · self · U†`.
    pub fn conjugate_by(&self, u: &Self) -> Self {
        u.matmul(self).matmul(&u.adjoint())
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;

    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix {}x{} [", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols) {
            let cells: Vec<String> = row.iter().map(|z| format!("{:+.6}{:+.6}i", z.re, z.im)).collect();
            writeln!(f, "  {}", cells.join("  "))?;
        }
        write!(f, "]")
    }
}

/// Wire format: `{"rows":n,"cols":m,"re":[[...]],"im":[[...]]}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl TryFrom<MatrixJson> for ComplexMatrix {
    type Error = Error;

    fn try_from(j: MatrixJson) -> Result<Self> {
        if j.re.len() != j.rows || j.im.len() != j.rows {
            return Err(Error::Shape(format!("expected {} rows in re/im, got {}/{}", j.rows, j.re.len(), j.im.len())));
        }
        let mut data = Vec::with_capacity(j.rows * j.cols);
        for (r, (re_row, im_row)) in j.re.iter().zip(&j.im).enumerate() {
            if re_row.len() != j.cols || im_row.len() != j.cols {
                return Err(Error::Shape(format!("row {r} does not have {} columns", j.cols)));
            }
            data.extend(re_row.iter().zip(im_row).map(|(&a, &b)| C64::new(a, b)));
        }
        ComplexMatrix::new(j.rows, j.cols, data)
    }
}

impl From<ComplexMatrix> for MatrixJson {
    fn from(m: ComplexMatrix) -> Self {
        let re = m.data.chunks(m.cols).map(|r| r.iter().map(|z| z.re).collect()).collect();
        let im = m.data.chunks(m.cols).map(|r| r.iter().map(|z| z.im).collect()).collect();
        MatrixJson { rows: m.rows, cols: m.cols, re, im }
    }
}

/// Tolerance on the Euclidean norm of a [`StateVector`].
pub const NORM_TOL: f64 = 1e-12;

/// A unit vector in a finite-dimensional Hilbert space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VectorJson", into = "VectorJson")]
pub struct StateVector {
    amps: Vec<C64>,
}

impl StateVector {
    pub fn new(amps: Vec<C64>) -> Result<Self> {
        if amps.is_empty() {
            return Err(Error::Shape("state vector has dimension 0".into()));
        }
        if let Some(pos) = amps.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite { row: pos, col: 0 });
        }
        let norm = vec_norm(&amps);
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized(norm));
        }
        Ok(Self { amps })
    }

    /// Rescales to unit norm. Fails on the zero vector.
    pub fn normalized(mut amps: Vec<C64>) -> Result<Self> {
        let norm = vec_norm(&amps);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::NotNormalized(norm));
        }
        amps.iter_mut().for_each(|z| *z /= norm);
        Self::new(amps)
    }

    pub fn basis(dim: usize, k: usize) -> Self {
        assert!(k < dim, "basis index out of range");
        let mut amps = vec![ZERO; dim];
        amps[k] = ONE;
        Self { amps }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amps
    }

    /// `⟨self|other⟩`
    pub fn inner(&self, other: &Self) -> C64 {
        inner(&self.amps, &other.amps)
    }

    /// `|ψ⟩⟨ψ|`
    pub fn projector(&self) -> ComplexMatrix {
        ComplexMatrix::outer(&self.amps, &self.amps)
    }

    pub fn tensor(&self, other: &Self) -> Self {
        let amps = self.amps.iter().flat_map(|&a| other.amps.iter().map(move |&b| a * b)).collect();
        Self { amps }
    }

    /// `min_θ ‖self − e^{iθ} other‖`.
    pub fn distance_up_to_phase(&self, other: &Self) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        let overlap = other.inner(self);
        let phase = if overlap.norm() > 0.0 { overlap / overlap.norm() } else { ONE };
        self.amps.iter().zip(&other.amps).map(|(a, b)| (a - phase * b).norm_sqr()).sum::<f64>().sqrt()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorJson {
    pub dim: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl TryFrom<VectorJson> for StateVector {
    type Error = Error;

    fn try_from(j: VectorJson) -> Result<Self> {
        if j.re.len() != j.dim || j.im.len() != j.dim {
            return Err(Error::Shape(format!("expected {} amplitudes in re/im", j.dim)));
        }
        StateVector::new(j.re.iter().zip(&j.im).map(|(&a, &b)| C64::new(a, b)).collect())
    }
}

impl From<StateVector> for VectorJson {
    fn from(v: StateVector) -> Self {
        VectorJson {
            dim: v.dim(),
            re: v.amps.iter().map(|z| z.re).collect(),
            im: v.amps.iter().map(|z| z.im).collect(),
        }
    }
}

/// `⟨a|b⟩`
pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Kronecker product, subject to the [`max_dim`] cap.
pub fn tensor_product(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    tensor_product_capped(a, b, max_dim())
}

pub fn tensor_product_capped(a: &ComplexMatrix, b: &ComplexMatrix, max: usize) -> Result<ComplexMatrix> {
    let rows = checked_side(a.rows, b.rows, max)?;
    let cols = checked_side(a.cols, b.cols, max)?;
    Ok(ComplexMatrix::from_fn(rows, cols, |i, j| a[(i / b.rows, j / b.cols)] * b[(i % b.rows, j % b.cols)]))
}

fn checked_side(x: usize, y: usize, max: usize) -> Result<usize> {
    match x.checked_mul(y) {
        Some(n) if n <= max => Ok(n),
        Some(n) => Err(Error::DimensionLimit { requested: n, max }),
        None => Err(Error::DimensionLimit { requested: usize::MAX, max }),
    }
}

/// Partial trace of an operator on `A ⊗ B`, keeping the selected factor.
pub fn partial_trace(m: &ComplexMatrix, dim_a: usize, dim_b: usize, keep: Factor) -> Result<ComplexMatrix> {
    let side = dim_a.saturating_mul(dim_b);
    if !m.is_square() || m.rows != side || dim_a == 0 || dim_b == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} operator is not on a {dim_a}x{dim_b} composite",
            m.rows, m.cols
        )));
    }
    let out = match keep {
        Factor::First => {
            ComplexMatrix::from_fn(dim_a, dim_a, |i, j| (0..dim_b).map(|k| m[(i * dim_b + k, j * dim_b + k)]).sum())
        }
        Factor::Second => {
            ComplexMatrix::from_fn(dim_b, dim_b, |i, j| (0..dim_a).map(|k| m[(k * dim_b + i, k * dim_b + j)]).sum())
        }
    };
    Ok(out)
}

/// Spectral decomposition of a Hermitian matrix.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    /// Descending.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, in the order of `values`.
    pub vectors: ComplexMatrix,
}

impl HermitianEigen {
    pub fn vector(&self, k: usize) -> Vec<C64> {
        self.vectors.column(k)
    }

    /// `V · diag(λ) · V†`
    pub fn reconstruct(&self) -> ComplexMatrix {
        let d = ComplexMatrix::real_diag(&self.values);
        self.vectors.matmul(&d).matmul(&self.vectors.adjoint())
    }

    pub fn min_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

/// Hermitian tolerance accepted by [`eig_hermitian`].
pub const HERMITIAN_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic complex Jacobi eigensolver.
///
/// Each rotation first removes the phase of the pivot `a_pq`, then applies the
/// classic real Jacobi rotation to the now-real 2x2 block. Eigenvalues are
/// returned in descending order; ties keep their diagonal index order.
pub fn eig_hermitian(m: &ComplexMatrix) -> Result<HermitianEigen> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", m.rows, m.cols)));
    }
    let dev = m.hermitian_deviation();
    if dev > HERMITIAN_TOL {
        return Err(Error::NotHermitian(dev));
    }
    let n = m.rows;
    let mut a = m.hermitian_part();
    let mut v = ComplexMatrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[(p, q)].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                let g = apq.norm();
                if g <= 1e-18 * scale {
                    continue;
                }
                let phase_conj = (apq / g).conj();
                let tau = (a[(q, q)].re - a[(p, p)].re) / (2.0 * g);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // J restricted to (p, q) = diag(1, e^{-iθ}) · [[c, s], [-s, c]]
                let j_pp = C64::new(c, 0.0);
                let j_pq = C64::new(s, 0.0);
                let j_qp = phase_conj * (-s);
                let j_qq = phase_conj * c;

                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = akp * j_pp + akq * j_qp;
                    a[(k, q)] = akp * j_pq + akq * j_qq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = j_pp.conj() * apk + j_qp.conj() * aqk;
                    a[(q, k)] = j_pq.conj() * apk + j_qq.conj() * aqk;
                }
                a[(p, q)] = ZERO;
                a[(q, p)] = ZERO;
                a[(p, p)] = C64::new(a[(p, p)].re, 0.0);
                a[(q, q)] = C64::new(a[(q, q)].re, 0.0);
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = vkp * j_pp + vkq * j_qp;
                    v[(k, q)] = vkp * j_pq + vkq * j_qq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].re.total_cmp(&a[(i, i)].re));
    let values = order.iter().map(|&i| a[(i, i)].re).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(HermitianEigen { values, vectors })
}

/// Standard complex Gaussian `(N(0,1) + i N(0,1)) / √2`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn ginibre<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| complex_gaussian(rng))
}

/// Haar-random unitary from a fixed seed.
pub fn random_unitary(dim: usize, seed: u64) -> ComplexMatrix {
    random_unitary_with(dim, &mut rng_from_seed(seed))
}

/// Haar-random unitary: QR of a complex Ginibre matrix with the R diagonal
/// made real-positive.
pub fn random_unitary_with<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> ComplexMatrix {
    assert!(dim >= 1, "unitary dimension must be positive");
    loop {
        let z = ginibre(dim, dim, rng);
        if let Some(q) = qr_unitary_factor(&z) {
            return q;
        }
    }
}

/// Q factor of `z = QR` with `diag(R) > 0`, by modified Gram–Schmidt with one
/// reorthogonalization pass. Gram–Schmidt produces a positive real R
/// diagonal, which is the phase normalization Haar sampling needs. Returns
/// `None` for numerically rank-deficient input.
fn qr_unitary_factor(z: &ComplexMatrix) -> Option<ComplexMatrix> {
    let n = z.cols;
    let mut cols: Vec<Vec<C64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut c = z.column(j);
        let original = vec_norm(&c);
        for _ in 0..2 {
            for q in &cols {
                let proj = inner(q, &c);
                c.iter_mut().zip(q).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = vec_norm(&c);
        if norm <= 1e-10 * original.max(f64::MIN_POSITIVE) {
            return None;
        }
        c.iter_mut().for_each(|x| *x /= norm);
        cols.push(c);
    }
    Some(ComplexMatrix::from_columns(&cols))
}

/// Random density matrix of the given rank from a fixed seed.
pub fn random_density(dim: usize, rank: usize, seed: u64) -> Result<ComplexMatrix> {
    random_density_with(dim, rank, &mut rng_from_seed(seed))
}

/// `G G† / Tr(G G†)` for a `dim × rank` Ginibre matrix `G`.
pub fn random_density_with<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> Result<ComplexMatrix> {
    if rank == 0 || rank > dim {
        return Err(Error::OutOfRange { what: "rank", detail: format!("rank {rank} not in 1..={dim}") });
    }
    let g = ginibre(dim, rank, rng);
    let w = g.matmul(&g.adjoint()).hermitian_part();
    let tr = w.trace().re;
    Ok(w.scale_real(1.0 / tr))
}

/// Extends an orthonormal set to a full basis of `C^dim` using canonical
/// basis vectors in index order, skipping candidates whose residual after
/// projection is below [`COMPLETION_THRESHOLD`].
pub fn complete_orthonormal_basis(seed_vectors: &[Vec<C64>], dim: usize) -> Vec<Vec<C64>> {
    let mut basis: Vec<Vec<C64>> = seed_vectors.to_vec();
    for k in 0..dim {
        if basis.len() == dim {
            break;
        }
        let mut c = vec![ZERO; dim];
        c[k] = ONE;
        for _ in 0..2 {
            for b in &basis {
                let proj = inner(b, &c);
                c.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = vec_norm(&c);
        if norm < COMPLETION_THRESHOLD {
            continue;
        }
        c.iter_mut().for_each(|x| *x /= norm);
        basis.push(c);
    }
    basis
}

/// A unitary taking `v` to `w`: both are completed to orthonormal bases
/// `{a_k}`, `{b_k}` and `U = Σ_k |b_k⟩⟨a_k|`.
pub fn unitary_mapping(v: &StateVector, w: &StateVector) -> Result<ComplexMatrix> {
    if v.dim() != w.dim() {
        return Err(Error::DimensionMismatch(format!(
            "cannot map a dim-{} vector onto a dim-{} vector",
            v.dim(),
            w.dim()
        )));
    }
    let dim = v.dim();
    let a = complete_orthonormal_basis(&[v.amplitudes().to_vec()], dim);
    let b = complete_orthonormal_basis(&[w.amplitudes().to_vec()], dim);
    let mut u = ComplexMatrix::zeros(dim, dim);
    for (ak, bk) in a.iter().zip(&b) {
        for i in 0..dim {
            for j in 0..dim {
                u[(i, j)] += bk[i] * ak[j].conj();
            }
        }
    }
    Ok(u)
}

/// Largest `|⟨b_i|b_j⟩ − δ_ij|` over a set of vectors.
pub fn orthonormality_deviation(vectors: &[Vec<C64>]) -> f64 {
    let mut dev = 0.0_f64;
    for (i, a) in vectors.iter().enumerate() {
        for (j, b) in vectors.iter().enumerate().skip(i) {
            let target = if i == j { ONE } else { ZERO };
            dev = dev.max((inner(a, b) - target).norm());
        }
    }
    dev
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> ComplexMatrix {
        ginibre(rows, cols, &mut rng_from_seed(seed))
    }

    fn random_hermitian(n: usize, seed: u64) -> ComplexMatrix {
        random_matrix(n, n, seed).hermitian_part()
    }

    #[test]
    fn construction_rejects_bad_shapes_and_nan() {
        assert!(matches!(ComplexMatrix::new(0, 1, vec![]), Err(Error::Shape(_))));
        assert!(matches!(ComplexMatrix::new(2, 2, vec![ONE; 3]), Err(Error::Shape(_))));
        let err = ComplexMatrix::new(1, 2, vec![ONE, c(f64::NAN, 0.0)]).unwrap_err();
        assert_eq!(err, Error::NonFinite { row: 0, col: 1 });
    }

    #[test]
    fn tensor_identities_and_diagonals() {
        let i4 = tensor_product(&ComplexMatrix::identity(2), &ComplexMatrix::identity(2)).unwrap();
        assert_eq!(i4, ComplexMatrix::identity(4));
        let z = ComplexMatrix::real_diag(&[1.0, -1.0]);
        assert_eq!(tensor_product(&z, &z).unwrap(), ComplexMatrix::real_diag(&[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn tensor_matches_quadruple_loop_oracle() {
        let a = random_matrix(2, 2, 1);
        let b = random_matrix(3, 3, 2);
        let got = tensor_product(&a, &b).unwrap();
        let mut oracle = ComplexMatrix::zeros(6, 6);
        for i1 in 0..2 {
            for i2 in 0..3 {
                for j1 in 0..2 {
                    for j2 in 0..3 {
                        oracle[(i1 * 3 + i2, j1 * 3 + j2)] = a[(i1, j1)] * b[(i2, j2)];
                    }
                }
            }
        }
        assert!(got.max_abs_diff(&oracle) < 1e-14);
    }

    #[test]
    fn tensor_respects_dimension_cap() {
        let a = ComplexMatrix::identity(8);
        let err = tensor_product_capped(&a, &a, 32).unwrap_err();
        assert_eq!(err, Error::DimensionLimit { requested: 64, max: 32 });
    }

    #[test]
    fn partial_trace_of_singlet_projector() {
        let h = 0.5;
        let singlet =
            ComplexMatrix::from_real(4, 4, &[0.0, 0.0, 0.0, 0.0, 0.0, h, -h, 0.0, 0.0, -h, h, 0.0, 0.0, 0.0, 0.0, 0.0])
                .unwrap();
        let rho = partial_trace(&singlet, 2, 2, Factor::First).unwrap();
        assert!(rho.max_abs_diff(&ComplexMatrix::real_diag(&[0.5, 0.5])) < 1e-12);
    }

    #[test]
    fn partial_trace_of_product_state() {
        let ra = random_density(2, 2, 3).unwrap();
        let rb = random_density(3, 2, 4).unwrap();
        let ab = tensor_product(&ra, &rb).unwrap();
        assert!(partial_trace(&ab, 2, 3, Factor::First).unwrap().max_abs_diff(&ra) < 1e-13);
        assert!(partial_trace(&ab, 2, 3, Factor::Second).unwrap().max_abs_diff(&rb) < 1e-13);
    }

    #[test]
    fn partial_trace_matches_index_summation_oracle() {
        let m = random_hermitian(4, 5);
        // Independent oracle: explicit (i,k,j,l) tensor indexing.
        let mut keep_a = ComplexMatrix::zeros(2, 2);
        let mut keep_b = ComplexMatrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let idx = |a: usize, b: usize| a * 2 + b;
                    keep_a[(i, j)] += m[(idx(i, k), idx(j, k))];
                    keep_b[(i, j)] += m[(idx(k, i), idx(k, j))];
                }
            }
        }
        assert!(partial_trace(&m, 2, 2, Factor::First).unwrap().max_abs_diff(&keep_a) < 1e-13);
        assert!(partial_trace(&m, 2, 2, Factor::Second).unwrap().max_abs_diff(&keep_b) < 1e-13);
        let t = partial_trace(&m, 2, 2, Factor::Second).unwrap().trace();
        assert!((t - m.trace()).norm() < 1e-12);
    }

    #[test]
    fn partial_trace_rejects_malformed_composite() {
        let m = ComplexMatrix::identity(5);
        assert!(matches!(partial_trace(&m, 2, 2, Factor::First), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn eig_of_named_matrices() {
        let e = eig_hermitian(&ComplexMatrix::real_diag(&[0.5, 0.5])).unwrap();
        assert_eq!(e.values, vec![0.5, 0.5]);
        let proj = StateVector::basis(2, 0).projector();
        let e = eig_hermitian(&proj).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-15 && e.values[1].abs() < 1e-15);
    }

    #[test]
    fn eig_reconstructs_random_hermitian() {
        for seed in 0..20 {
            let n = 1 + (seed as usize % 8);
            let m = random_hermitian(n, seed);
            let e = eig_hermitian(&m).unwrap();
            assert!(e.reconstruct().max_abs_diff(&m) < 1e-9, "seed {seed}");
            assert!(e.vectors.unitarity_deviation() < 1e-10);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            let sum: f64 = e.values.iter().sum();
            assert!((sum - m.trace().re).abs() < 1e-10);
        }
    }

    #[test]
    fn eig_rejects_non_hermitian() {
        let m = ComplexMatrix::from_real(2, 2, &[1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(eig_hermitian(&m), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn random_unitary_contracts() {
        let u1 = random_unitary(1, 9);
        assert!((u1[(0, 0)].norm() - 1.0).abs() < 1e-14);
        for dim in 1..=8 {
            assert!(random_unitary(dim, dim as u64).unitarity_deviation() < 1e-10);
        }
        assert_eq!(random_unitary(5, 42), random_unitary(5, 42));
        assert_ne!(random_unitary(5, 42), random_unitary(5, 43));
    }

    #[test]
    fn random_density_contracts() {
        let pure = random_density(2, 1, 11).unwrap();
        let e = eig_hermitian(&pure).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-10 && e.values[1].abs() < 1e-10);
        for seed in 0..20 {
            let rho = random_density(4, 3, seed).unwrap();
            assert!((rho.trace().re - 1.0).abs() < 1e-12);
            let e = eig_hermitian(&rho).unwrap();
            assert!(e.min_value() >= -1e-12);
            assert_eq!(e.values.iter().filter(|&&l| l > 1e-12).count(), 3);
        }
        assert!(matches!(random_density(2, 3, 0), Err(Error::OutOfRange { .. })));
        assert!(matches!(random_density(2, 0, 0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn random_density_mean_is_maximally_mixed() {
        let mut rng = rng_from_seed(2024);
        let n = 10_000;
        let mut acc = ComplexMatrix::zeros(2, 2);
        for _ in 0..n {
            acc = acc.add(&random_density_with(2, 2, &mut rng).unwrap());
        }
        let mean = acc.scale_real(1.0 / n as f64);
        assert!(mean.max_abs_diff(&ComplexMatrix::real_diag(&[0.5, 0.5])) < 0.02);
    }

    #[test]
    fn unitary_mapping_contracts() {
        let zero = StateVector::basis(2, 0);
        let one = StateVector::basis(2, 1);
        let u = unitary_mapping(&zero, &one).unwrap();
        let out = u.mul_vec(zero.amplitudes());
        assert!((out[0]).norm() < 1e-12 && (out[1] - ONE).norm() < 1e-12);

        let v = StateVector::normalized(ginibre(6, 1, &mut rng_from_seed(1)).column(0)).unwrap();
        let w = StateVector::normalized(ginibre(6, 1, &mut rng_from_seed(2)).column(0)).unwrap();
        let u = unitary_mapping(&v, &w).unwrap();
        let diff: Vec<C64> = u.mul_vec(v.amplitudes()).iter().zip(w.amplitudes()).map(|(a, b)| a - b).collect();
        assert!(vec_norm(&diff) < 1e-10);
        assert!(u.unitarity_deviation() < 1e-10);

        let fixed = unitary_mapping(&v, &v).unwrap();
        let back: Vec<C64> = fixed.mul_vec(v.amplitudes()).iter().zip(v.amplitudes()).map(|(a, b)| a - b).collect();
        assert!(vec_norm(&back) < 1e-10);

        assert!(matches!(unitary_mapping(&zero, &StateVector::basis(3, 0)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn state_vector_rejects_unnormalized() {
        assert!(matches!(StateVector::new(vec![ONE, ONE]), Err(Error::NotNormalized(_))));
        assert!(StateVector::normalized(vec![ZERO, ZERO]).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn partial_trace_is_linear(seed in 0u64..u64::MAX, da in 1usize..=3, db in 1usize..=3, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let n = da * db;
            let x = random_matrix(n, n, seed);
            let y = random_matrix(n, n, seed.wrapping_add(1));
            let combo = x.scale_real(alpha).add(&y.scale_real(beta));
            for keep in [Factor::First, Factor::Second] {
                let lhs = partial_trace(&combo, da, db, keep).unwrap();
                let rhs = partial_trace(&x, da, db, keep).unwrap().scale_real(alpha)
                    .add(&partial_trace(&y, da, db, keep).unwrap().scale_real(beta));
                proptest::prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            }
        }

        #[test]
        fn tracing_out_a_tensor_factor(seed in 0u64..u64::MAX, da in 1usize..=3, db in 1usize..=3) {
            let a = random_matrix(da, da, seed);
            let b = random_matrix(db, db, seed ^ 0x5555);
            let ab = tensor_product(&a, &b).unwrap();
            let got = partial_trace(&ab, da, db, Factor::First).unwrap();
            proptest::prop_assert!(got.max_abs_diff(&a.scale(b.trace())) < 1e-12);
        }

        #[test]
        fn eigenvalues_sum_to_trace(seed in 0u64..u64::MAX, n in 1usize..=6) {
            let m = random_hermitian(n, seed);
            let e = eig_hermitian(&m).unwrap();
            proptest::prop_assert!((e.values.iter().sum::<f64>() - m.trace().re).abs() < 1e-10);
        }

        #[test]
        fn random_unitaries_preserve_norms(seed in 0u64..u64::MAX, n in 1usize..=8) {
            let u = random_unitary(n, seed);
            let x = ginibre(n, 1, &mut rng_from_seed(seed ^ 0xabc)).column(0);
            proptest::prop_assert!((vec_norm(&u.mul_vec(&x)) - vec_norm(&x)).abs() < 1e-10);
        }
    }

    #[test]
    fn matrix_json_shape() {
        let m = ComplexMatrix::new(1, 2, vec![c(1.0, 0.5), c(-2.0, 0.0)]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"rows":1,"cols":2,"re":[[1.0,-2.0]],"im":[[0.5,0.0]]}"#);
        let back: ComplexMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let bad = r#"{"rows":2,"cols":2,"re":[[1.0,0.0]],"im":[[0.0,0.0]]}"#;
        assert!(serde_json::from_str::<ComplexMatrix>(bad).is_err());
    }
}
