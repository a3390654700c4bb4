//! Quantum states: density matrices, bipartite pure states, Schmidt
//! decompositions, Bloch vectors and mixtures.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, complete_orthonormal_basis, eig_hermitian, inner, orthonormality_deviation, partial_trace, vec_norm,
    ComplexMatrix, Factor, HermitianEigen, StateVector, C64, ONE, ZERO,
};

/// Hermiticity, trace and positivity tolerance for [`DensityMatrix`].
pub const DENSITY_TOL: f64 = 1e-10;

/// Eigenvalues below this count as zero when determining rank.
pub const RANK_THRESHOLD: f64 = 1e-12;

/// Tolerance on mixture probabilities summing to one.
pub const PROBABILITY_SUM_TOL: f64 = 1e-12;

/// Schmidt vectors on the environment side are computed by division only for
/// coefficients above this; the rest come from basis completion.
const SCHMIDT_DIVISION_FLOOR: f64 = 1e-10;

pub fn pauli_x() -> ComplexMatrix {
    ComplexMatrix::from_real(2, 2, &[0.0, 1.0, 1.0, 0.0]).unwrap()
}

pub fn pauli_y() -> ComplexMatrix {
    ComplexMatrix::new(2, 2, vec![ZERO, C64::new(0.0, -1.0), C64::new(0.0, 1.0), ZERO]).unwrap()
}

pub fn pauli_z() -> ComplexMatrix {
    ComplexMatrix::real_diag(&[1.0, -1.0])
}

pub fn paulis() -> [ComplexMatrix; 3] {
    [pauli_x(), pauli_y(), pauli_z()]
}

/// Hermitian, positive-semidefinite, unit-trace operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ComplexMatrix", into = "ComplexMatrix")]
pub struct DensityMatrix {
    matrix: ComplexMatrix,
}

impl DensityMatrix {
    pub fn new(matrix: ComplexMatrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidDensity(format!("{}x{} matrix is not square", matrix.rows(), matrix.cols())));
        }
        let dev = matrix.hermitian_deviation();
        if dev > DENSITY_TOL {
            return Err(Error::InvalidDensity(format!("not Hermitian (deviation {dev:e})")));
        }
        let matrix = matrix.hermitian_part();
        let tr = matrix.trace().re;
        if (tr - 1.0).abs() > DENSITY_TOL {
            return Err(Error::InvalidDensity(format!("trace {tr} is not 1")));
        }
        let min = eig_hermitian(&matrix)?.min_value();
        if min < -DENSITY_TOL {
            return Err(Error::InvalidDensity(format!("negative eigenvalue {min:e}")));
        }
        Ok(Self { matrix })
    }

    pub fn from_pure(psi: &StateVector) -> Self {
        Self { matrix: psi.projector() }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self { matrix: ComplexMatrix::real_diag(&vec![1.0 / dim as f64; dim]) }
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { matrix: linalg::random_density_with(dim, rank, rng)? })
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    pub fn spectrum(&self) -> HermitianEigen {
        eig_hermitian(&self.matrix).expect("density matrices are Hermitian")
    }

    pub fn rank(&self) -> usize {
        self.spectrum().values.iter().filter(|&&l| l >= RANK_THRESHOLD).count().max(1)
    }

    pub fn purity(&self) -> f64 {
        self.matrix.matmul(&self.matrix).trace().re
    }

    /// `(1 − λ)·self + λ·other`, for `λ ∈ [0, 1]`.
    pub fn interpolate(&self, other: &Self, lambda: f64) -> Result<Self> {
        mix(&[(1.0 - lambda, self.clone()), (lambda, other.clone())])
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.matrix.max_abs_diff(&other.matrix)
    }
}

impl TryFrom<ComplexMatrix> for DensityMatrix {
    type Error = Error;

    fn try_from(m: ComplexMatrix) -> Result<Self> {
        Self::new(m)
    }
}

impl From<DensityMatrix> for ComplexMatrix {
    fn from(d: DensityMatrix) -> Self {
        d.matrix
    }
}

/// Pure state of a system ⊗ environment pair. `dim_e = 1` encodes a pure
/// state of the system alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BipartiteJson", into = "BipartiteJson")]
pub struct BipartiteState {
    dim_s: usize,
    dim_e: usize,
    vector: StateVector,
}

impl BipartiteState {
    pub fn new(dim_s: usize, dim_e: usize, vector: StateVector) -> Result<Self> {
        if dim_s == 0 || dim_e == 0 || dim_s.checked_mul(dim_e) != Some(vector.dim()) {
            return Err(Error::DimensionMismatch(format!(
                "vector of dimension {} is not a {dim_s}x{dim_e} bipartite state",
                vector.dim()
            )));
        }
        Ok(Self { dim_s, dim_e, vector })
    }

    /// A pure state of the system alone.
    pub fn pure(vector: StateVector) -> Self {
        Self { dim_s: vector.dim(), dim_e: 1, vector }
    }

    pub fn product(s: &StateVector, e: &StateVector) -> Self {
        Self { dim_s: s.dim(), dim_e: e.dim(), vector: s.tensor(e) }
    }

    /// Normalized complex Gaussian vector.
    pub fn random<R: Rng + ?Sized>(dim_s: usize, dim_e: usize, rng: &mut R) -> Self {
        let amps = linalg::ginibre(dim_s * dim_e, 1, rng).column(0);
        let vector = StateVector::normalized(amps).expect("Gaussian vector is nonzero");
        Self { dim_s, dim_e, vector }
    }

    pub fn dim_s(&self) -> usize {
        self.dim_s
    }

    pub fn dim_e(&self) -> usize {
        self.dim_e
    }

    pub fn vector(&self) -> &StateVector {
        &self.vector
    }

    /// Coefficients `c_ij` of `Σ c_ij |i⟩|j⟩` as a `dim_s × dim_e` matrix.
    pub fn coefficient_matrix(&self) -> ComplexMatrix {
        ComplexMatrix::new(self.dim_s, self.dim_e, self.vector.amplitudes().to_vec())
            .expect("shape checked at construction")
    }

    /// `(I ⊗ U_E)|ψ⟩`.
    pub fn apply_environment(&self, u_e: &ComplexMatrix) -> Result<Self> {
        if u_e.rows() != self.dim_e || u_e.cols() != self.dim_e {
            return Err(Error::DimensionMismatch(format!(
                "environment operator is {}x{}, environment has dimension {}",
                u_e.rows(),
                u_e.cols(),
                self.dim_e
            )));
        }
        let c = self.coefficient_matrix().matmul(&u_e.transpose());
        let vector = StateVector::normalized(c.data().to_vec())?;
        Self::new(self.dim_s, self.dim_e, vector)
    }

    /// Embeds the environment into a larger space by zero padding.
    pub fn pad_environment(&self, dim_e: usize) -> Result<Self> {
        if dim_e < self.dim_e {
            return Err(Error::DimensionMismatch(format!(
                "cannot pad environment of dimension {} down to {dim_e}",
                self.dim_e
            )));
        }
        let mut amps = vec![ZERO; self.dim_s * dim_e];
        for i in 0..self.dim_s {
            for j in 0..self.dim_e {
                amps[i * dim_e + j] = self.vector.amplitudes()[i * self.dim_e + j];
            }
        }
        Self::new(self.dim_s, dim_e, StateVector::new(amps)?)
    }

    pub fn distance_up_to_phase(&self, other: &Self) -> f64 {
        self.vector.distance_up_to_phase(&other.vector)
    }
}

/// Wire format: the coefficient matrix in the linalg schema plus the factor
/// dimensions; amplitude of `|i⟩|j⟩` sits at `re[i][j] + i·im[i][j]`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BipartiteJson {
    pub dim_s: usize,
    pub dim_e: usize,
    #[serde(default)]
    pub rows: Option<usize>,
    #[serde(default)]
    pub cols: Option<usize>,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl TryFrom<BipartiteJson> for BipartiteState {
    type Error = Error;

    fn try_from(j: BipartiteJson) -> Result<Self> {
        if j.rows.is_some_and(|r| r != j.dim_s) || j.cols.is_some_and(|c| c != j.dim_e) {
            return Err(Error::Shape("rows/cols must equal dim_s/dim_e".into()));
        }
        let m = ComplexMatrix::try_from(linalg::MatrixJson { rows: j.dim_s, cols: j.dim_e, re: j.re, im: j.im })?;
        Self::new(j.dim_s, j.dim_e, StateVector::new(m.data().to_vec())?)
    }
}

impl From<BipartiteState> for BipartiteJson {
    fn from(b: BipartiteState) -> Self {
        let m = linalg::MatrixJson::from(b.coefficient_matrix());
        BipartiteJson { dim_s: b.dim_s, dim_e: b.dim_e, rows: Some(m.rows), cols: Some(m.cols), re: m.re, im: m.im }
    }
}

/// Reduced state of one factor: partial trace of `|ψ⟩⟨ψ|` over the other.
pub fn reduced_density(psi: &BipartiteState, keep: Factor) -> DensityMatrix {
    let full = psi.vector.projector();
    let m = partial_trace(&full, psi.dim_s, psi.dim_e, keep).expect("dimensions checked");
    DensityMatrix { matrix: m.hermitian_part() }
}

#[derive(Clone, Debug)]
pub struct SchmidtDecomposition {
    /// Nonnegative, descending; length `min(dim_s, dim_e)`.
    pub coefficients: Vec<f64>,
    pub s_basis: Vec<StateVector>,
    pub e_basis: Vec<StateVector>,
}

impl SchmidtDecomposition {
    pub fn rank(&self) -> usize {
        self.coefficients.iter().filter(|&&a| a * a >= RANK_THRESHOLD).count()
    }

    /// `Σ_k e^{iφ_k} α_k |s_k⟩|ε_k⟩`, where missing phases count as zero.
    pub fn with_phases(&self, phases: &[f64]) -> BipartiteState {
        let dim_s = self.s_basis[0].dim();
        let dim_e = self.e_basis[0].dim();
        let mut amps = vec![ZERO; dim_s * dim_e];
        for (k, &alpha) in self.coefficients.iter().enumerate() {
            let phase = C64::from_polar(1.0, phases.get(k).copied().unwrap_or(0.0));
            let s = self.s_basis[k].amplitudes();
            let e = self.e_basis[k].amplitudes();
            for i in 0..dim_s {
                for j in 0..dim_e {
                    amps[i * dim_e + j] += phase * alpha * s[i] * e[j];
                }
            }
        }
        let vector = StateVector::normalized(amps).expect("Schmidt sum has unit norm");
        BipartiteState { dim_s, dim_e, vector }
    }

    pub fn reconstruct(&self) -> BipartiteState {
        self.with_phases(&[])
    }
}

/// Schmidt form from the spectrum of the system's reduced state. Degenerate
/// clusters keep the eigensolver's deterministic index order.
pub fn schmidt_decompose(psi: &BipartiteState) -> SchmidtDecomposition {
    let (ds, de) = (psi.dim_s, psi.dim_e);
    let eig = reduced_density(psi, Factor::First).spectrum();
    let c = psi.coefficient_matrix();
    let n = ds.min(de);

    let mut coefficients = Vec::with_capacity(n);
    let mut s_vecs = Vec::with_capacity(n);
    let mut e_vecs: Vec<Vec<C64>> = Vec::with_capacity(n);
    for k in 0..n {
        let alpha = eig.values[k].max(0.0).sqrt();
        let s = eig.vector(k);
        coefficients.push(alpha);
        if alpha > SCHMIDT_DIVISION_FLOOR {
            // ε_k = (⟨s_k| ⊗ I)|ψ⟩ / α_k, cleaned against the earlier ε's
            let mut e: Vec<C64> =
                (0..de).map(|j| (0..ds).map(|i| s[i].conj() * c[(i, j)]).sum::<C64>() / alpha).collect();
            for prev in &e_vecs {
                let proj = inner(prev, &e);
                e.iter_mut().zip(prev).for_each(|(x, y)| *x -= proj * y);
            }
            let norm = vec_norm(&e);
            e.iter_mut().for_each(|x| *x /= norm);
            e_vecs.push(e);
        }
        s_vecs.push(s);
    }
    let e_vecs = complete_orthonormal_basis(&e_vecs, de);

    SchmidtDecomposition {
        coefficients,
        s_basis: s_vecs.into_iter().map(to_unit).collect(),
        e_basis: e_vecs.into_iter().take(n).map(to_unit).collect(),
    }
}

fn to_unit(v: Vec<C64>) -> StateVector {
    StateVector::normalized(v).expect("basis vectors are nonzero")
}

/// `Σ_k √λ_k |v_k⟩|k⟩` over the nonzero spectrum, so `dim_e = rank(ρ)`.
pub fn purify(rho: &DensityMatrix) -> BipartiteState {
    let eig = rho.spectrum();
    let ds = rho.dim();
    let rank = eig.values.iter().filter(|&&l| l >= RANK_THRESHOLD).count().max(1);
    let mut amps = vec![ZERO; ds * rank];
    for k in 0..rank {
        let w = eig.values[k].max(0.0).sqrt();
        for (i, v) in eig.vector(k).iter().enumerate() {
            amps[i * rank + k] = v * w;
        }
    }
    let vector = StateVector::normalized(amps).expect("density matrix has positive trace");
    BipartiteState { dim_s: ds, dim_e: rank, vector }
}

fn check_probabilities(ps: &[f64]) -> Result<()> {
    if ps.is_empty() {
        return Err(Error::InvalidProbabilities("empty mixture".into()));
    }
    if let Some(p) = ps.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidProbabilities(format!("probability {p} outside [0, 1]")));
    }
    let sum: f64 = ps.iter().sum();
    if (sum - 1.0).abs() > PROBABILITY_SUM_TOL {
        return Err(Error::InvalidProbabilities(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

/// `Σ p_k ρ_k`.
pub fn mix(components: &[(f64, DensityMatrix)]) -> Result<DensityMatrix> {
    let ps: Vec<f64> = components.iter().map(|(p, _)| *p).collect();
    check_probabilities(&ps)?;
    let dim = components[0].1.dim();
    if components.iter().any(|(_, r)| r.dim() != dim) {
        return Err(Error::DimensionMismatch("mixture components differ in dimension".into()));
    }
    let mut acc = ComplexMatrix::zeros(dim, dim);
    for (p, rho) in components {
        acc = acc.add(&rho.matrix.scale_real(*p));
    }
    DensityMatrix::new(acc)
}

/// One branch of a proper mixture: a bipartite pure state taken with some
/// probability. Nested mixtures are flattened to this single level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub probability: f64,
    pub state: BipartiteState,
}

/// Density matrix of a flattened mixture of pure and improper states.
pub fn mixture_density(components: &[MixtureComponent]) -> Result<DensityMatrix> {
    let parts: Vec<(f64, DensityMatrix)> =
        components.iter().map(|c| (c.probability, reduced_density(&c.state, Factor::First))).collect();
    mix(&parts)
}

pub fn validate_mixture(components: &[MixtureComponent]) -> Result<()> {
    check_probabilities(&components.iter().map(|c| c.probability).collect::<Vec<_>>())?;
    let ds = components[0].state.dim_s();
    if components.iter().any(|c| c.state.dim_s() != ds) {
        return Err(Error::DimensionMismatch("mixture components differ in system dimension".into()));
    }
    Ok(())
}

/// Qubit polarization vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct BlochVector {
    p: [f64; 3],
}

impl BlochVector {
    pub const TOL: f64 = 1e-12;

    pub fn new(p: [f64; 3]) -> Result<Self> {
        let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if !norm.is_finite() || norm > 1.0 + Self::TOL {
            return Err(Error::NonPhysicalBloch(norm));
        }
        Ok(Self { p })
    }

    pub fn zero() -> Self {
        Self { p: [0.0; 3] }
    }

    /// `±e_axis`, axis 0..3 for x, y, z.
    pub fn axis(axis: usize, sign: f64) -> Self {
        let mut p = [0.0; 3];
        p[axis] = sign.signum();
        Self { p }
    }

    pub fn components(&self) -> [f64; 3] {
        self.p
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.p.iter().zip(other.p).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.p.iter().zip(other.p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    /// Uniform in the unit ball.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let p = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            if let Ok(b) = Self::new(p) {
                return b;
            }
        }
    }
}

impl TryFrom<[f64; 3]> for BlochVector {
    type Error = Error;

    fn try_from(p: [f64; 3]) -> Result<Self> {
        Self::new(p)
    }
}

impl From<BlochVector> for [f64; 3] {
    fn from(b: BlochVector) -> Self {
        b.p
    }
}

/// `ρ = I/2 + ½(p_x σ_x + p_y σ_y + p_z σ_z)`
pub fn bloch_to_density(p: &BlochVector) -> DensityMatrix {
    let mut m = ComplexMatrix::real_diag(&[0.5, 0.5]);
    for (sigma, pi) in paulis().iter().zip(p.p) {
        m = m.add(&sigma.scale_real(0.5 * pi));
    }
    DensityMatrix { matrix: m }
}

/// `p_i = Tr(ρ σ_i)`. Lengths within the density tolerance of 1 are clamped.
pub fn density_to_bloch(rho: &DensityMatrix) -> Result<BlochVector> {
    if rho.dim() != 2 {
        return Err(Error::DimensionMismatch(format!("Bloch vectors describe qubits, got dimension {}", rho.dim())));
    }
    let mut p = paulis().map(|s| rho.matrix.matmul(&s).trace().re);
    let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if norm > 1.0 {
        if norm > 1.0 + 4.0 * DENSITY_TOL {
            return Err(Error::NonPhysicalBloch(norm));
        }
        p.iter_mut().for_each(|x| *x /= norm);
    }
    BlochVector::new(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedState {
    BellPhi,
    Singlet,
    Triplet0,
    Up,
    Down,
    Left,
    Right,
}

impl NamedState {
    pub const ALL: [NamedState; 7] = [
        NamedState::BellPhi,
        NamedState::Singlet,
        NamedState::Triplet0,
        NamedState::Up,
        NamedState::Down,
        NamedState::Left,
        NamedState::Right,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NamedState::BellPhi => "bell_phi",
            NamedState::Singlet => "singlet",
            NamedState::Triplet0 => "triplet0",
            NamedState::Up => "up",
            NamedState::Down => "down",
            NamedState::Left => "left",
            NamedState::Right => "right",
        }
    }
}

impl fmt::Display for NamedState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NamedState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::OutOfRange { what: "state name", detail: format!("unknown state {s:?}") })
    }
}

/// Exact amplitude tables. Two-qubit states are `2 × 2` bipartite states;
/// single-qubit states have `dim_e = 1`.
pub fn named_state(name: NamedState) -> BipartiteState {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let r = |x: f64| C64::new(x, 0.0);
    let (dim_e, amps) = match name {
        NamedState::BellPhi => (2, vec![r(h), ZERO, ZERO, r(h)]),
        NamedState::Singlet => (2, vec![ZERO, r(h), r(-h), ZERO]),
        NamedState::Triplet0 => (2, vec![ZERO, r(h), r(h), ZERO]),
        NamedState::Up => (1, vec![ONE, ZERO]),
        NamedState::Down => (1, vec![ZERO, ONE]),
        NamedState::Left => (1, vec![r(h), r(-h)]),
        NamedState::Right => (1, vec![r(h), r(h)]),
    };
    let vector = StateVector::new(amps).expect("tabulated states are normalized");
    BipartiteState::new(2, dim_e, vector).expect("tabulated dimensions agree")
}

/// `Û_E = Σ_k e^{−iφ_k}|ε_k⟩⟨ε_k|`, extended by the identity on the
/// orthogonal complement of the given vectors.
pub fn envariance_unitary(phases: &[f64], e_basis: &[StateVector]) -> Result<ComplexMatrix> {
    if phases.len() != e_basis.len() {
        return Err(Error::DimensionMismatch(format!("{} phases for {} basis vectors", phases.len(), e_basis.len())));
    }
    let Some(first) = e_basis.first() else {
        return Err(Error::Shape("empty environment basis".into()));
    };
    let dim = first.dim();
    if e_basis.len() > dim || e_basis.iter().any(|v| v.dim() != dim) {
        return Err(Error::DimensionMismatch("basis vectors do not fit one space".into()));
    }
    let raw: Vec<Vec<C64>> = e_basis.iter().map(|v| v.amplitudes().to_vec()).collect();
    let dev = orthonormality_deviation(&raw);
    if dev > DENSITY_TOL {
        return Err(Error::NotOrthonormal(dev));
    }
    let mut u = ComplexMatrix::identity(dim);
    for (phi, e) in phases.iter().zip(&raw) {
        let factor = C64::from_polar(1.0, -phi) - ONE;
        u = u.add(&ComplexMatrix::outer(e, e).scale(factor));
    }
    Ok(u)
}
