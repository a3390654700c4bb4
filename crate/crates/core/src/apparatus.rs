//! Black-box measuring devices.
//!
//! An [`Apparatus`] couples the measured system to a fresh ancilla prepared in
//! `ancilla_init`, applies a joint unitary, and reads a pointer through a
//! complete set of orthogonal projectors. The trace rule is applied only at
//! that pointer readout; everything before it is unitary evolution. A new
//! ancilla is built for every measurement, so the device keeps no memory of
//! earlier particles.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, inner, orthonormality_deviation, tensor_product, ComplexMatrix, StateVector, C64, ZERO};
use crate::seeding::{derive_rng, rng_from_seed};
use crate::states::{BipartiteState, DensityMatrix};

/// Unitarity and projector tolerance for [`Apparatus`].
pub const APPARATUS_TOL: f64 = 1e-10;

/// Hermiticity, positivity and completeness tolerance for [`Povm`].
pub const POVM_TOL: f64 = 1e-9;

/// Draws per independently seeded sampling block.
pub const SAMPLE_BLOCK: u64 = 1 << 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ApparatusJson", into = "ApparatusJson")]
pub struct Apparatus {
    dim_system: usize,
    dim_ancilla: usize,
    ancilla_init: StateVector,
    joint_unitary: ComplexMatrix,
    pointer_projectors: Vec<ComplexMatrix>,
    outcome_values: Vec<f64>,
}

/// Wire format of an [`Apparatus`]. Joint indices put the system factor first.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApparatusJson {
    pub dim_system: usize,
    pub dim_ancilla: usize,
    pub ancilla_init: StateVector,
    pub joint_unitary: ComplexMatrix,
    pub pointer_projectors: Vec<ComplexMatrix>,
    pub outcome_values: Vec<f64>,
}

impl TryFrom<ApparatusJson> for Apparatus {
    type Error = Error;

    fn try_from(j: ApparatusJson) -> Result<Self> {
        Apparatus::new(
            j.dim_system,
            j.dim_ancilla,
            j.ancilla_init,
            j.joint_unitary,
            j.pointer_projectors,
            j.outcome_values,
        )
    }
}

impl From<Apparatus> for ApparatusJson {
    fn from(a: Apparatus) -> Self {
        ApparatusJson {
            dim_system: a.dim_system,
            dim_ancilla: a.dim_ancilla,
            ancilla_init: a.ancilla_init,
            joint_unitary: a.joint_unitary,
            pointer_projectors: a.pointer_projectors,
            outcome_values: a.outcome_values,
        }
    }
}

impl Apparatus {
    pub fn new(
        dim_system: usize,
        dim_ancilla: usize,
        ancilla_init: StateVector,
        joint_unitary: ComplexMatrix,
        pointer_projectors: Vec<ComplexMatrix>,
        outcome_values: Vec<f64>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidApparatus(msg));
        if dim_system == 0 || dim_ancilla == 0 {
            return bad("dimensions must be positive".into());
        }
        let n = dim_system * dim_ancilla;
        if ancilla_init.dim() != dim_ancilla {
            return bad(format!("ancilla state has dimension {}", ancilla_init.dim()));
        }
        if joint_unitary.rows() != n || joint_unitary.cols() != n {
            return bad(format!("joint unitary must be {n}x{n}"));
        }
        let dev = joint_unitary.unitarity_deviation();
        if dev > APPARATUS_TOL {
            return bad(format!("joint unitary deviates from unitarity by {dev:e}"));
        }
        if pointer_projectors.is_empty() {
            return bad("no pointer projectors".into());
        }
        if pointer_projectors.len() != outcome_values.len() {
            return bad(format!("{} projectors but {} outcome values", pointer_projectors.len(), outcome_values.len()));
        }
        if outcome_values.iter().any(|x| !x.is_finite()) {
            return bad("outcome values must be finite".into());
        }
        let mut sum = ComplexMatrix::zeros(n, n);
        for (k, p) in pointer_projectors.iter().enumerate() {
            if p.rows() != n || p.cols() != n {
                return bad(format!("projector {k} must be {n}x{n}"));
            }
            if p.hermitian_deviation() > APPARATUS_TOL || p.matmul(p).max_abs_diff(p) > APPARATUS_TOL {
                return bad(format!("projector {k} is not an orthogonal projector"));
            }
            for (l, q) in pointer_projectors.iter().enumerate().skip(k + 1) {
                if p.matmul(q).max_abs_diff(&ComplexMatrix::zeros(n, n)) > APPARATUS_TOL {
                    return bad(format!("projectors {k} and {l} are not orthogonal"));
                }
            }
            sum = sum.add(p);
        }
        if sum.max_abs_diff(&ComplexMatrix::identity(n)) > APPARATUS_TOL {
            return bad("projectors do not sum to the identity".into());
        }
        Ok(Self { dim_system, dim_ancilla, ancilla_init, joint_unitary, pointer_projectors, outcome_values })
    }

    /// Projective measurement in the orthonormal basis `basis` with no
    /// ancilla: the unitary rotates `basis[k]` onto `|k⟩` and the pointer reads
    /// the computational basis.
    pub fn projective(basis: &[StateVector], outcome_values: Vec<f64>) -> Result<Self> {
        let dim = basis.len();
        if dim == 0 || basis.iter().any(|b| b.dim() != dim) {
            return Err(Error::InvalidApparatus("basis must span its space".into()));
        }
        let raw: Vec<Vec<C64>> = basis.iter().map(|b| b.amplitudes().to_vec()).collect();
        let dev = orthonormality_deviation(&raw);
        if dev > APPARATUS_TOL {
            return Err(Error::NotOrthonormal(dev));
        }
        // rows of U are ⟨b_k|
        let u = ComplexMatrix::from_columns(&raw).adjoint();
        let projectors = (0..dim).map(|k| StateVector::basis(dim, k).projector()).collect();
        Self::new(dim, 1, StateVector::basis(1, 0), u, projectors, outcome_values)
    }

    /// Qubit meter along a Pauli axis (0, 1, 2 for x, y, z), values ±1.
    pub fn pauli_meter(axis: usize) -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v = |a: C64, b: C64| StateVector::new(vec![a, b]).unwrap();
        let r = |x: f64| C64::new(x, 0.0);
        let basis = match axis {
            0 => [v(r(h), r(h)), v(r(h), r(-h))],
            1 => [v(r(h), C64::new(0.0, h)), v(r(h), C64::new(0.0, -h))],
            2 => [StateVector::basis(2, 0), StateVector::basis(2, 1)],
            _ => panic!("Pauli axis must be 0, 1 or 2"),
        };
        Self::projective(&basis, vec![1.0, -1.0]).expect("Pauli eigenbases are orthonormal")
    }

    /// The single-outcome device: always reads `value`.
    pub fn trivial(dim_system: usize, value: f64) -> Self {
        Self::new(
            dim_system,
            1,
            StateVector::basis(1, 0),
            ComplexMatrix::identity(dim_system),
            vec![ComplexMatrix::identity(dim_system)],
            vec![value],
        )
        .expect("identity apparatus is valid")
    }

    pub fn dim_system(&self) -> usize {
        self.dim_system
    }

    pub fn dim_ancilla(&self) -> usize {
        self.dim_ancilla
    }

    pub fn joint_dim(&self) -> usize {
        self.dim_system * self.dim_ancilla
    }

    pub fn ancilla_init(&self) -> &StateVector {
        &self.ancilla_init
    }

    pub fn joint_unitary(&self) -> &ComplexMatrix {
        &self.joint_unitary
    }

    pub fn pointer_projectors(&self) -> &[ComplexMatrix] {
        &self.pointer_projectors
    }

    pub fn outcome_values(&self) -> &[f64] {
        &self.outcome_values
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcome_values.len()
    }

    /// Same dilation, new outcome scale.
    pub fn with_outcome_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.n_outcomes() {
            return Err(Error::InvalidApparatus(format!("{} values for {} outcomes", values.len(), self.n_outcomes())));
        }
        Ok(Self { outcome_values: values, ..self.clone() })
    }

    /// The device acting on `system ⊗ environment`, touching only the system.
    pub fn with_environment(&self, dim_e: usize) -> Self {
        let (ds, da) = (self.dim_system, self.dim_ancilla);
        let lift = |m: &ComplexMatrix| {
            ComplexMatrix::from_fn(ds * dim_e * da, ds * dim_e * da, |r, c| {
                let (s, e, a) = (r / (dim_e * da), (r / da) % dim_e, r % da);
                let (s2, e2, a2) = (c / (dim_e * da), (c / da) % dim_e, c % da);
                if e == e2 {
                    m[(s * da + a, s2 * da + a2)]
                } else {
                    ZERO
                }
            })
        };
        Self {
            dim_system: ds * dim_e,
            dim_ancilla: da,
            ancilla_init: self.ancilla_init.clone(),
            joint_unitary: lift(&self.joint_unitary),
            pointer_projectors: self.pointer_projectors.iter().map(lift).collect(),
            outcome_values: self.outcome_values.clone(),
        }
    }

    /// `Re Tr(Π_k U (x ⊗ |a⟩⟨a|) U†)` for every outcome: the readout rule
    /// extended linearly to any system operator `x`.
    pub fn outcome_functional(&self, x: &ComplexMatrix) -> Result<Vec<f64>> {
        if x.rows() != self.dim_system || x.cols() != self.dim_system {
            return Err(Error::DimensionMismatch(format!(
                "apparatus measures dimension {}, operator is {}x{}",
                self.dim_system,
                x.rows(),
                x.cols()
            )));
        }
        let joint = tensor_product(x, &self.ancilla_init.projector())?;
        let evolved = joint.conjugate_by(&self.joint_unitary);
        Ok(self.pointer_projectors.iter().map(|p| p.matmul(&evolved).trace().re).collect())
    }

    /// Outcome probabilities for a pure system-environment state, computed on
    /// the state vector without forming the reduced density matrix.
    pub fn distribution_on_pure(&self, psi: &BipartiteState) -> Result<Vec<f64>> {
        if psi.dim_s() != self.dim_system {
            return Err(Error::DimensionMismatch(format!(
                "apparatus measures dimension {}, state has system dimension {}",
                self.dim_system,
                psi.dim_s()
            )));
        }
        let c = psi.coefficient_matrix();
        let anc = self.ancilla_init.amplitudes();
        let mut probs = vec![0.0; self.n_outcomes()];
        for e in 0..psi.dim_e() {
            let joint: Vec<C64> = (0..self.dim_system)
                .flat_map(|s| {
                    let cs = c[(s, e)];
                    anc.iter().map(move |&a| cs * a)
                })
                .collect();
            let out = self.joint_unitary.mul_vec(&joint);
            for (p, proj) in probs.iter_mut().zip(&self.pointer_projectors) {
                *p += inner(&out, &proj.mul_vec(&out)).re;
            }
        }
        Ok(probs)
    }

    pub fn expected_value_on_pure(&self, psi: &BipartiteState) -> Result<f64> {
        Ok(weighted(&self.outcome_values, &self.distribution_on_pure(psi)?))
    }
}

fn weighted(values: &[f64], probs: &[f64]) -> f64 {
    values.iter().zip(probs).map(|(x, p)| x * p).sum()
}

/// `P_k = Tr(Π_k U (ρ ⊗ |a⟩⟨a|) U† Π_k)`.
pub fn outcome_distribution(app: &Apparatus, rho: &DensityMatrix) -> Result<Vec<f64>> {
    app.outcome_functional(rho.matrix())
}

/// `F(ρ) = Σ_k x_k P_k`.
pub fn expected_value(app: &Apparatus, rho: &DensityMatrix) -> Result<f64> {
    Ok(weighted(&app.outcome_values, &outcome_distribution(app, rho)?))
}

/// Variance of the outcome value under `rho`.
pub fn outcome_variance(app: &Apparatus, rho: &DensityMatrix) -> Result<f64> {
    let p = outcome_distribution(app, rho)?;
    let mean = weighted(&app.outcome_values, &p);
    let second: f64 = app.outcome_values.iter().zip(&p).map(|(x, q)| x * x * q).sum();
    Ok((second - mean * mean).max(0.0))
}

/// Same device, reporting 1 when outcome `index` occurs and 0 otherwise.
pub fn indicator_apparatus(app: &Apparatus, index: usize) -> Result<Apparatus> {
    if index >= app.n_outcomes() {
        return Err(Error::OutOfRange {
            what: "outcome index",
            detail: format!("{index} not below {}", app.n_outcomes()),
        });
    }
    let values = (0..app.n_outcomes()).map(|k| if k == index { 1.0 } else { 0.0 }).collect();
    app.with_outcome_values(values)
}

/// Random black box: Haar joint unitary, ancilla in `|0⟩`, pointer projectors
/// partitioning a second Haar basis into `n_outcomes` nonempty blocks, and
/// outcome values uniform in `[-1, 1]`.
pub fn random_apparatus(dim_system: usize, dim_ancilla: usize, n_outcomes: usize, seed: u64) -> Result<Apparatus> {
    random_apparatus_with(dim_system, dim_ancilla, n_outcomes, &mut rng_from_seed(seed))
}

pub fn random_apparatus_with<R: Rng + ?Sized>(
    dim_system: usize,
    dim_ancilla: usize,
    n_outcomes: usize,
    rng: &mut R,
) -> Result<Apparatus> {
    if dim_system == 0 || dim_ancilla == 0 {
        return Err(Error::InvalidApparatus("dimensions must be positive".into()));
    }
    let n = dim_system * dim_ancilla;
    if n_outcomes == 0 || n_outcomes > n {
        return Err(Error::OutOfRange { what: "outcome count", detail: format!("{n_outcomes} not in 1..={n}") });
    }
    let u = linalg::random_unitary_with(n, rng);
    let pointer_basis = linalg::random_unitary_with(n, rng);
    let mut sizes = vec![1usize; n_outcomes];
    for _ in n_outcomes..n {
        sizes[rng.random_range(0..n_outcomes)] += 1;
    }
    let mut projectors = Vec::with_capacity(n_outcomes);
    let mut col = 0;
    for size in sizes {
        let mut p = ComplexMatrix::zeros(n, n);
        for j in col..col + size {
            let w = pointer_basis.column(j);
            p = p.add(&ComplexMatrix::outer(&w, &w));
        }
        projectors.push(p);
        col += size;
    }
    let values = (0..n_outcomes).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Apparatus::new(dim_system, dim_ancilla, StateVector::basis(dim_ancilla, 0), u, projectors, values)
}

/// Positive operators summing to the identity, one per outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Povm {
    elements: Vec<ComplexMatrix>,
    outcome_values: Vec<f64>,
}

impl Povm {
    pub fn new(elements: Vec<ComplexMatrix>, outcome_values: Vec<f64>) -> Result<Self> {
        let Some(first) = elements.first() else {
            return Err(Error::InvalidPovm("no elements".into()));
        };
        if elements.len() != outcome_values.len() {
            return Err(Error::InvalidPovm("element and value counts differ".into()));
        }
        let d = first.rows();
        let mut sum = ComplexMatrix::zeros(d, d);
        for (k, m) in elements.iter().enumerate() {
            if m.rows() != d || m.cols() != d {
                return Err(Error::InvalidPovm(format!("element {k} has the wrong shape")));
            }
            let dev = m.hermitian_deviation();
            if dev > POVM_TOL {
                return Err(Error::InvalidPovm(format!("element {k} not Hermitian ({dev:e})")));
            }
            let min = linalg::eig_hermitian(&m.hermitian_part())?.min_value();
            if min < -POVM_TOL {
                return Err(Error::InvalidPovm(format!("element {k} has eigenvalue {min:e}")));
            }
            sum = sum.add(m);
        }
        let dev = sum.max_abs_diff(&ComplexMatrix::identity(d));
        if dev > POVM_TOL {
            return Err(Error::InvalidPovm(format!("elements sum to identity only within {dev:e}")));
        }
        Ok(Self { elements, outcome_values })
    }

    pub fn elements(&self) -> &[ComplexMatrix] {
        &self.elements
    }

    pub fn outcome_values(&self) -> &[f64] {
        &self.outcome_values
    }

    pub fn dim(&self) -> usize {
        self.elements[0].rows()
    }

    /// `Tr(ρ M_k)` for each element.
    pub fn probabilities(&self, rho: &DensityMatrix) -> Result<Vec<f64>> {
        if rho.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "POVM acts on dimension {}, state has {}",
                self.dim(),
                rho.dim()
            )));
        }
        Ok(self.elements.iter().map(|m| rho.matrix().matmul(m).trace().re).collect())
    }

    pub fn expected_value(&self, rho: &DensityMatrix) -> Result<f64> {
        Ok(weighted(&self.outcome_values, &self.probabilities(rho)?))
    }
}

/// Orthonormal (Frobenius) basis of Hermitian `d × d` matrices: `E_jj`,
/// `(E_jk + E_kj)/√2` and `i(E_jk − E_kj)/√2` for `j < k`.
pub fn hermitian_basis(d: usize) -> Vec<ComplexMatrix> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut basis = Vec::with_capacity(d * d);
    for j in 0..d {
        let mut m = ComplexMatrix::zeros(d, d);
        m[(j, j)] = C64::new(1.0, 0.0);
        basis.push(m);
    }
    for j in 0..d {
        for k in j + 1..d {
            let mut sym = ComplexMatrix::zeros(d, d);
            sym[(j, k)] = C64::new(h, 0.0);
            sym[(k, j)] = C64::new(h, 0.0);
            basis.push(sym);
            let mut anti = ComplexMatrix::zeros(d, d);
            anti[(j, k)] = C64::new(0.0, h);
            anti[(k, j)] = C64::new(0.0, -h);
            basis.push(anti);
        }
    }
    basis
}

/// Recovers each outcome's operator by evaluating the readout on a Hermitian
/// operator basis and inverting: `M_k = Σ_b P_k(B_b) B_b`.
pub fn extract_povm(app: &Apparatus) -> Result<Povm> {
    let d = app.dim_system();
    let mut elements = vec![ComplexMatrix::zeros(d, d); app.n_outcomes()];
    for b in hermitian_basis(d) {
        let p = app.outcome_functional(&b)?;
        for (m, pk) in elements.iter_mut().zip(p) {
            *m = m.add(&b.scale_real(pk));
        }
    }
    Povm::new(elements, app.outcome_values().to_vec())
}

fn inverse_cdf_draw(cdf: &[f64], u: f64) -> usize {
    let total = *cdf.last().unwrap();
    let target = u * total;
    cdf.iter().position(|&c| target < c).unwrap_or_else(|| {
        // u·total rounded onto the last edge: take the last outcome with mass
        cdf.windows(2).rposition(|w| w[1] > w[0]).map(|i| i + 1).unwrap_or(0)
    })
}

/// Histogram of `n` independent draws from the outcome distribution.
///
/// Draws are split into blocks of [`SAMPLE_BLOCK`]; block `b` uses the stream
/// `(seed, "sample", b)`, so the result does not depend on thread count.
pub fn sample_outcomes(app: &Apparatus, rho: &DensityMatrix, n: u64, seed: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::OutOfRange { what: "sample count", detail: "n must be at least 1".into() });
    }
    let probs = outcome_distribution(app, rho)?;
    let cdf: Vec<f64> = probs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.max(0.0);
            Some(*acc)
        })
        .collect();
    let k = probs.len();
    let blocks = n.div_ceil(SAMPLE_BLOCK);
    let partials: Vec<Vec<u64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let count = SAMPLE_BLOCK.min(n - b * SAMPLE_BLOCK);
            let mut rng = derive_rng(seed, "sample", b);
            let mut hist = vec![0u64; k];
            for _ in 0..count {
                hist[inverse_cdf_draw(&cdf, rng.random::<f64>())] += 1;
            }
            hist
        })
        .collect();
    Ok(partials.into_iter().fold(vec![0u64; k], |mut acc, h| {
        acc.iter_mut().zip(h).for_each(|(a, b)| *a += b);
        acc
    }))
}

/// `outcome_index,count` rows with a header line.
pub fn histogram_csv(hist: &[u64]) -> String {
    let mut out = String::from("outcome_index,count\n");
    for (k, c) in hist.iter().enumerate() {
        out.push_str(&format!("{k},{c}\n"));
    }
    out
}

/// Sample mean of the outcome value next to the exact expectation and the
/// exact standard error `sqrt(Var/n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledEstimate {
    pub n: u64,
    pub mean: f64,
    pub exact: f64,
    pub sigma: f64,
}

impl SampledEstimate {
    /// `|mean − exact|` in units of `sigma` (0 when both vanish).
    pub fn z_score(&self) -> f64 {
        let d = (self.mean - self.exact).abs();
        if self.sigma > 0.0 {
            d / self.sigma
        } else if d < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

pub fn sampled_expectation(app: &Apparatus, rho: &DensityMatrix, n: u64, seed: u64) -> Result<SampledEstimate> {
    let hist = sample_outcomes(app, rho, n, seed)?;
    let mean = hist.iter().zip(app.outcome_values()).map(|(&c, x)| c as f64 * x).sum::<f64>() / n as f64;
    let exact = expected_value(app, rho)?;
    let sigma = (outcome_variance(app, rho)? / n as f64).sqrt();
    Ok(SampledEstimate { n, mean, exact, sigma })
}

/// Projective qubit meter in an orthonormal basis `{|0⟩, |1⟩}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeterMu {
    basis: [StateVector; 2],
}

impl MeterMu {
    pub const TOL: f64 = 1e-12;

    pub fn new(zero: StateVector, one: StateVector) -> Result<Self> {
        if zero.dim() != 2 || one.dim() != 2 {
            return Err(Error::DimensionMismatch("meter basis vectors must be qubits".into()));
        }
        let dev = orthonormality_deviation(&[zero.amplitudes().to_vec(), one.amplitudes().to_vec()]);
        if dev > Self::TOL {
            return Err(Error::NotOrthonormal(dev));
        }
        Ok(Self { basis: [zero, one] })
    }

    pub fn computational() -> Self {
        Self { basis: [StateVector::basis(2, 0), StateVector::basis(2, 1)] }
    }

    pub fn basis(&self) -> &[StateVector; 2] {
        &self.basis
    }

    pub fn apparatus(&self) -> Apparatus {
        Apparatus::projective(&self.basis, vec![0.0, 1.0]).expect("meter basis is orthonormal")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Factor;
    use crate::seeding::rng_from_seed;
    use crate::states::{named_state, purify, reduced_density, NamedState};
    use proptest::prelude::*;
    use rand::Rng;

    fn up() -> DensityMatrix {
        reduced_density(&named_state(NamedState::Up), Factor::First)
    }

    fn half() -> DensityMatrix {
        DensityMatrix::maximally_mixed(2)
    }

    /// Independent POVM oracle from the dilation itself:
    /// `M_k = (I ⊗ ⟨a|) U† Π_k U (I ⊗ |a⟩)`.
    fn dilation_povm(app: &Apparatus) -> Vec<ComplexMatrix> {
        let (ds, da) = (app.dim_system(), app.dim_ancilla());
        let a = app.ancilla_init().amplitudes();
        app.pointer_projectors()
            .iter()
            .map(|p| {
                let e = app.joint_unitary().adjoint().matmul(p).matmul(app.joint_unitary());
                ComplexMatrix::from_fn(ds, ds, |i, j| {
                    let mut z = ZERO;
                    for x in 0..da {
                        for y in 0..da {
                            z += a[x].conj() * e[(i * da + x, j * da + y)] * a[y];
                        }
                    }
                    z
                })
            })
            .collect()
    }

    #[test]
    fn sigma_z_meter_distributions() {
        let z = Apparatus::pauli_meter(2);
        let p = outcome_distribution(&z, &up()).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1].abs() < 1e-15);
        let p = outcome_distribution(&z, &half()).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        assert!((expected_value(&z, &up()).unwrap() - 1.0).abs() < 1e-15);
        assert!(expected_value(&z, &half()).unwrap().abs() < 1e-15);
    }

    #[test]
    fn pauli_meters_read_their_eigenstates() {
        for (axis, plus) in [(0, NamedState::Right), (2, NamedState::Up)] {
            let rho = reduced_density(&named_state(plus), Factor::First);
            assert!((expected_value(&Apparatus::pauli_meter(axis), &rho).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_outcome_apparatus_is_certain() {
        let app = random_apparatus(3, 2, 1, 4).unwrap();
        let rho = DensityMatrix::random(3, 2, &mut rng_from_seed(1)).unwrap();
        let p = outcome_distribution(&app, &rho).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert_eq!(sample_outcomes(&app, &rho, 1000, 3).unwrap(), vec![1000]);
    }

    #[test]
    fn random_apparatus_is_deterministic_and_valid() {
        let a = random_apparatus(3, 2, 4, 99).unwrap();
        let b = random_apparatus(3, 2, 4, 99).unwrap();
        assert_eq!(a, b);
        for seed in 0..20 {
            let app = random_apparatus(1 + seed as usize % 4, 1 + seed as usize % 3, 1, seed).unwrap();
            let text = serde_json::to_string(&app).unwrap();
            let back: Apparatus = serde_json::from_str(&text).unwrap();
            assert_eq!(back, app);
        }
        assert!(matches!(random_apparatus(2, 2, 5, 0), Err(Error::OutOfRange { .. })));
        assert!(matches!(random_apparatus(2, 2, 0, 0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn apparatus_validation_rejects_broken_devices() {
        let id = ComplexMatrix::identity(2);
        let p0 = StateVector::basis(2, 0).projector();
        let anc = StateVector::basis(1, 0);
        assert!(Apparatus::new(2, 1, anc.clone(), id.clone(), vec![p0.clone()], vec![1.0]).is_err());
        assert!(Apparatus::new(2, 1, anc.clone(), id.scale_real(2.0), vec![id.clone()], vec![1.0]).is_err());
        assert!(Apparatus::new(2, 1, anc.clone(), id.clone(), vec![id.clone()], vec![1.0, 2.0]).is_err());
        assert!(Apparatus::new(2, 1, anc, id.clone(), vec![id.clone(), p0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let z = Apparatus::pauli_meter(2);
        let rho = DensityMatrix::maximally_mixed(3);
        assert!(matches!(outcome_distribution(&z, &rho), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn indicator_expectations_are_probabilities() {
        let z = Apparatus::pauli_meter(2);
        let ind = indicator_apparatus(&z, 0).unwrap();
        assert!((expected_value(&ind, &up()).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(indicator_apparatus(&z, 2), Err(Error::OutOfRange { .. })));

        let mut rng = rng_from_seed(12);
        for _ in 0..50 {
            let ds = rng.random_range(1..=4);
            let da = rng.random_range(1..=3);
            let k = rng.random_range(1..=(ds * da).min(4));
            let app = random_apparatus_with(ds, da, k, &mut rng).unwrap();
            let rho = DensityMatrix::random(ds, rng.random_range(1..=ds), &mut rng).unwrap();
            let p = outcome_distribution(&app, &rho).unwrap();
            let mut total = 0.0;
            for (alpha, &p_alpha) in p.iter().enumerate() {
                let e = expected_value(&indicator_apparatus(&app, alpha).unwrap(), &rho).unwrap();
                assert!((e - p_alpha).abs() < 1e-12);
                total += e;
            }
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn povm_of_projective_and_trivial_devices() {
        let povm = extract_povm(&Apparatus::pauli_meter(2)).unwrap();
        assert!(povm.elements()[0].max_abs_diff(&StateVector::basis(2, 0).projector()) < 1e-10);
        assert!(povm.elements()[1].max_abs_diff(&StateVector::basis(2, 1).projector()) < 1e-10);
        let povm = extract_povm(&Apparatus::trivial(3, 1.0)).unwrap();
        assert!(povm.elements()[0].max_abs_diff(&ComplexMatrix::identity(3)) < 1e-12);
    }

    #[test]
    fn extracted_povm_matches_dilation_oracle_and_engine() {
        let app = random_apparatus(3, 2, 4, 2718).unwrap();
        let povm = extract_povm(&app).unwrap();
        for (m, oracle) in povm.elements().iter().zip(dilation_povm(&app)) {
            assert!(m.max_abs_diff(&oracle) < 1e-10);
        }
        let mut rng = rng_from_seed(5);
        for _ in 0..50 {
            let rho = DensityMatrix::random(3, rng.random_range(1..=3), &mut rng).unwrap();
            let engine = outcome_distribution(&app, &rho).unwrap();
            let via_povm = povm.probabilities(&rho).unwrap();
            for (a, b) in engine.iter().zip(&via_povm) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn povm_validation() {
        let half_id = ComplexMatrix::identity(2).scale_real(0.5);
        assert!(Povm::new(vec![half_id.clone(), half_id.clone()], vec![0.0, 1.0]).is_ok());
        assert!(Povm::new(vec![half_id.clone()], vec![0.0]).is_err());
        let neg = ComplexMatrix::real_diag(&[1.5, -0.5]);
        let comp = ComplexMatrix::real_diag(&[-0.5, 1.5]);
        assert!(Povm::new(vec![neg, comp], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn sampling_sigma_z_on_maximally_mixed_is_binomial() {
        let n = 100_000u64;
        let hist = sample_outcomes(&Apparatus::pauli_meter(2), &half(), n, 77).unwrap();
        assert_eq!(hist.iter().sum::<u64>(), n);
        let sigma = (n as f64 / 4.0).sqrt();
        for c in &hist {
            assert!((*c as f64 - n as f64 / 2.0).abs() < 5.0 * sigma, "{hist:?}");
        }
        assert_eq!(hist, sample_outcomes(&Apparatus::pauli_meter(2), &half(), n, 77).unwrap());
        assert_eq!(histogram_csv(&[3, 4]), "outcome_index,count\n0,3\n1,4\n");
        assert!(sample_outcomes(&Apparatus::pauli_meter(2), &half(), 0, 1).is_err());
    }

    #[test]
    fn sampling_is_independent_of_thread_count() {
        let app = random_apparatus(2, 2, 3, 8).unwrap();
        let rho = DensityMatrix::random(2, 2, &mut rng_from_seed(8)).unwrap();
        let multi = sample_outcomes(&app, &rho, 70_000, 1).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| sample_outcomes(&app, &rho, 70_000, 1).unwrap());
        assert_eq!(multi, single);
    }

    #[test]
    fn meter_basis_must_be_orthonormal() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let plus = StateVector::new(vec![C64::new(h, 0.0), C64::new(h, 0.0)]).unwrap();
        assert!(MeterMu::new(StateVector::basis(2, 0), plus).is_err());
        let m = MeterMu::computational();
        let p = outcome_distribution(&m.apparatus(), &up()).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn distribution_depends_only_on_reduced_state() {
        // Two different purifications of the same ρ, fed through the device
        // extended trivially over the environment.
        let mut rng = rng_from_seed(31);
        for _ in 0..20 {
            let app = random_apparatus_with(3, 2, 3, &mut rng).unwrap();
            let rho = DensityMatrix::random(3, 2, &mut rng).unwrap();
            let a = purify(&rho).pad_environment(3).unwrap();
            let u_e = linalg::random_unitary_with(3, &mut rng);
            let b = a.apply_environment(&u_e).unwrap();
            assert!(a.distance_up_to_phase(&b) > 1e-3);
            let ext = app.with_environment(3);
            let pa = outcome_distribution(&ext, &DensityMatrix::from_pure(a.vector())).unwrap();
            let pb = outcome_distribution(&ext, &DensityMatrix::from_pure(b.vector())).unwrap();
            let direct = outcome_distribution(&app, &rho).unwrap();
            let on_vec = app.distribution_on_pure(&b).unwrap();
            for k in 0..3 {
                assert!((pa[k] - pb[k]).abs() < 1e-10);
                assert!((pa[k] - direct[k]).abs() < 1e-10);
                assert!((on_vec[k] - direct[k]).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn outcome_probabilities_are_affine_in_rho(seed in any::<u64>(), ds in 1usize..=4, da in 1usize..=3, k_pick in 0usize..4) {
            let mut rng = rng_from_seed(seed);
            let k = 1 + k_pick % (ds * da).min(4);
            let app = random_apparatus_with(ds, da, k, &mut rng).unwrap();
            let r0 = DensityMatrix::random(ds, rng.random_range(1..=ds), &mut rng).unwrap();
            let r1 = DensityMatrix::random(ds, rng.random_range(1..=ds), &mut rng).unwrap();
            let p0 = outcome_distribution(&app, &r0).unwrap();
            let p1 = outcome_distribution(&app, &r1).unwrap();
            for step in 0..=10 {
                let lambda = step as f64 / 10.0;
                let pl = outcome_distribution(&app, &r0.interpolate(&r1, lambda).unwrap()).unwrap();
                let total: f64 = pl.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-10);
                for i in 0..k {
                    prop_assert!(pl[i] >= -1e-12 && pl[i] <= 1.0 + 1e-12);
                    prop_assert!((pl[i] - (lambda * p1[i] + (1.0 - lambda) * p0[i])).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn extracted_povm_reproduces_engine(seed in any::<u64>(), ds in 1usize..=3, da in 1usize..=2, k_pick in 0usize..4) {
            let mut rng = rng_from_seed(seed);
            let k = 1 + k_pick % (ds * da).min(4);
            let app = random_apparatus_with(ds, da, k, &mut rng).unwrap();
            let povm = extract_povm(&app).unwrap();
            let rho = DensityMatrix::random(ds, rng.random_range(1..=ds), &mut rng).unwrap();
            let a = outcome_distribution(&app, &rho).unwrap();
            let b = povm.probabilities(&rho).unwrap();
            for i in 0..k {
                prop_assert!((a[i] - b[i]).abs() < 1e-9);
            }
        }
    }
}
