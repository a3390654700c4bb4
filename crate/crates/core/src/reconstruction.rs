//! Qubit outcome probabilities as affine forms on the Bloch ball, and the
//! route from a perfectly distinguishing two-branch device to the trace rule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::apparatus::{outcome_distribution, Apparatus};
use crate::error::{Error, Result};
use crate::linalg::{eig_hermitian, ComplexMatrix, StateVector, C64};
use crate::seeding::rng_from_seed;
use crate::states::{bloch_to_density, density_to_bloch, paulis, BlochVector, DensityMatrix};

/// Largest fit residual accepted as exact.
pub const FIT_TOL: f64 = 1e-10;

/// `|a|` at or below this is a constant form.
pub const CONSTANT_FORM_TOL: f64 = 1e-12;

/// Slack on `0 ≤ P ≤ 1` over the Bloch ball.
pub const BOUND_TOL: f64 = 1e-9;

/// Held-out points used to confirm a fit.
pub const HELD_OUT_POINTS: usize = 20;

/// Random states tried by [`verify_born`].
pub const BORN_SAMPLES: usize = 100;

const FIT_SEED: u64 = 0x5eed_b10c;

/// `P(p) = a·p + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AffineJson", into = "AffineJson")]
pub struct AffineForm {
    a: [f64; 3],
    b: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffineJson {
    a: [f64; 3],
    b: f64,
}

impl TryFrom<AffineJson> for AffineForm {
    type Error = Error;

    fn try_from(j: AffineJson) -> Result<Self> {
        AffineForm::new(j.a, j.b)
    }
}

impl From<AffineForm> for AffineJson {
    fn from(f: AffineForm) -> Self {
        AffineJson { a: f.a, b: f.b }
    }
}

impl AffineForm {
    pub fn new(a: [f64; 3], b: f64) -> Result<Self> {
        if a.iter().chain([&b]).any(|x| !x.is_finite()) {
            return Err(Error::ProbabilityBounds("non-finite coefficient".into()));
        }
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        if b - norm < -BOUND_TOL || b + norm > 1.0 + BOUND_TOL {
            return Err(Error::ProbabilityBounds(format!("range [{}, {}] leaves [0, 1]", b - norm, b + norm)));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> [f64; 3] {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn norm_a(&self) -> f64 {
        self.a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn eval(&self, p: &BlochVector) -> f64 {
        let c = p.components();
        self.a.iter().zip(c).map(|(a, x)| a * x).sum::<f64>() + self.b
    }

    pub fn max_value(&self) -> f64 {
        self.b + self.norm_a()
    }

    pub fn min_value(&self) -> f64 {
        self.b - self.norm_a()
    }
}

/// Two-outcome qubit device whose first branch is certain for `psi1` and
/// impossible for the orthogonal state. Branch values are `+1` and `−1`.
pub fn two_branch_apparatus(psi1: &StateVector) -> Result<Apparatus> {
    if psi1.dim() != 2 {
        return Err(Error::DimensionMismatch(format!("two-branch device needs a qubit, got dimension {}", psi1.dim())));
    }
    let [x, y] = [psi1.amplitudes()[0], psi1.amplitudes()[1]];
    let perp = StateVector::new(vec![-y.conj(), x.conj()])?;
    Apparatus::projective(&[psi1.clone(), perp], vec![1.0, -1.0])
}

fn outcome_probability(app: &Apparatus, k: usize, p: &BlochVector) -> Result<f64> {
    Ok(outcome_distribution(app, &bloch_to_density(p))?[k])
}

fn check_qubit_outcome(app: &Apparatus, k: usize) -> Result<()> {
    if app.dim_system() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "affine forms live on the Bloch ball; apparatus measures dimension {}",
            app.dim_system()
        )));
    }
    if k >= app.n_outcomes() {
        return Err(Error::OutOfRange { what: "outcome index", detail: format!("{k} not below {}", app.n_outcomes()) });
    }
    Ok(())
}

/// Largest `|P_k(p) − f(p)|` over `points`.
pub fn fit_residual(app: &Apparatus, k: usize, f: &AffineForm, points: &[BlochVector]) -> Result<f64> {
    check_qubit_outcome(app, k)?;
    points.iter().try_fold(0.0_f64, |acc, p| Ok(acc.max((outcome_probability(app, k, p)? - f.eval(p)).abs())))
}

/// Affine form of outcome `k`, from evaluations at `0, e_x, e_y, e_z`, then
/// confirmed on held-out random points.
pub fn fit_affine(app: &Apparatus, k: usize) -> Result<AffineForm> {
    fit_affine_with(app, k, &mut rng_from_seed(FIT_SEED))
}

pub fn fit_affine_with<R: Rng + ?Sized>(app: &Apparatus, k: usize, rng: &mut R) -> Result<AffineForm> {
    check_qubit_outcome(app, k)?;
    let b = outcome_probability(app, k, &BlochVector::zero())?;
    let mut a = [0.0; 3];
    for (i, ai) in a.iter_mut().enumerate() {
        *ai = outcome_probability(app, k, &BlochVector::axis(i, 1.0))? - b;
    }
    let form = AffineForm::new(a, b)?;
    let held_out: Vec<BlochVector> = (0..HELD_OUT_POINTS).map(|_| BlochVector::random(rng)).collect();
    let residual = fit_residual(app, k, &form, &held_out)?;
    if residual > FIT_TOL {
        return Err(Error::NotAffine(residual));
    }
    Ok(form)
}

/// Maximizer `a/|a|` and minimizer `−a/|a|` over the Bloch ball.
pub fn extremal_polarizations(f: &AffineForm) -> Result<(BlochVector, BlochVector)> {
    let norm = f.norm_a();
    if norm <= CONSTANT_FORM_TOL {
        return Err(Error::ConstantForm(norm));
    }
    let u = f.a.map(|x| x / norm);
    Ok((BlochVector::new(u)?, BlochVector::new(u.map(|x| -x))?))
}

/// `b·I + a_x σ_x + a_y σ_y + a_z σ_z`, so that `Tr(ρM) = P(p(ρ))`.
pub fn affine_to_operator(f: &AffineForm) -> Result<ComplexMatrix> {
    let mut m = ComplexMatrix::identity(2).scale_real(f.b);
    for (ai, s) in f.a.iter().zip(paulis()) {
        m = m.add(&s.scale_real(*ai));
    }
    let eig = eig_hermitian(&m)?;
    if eig.min_value() < -BOUND_TOL || eig.values[0] > 1.0 + BOUND_TOL {
        return Err(Error::ProbabilityBounds(format!(
            "operator eigenvalues [{}, {}] leave [0, 1]",
            eig.min_value(),
            eig.values[0]
        )));
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BornCertificate {
    pub p1: BlochVector,
    pub p2: BlochVector,
    pub psi1: StateVector,
    /// Largest `|P(ρ) − ⟨ψ₁|ρ|ψ₁⟩|` over the sampled states.
    pub max_abs_error: f64,
    /// Largest `|P(ρ) − (p·p₁ + 1)/2|` over the same states.
    pub closed_form_error: f64,
}

impl BornCertificate {
    pub fn purity_error(&self) -> f64 {
        (self.p1.norm() - 1.0).abs().max((self.p2.norm() - 1.0).abs())
    }

    pub fn antipodality_error(&self) -> f64 {
        let [x, y, z] = self.p1.components();
        let [u, v, w] = self.p2.components();
        ((x + u).powi(2) + (y + v).powi(2) + (z + w).powi(2)).sqrt()
    }
}

pub fn verify_born(app: &Apparatus, psi1: &StateVector) -> Result<BornCertificate> {
    verify_born_with(app, psi1, BORN_SAMPLES, &mut rng_from_seed(FIT_SEED))
}

/// Fits the first branch's affine form, takes its extremal polarizations and
/// compares the device against `⟨ψ₁|ρ|ψ₁⟩` on `samples` random states.
pub fn verify_born_with<R: Rng + ?Sized>(
    app: &Apparatus,
    psi1: &StateVector,
    samples: usize,
    rng: &mut R,
) -> Result<BornCertificate> {
    if psi1.dim() != 2 {
        return Err(Error::DimensionMismatch("psi1 must be a qubit state".into()));
    }
    let form = fit_affine_with(app, 0, rng)?;
    let (p1, p2) = extremal_polarizations(&form)?;
    let on_psi1 = outcome_distribution(app, &DensityMatrix::from_pure(psi1))?[0];
    let at_p1 = form.eval(&p1);
    if on_psi1 < 1.0 - BOUND_TOL || at_p1 < 1.0 - BOUND_TOL {
        return Err(Error::BornPrecondition(on_psi1.min(at_p1)));
    }
    let mut max_abs_error = 0.0_f64;
    let mut closed_form_error = 0.0_f64;
    for _ in 0..samples {
        let rank = rng.random_range(1..=2);
        let rho = DensityMatrix::random(2, rank, rng)?;
        let p = outcome_distribution(app, &rho)?[0];
        let v = psi1.amplitudes();
        let mv = rho.matrix().mul_vec(v);
        let born: C64 = v.iter().zip(&mv).map(|(a, b)| a.conj() * b).sum();
        max_abs_error = max_abs_error.max((p - born.re).abs());
        let closed = (density_to_bloch(&rho)?.dot(&p1) + 1.0) / 2.0;
        closed_form_error = closed_form_error.max((p - closed).abs());
    }
    Ok(BornCertificate { p1, p2, psi1: psi1.clone(), max_abs_error, closed_form_error })
}
