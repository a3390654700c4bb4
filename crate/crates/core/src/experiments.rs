//! Thought experiments run on the simulation engine.
//!
//! Every experiment is simulated on the full joint state of all particles it
//! involves. Expectations on the measured particle are computed from that
//! joint vector by [`Apparatus::expected_value_on_pure`], and the result is
//! compared with direct evaluation `F(ρ)` of the apparatus on the reduced
//! state. Each comparison becomes a named [`Check`] in an
//! [`ExperimentReport`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::apparatus::{expected_value, Apparatus, MeterMu};
use crate::error::{Error, Result};
use crate::linalg::{unitary_mapping, vec_norm, ComplexMatrix, Factor, StateVector, C64, ZERO};
use crate::reconstruction::fit_affine;
use crate::seeding::rng_from_seed;
use crate::states::{
    envariance_unitary, mix, mixture_density, named_state, purify, reduced_density, schmidt_decompose,
    validate_mixture, BipartiteState, BlochVector, DensityMatrix, MixtureComponent, NamedState,
};

/// Tolerance for exact-path identities.
pub const EXACT_TOL: f64 = 1e-10;

/// Tolerance for identities assembled from many evaluations.
pub const CHAIN_TOL: f64 = 1e-9;

/// Largest `q` accepted by [`check_dyadic`].
pub const DYADIC_MAX_Q: u32 = 8;

/// Slack allowed on the appendix sandwich inequality.
pub const SANDWICH_SLACK: f64 = 1e-12;

/// One named comparison inside a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub residual: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, residual: f64) -> Self {
        Self { name: name.into(), residual }
    }

    fn diff(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self::new(name, (lhs - rhs).abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub label: String,
    pub suite: String,
    pub expectation: f64,
    pub conditional_expectations: Vec<f64>,
    pub branch_probability: Option<f64>,
    pub reference_value: f64,
    /// Largest residual among `checks`.
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub checks: Vec<Check>,
}

impl ExperimentReport {
    pub fn from_checks(
        suite: &str,
        expectation: f64,
        reference_value: f64,
        tolerance: f64,
        checks: Vec<Check>,
    ) -> Self {
        let mut report = Self {
            label: suite.to_string(),
            suite: suite.to_string(),
            expectation,
            conditional_expectations: Vec::new(),
            branch_probability: None,
            reference_value,
            residual: 0.0,
            tolerance,
            pass: false,
            checks,
        };
        report.settle();
        report
    }

    fn settle(&mut self) {
        // NaN residuals propagate through fold as failures
        self.residual =
            self.checks.iter().fold(0.0_f64, |acc, c| if c.residual.is_nan() { f64::NAN } else { acc.max(c.residual) });
        self.pass = self.residual.abs() <= self.tolerance;
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self.settle();
        self
    }

    pub fn with_extra_checks(mut self, extra: Vec<Check>) -> Self {
        self.checks.extend(extra);
        self.settle();
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_suite(mut self, suite: impl Into<String>) -> Self {
        self.suite = suite.into();
        self
    }

    /// Residual of the named check, if present.
    pub fn check(&self, name: &str) -> Option<f64> {
        self.checks.iter().find(|c| c.name == name).map(|c| c.residual)
    }

    fn conditionals(mut self, values: Vec<f64>) -> Self {
        self.conditional_expectations = values;
        self
    }

    fn branch(mut self, a: f64) -> Self {
        self.branch_probability = Some(a);
        self
    }
}

/// Controlled gate on `(A ⊗ B) ⊗ α`: identity when the control qubit `α` is
/// `|0⟩`, and a unitary taking `|Ψ₀⟩` to `|Ψ₁⟩` when it is `|1⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateG {
    dim_ab: usize,
    unitary: ComplexMatrix,
}

impl GateG {
    pub fn dim_ab(&self) -> usize {
        self.dim_ab
    }

    pub fn unitary(&self) -> &ComplexMatrix {
        &self.unitary
    }

    /// Applies the gate to a vector on `(A ⊗ B) ⊗ α`.
    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        self.unitary.mul_vec(v)
    }
}

pub fn build_gate_g(psi0: &BipartiteState, psi1: &BipartiteState) -> Result<GateG> {
    if psi0.dim_s() != psi1.dim_s() || psi0.dim_e() != psi1.dim_e() {
        return Err(Error::DimensionMismatch(format!(
            "gate states live in {}x{} and {}x{}",
            psi0.dim_s(),
            psi0.dim_e(),
            psi1.dim_s(),
            psi1.dim_e()
        )));
    }
    let n = psi0.dim_s() * psi0.dim_e();
    let u = unitary_mapping(psi0.vector(), psi1.vector())?;
    let unitary = ComplexMatrix::from_fn(2 * n, 2 * n, |r, c| match (r % 2, c % 2) {
        (0, 0) if r == c => C64::new(1.0, 0.0),
        (1, 1) => u[(r / 2, c / 2)],
        _ => ZERO,
    });
    Ok(GateG { dim_ab: n, unitary })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fig2Outcome {
    pub outcome: usize,
    pub probability: f64,
    /// State of the upper qubit after the lower one was measured.
    pub upper_state: StateVector,
}

/// The source emits `|Φ⟩` on (upper, lower); the lower qubit is measured in
/// the meter's basis with one draw from `seed`, and the upper qubit's state is
/// obtained by projecting and renormalizing the joint vector.
pub fn run_fig2(meter: &MeterMu, seed: u64) -> Fig2Outcome {
    let phi = named_state(NamedState::BellPhi);
    let c = phi.coefficient_matrix();
    let branches: Vec<(f64, Vec<C64>)> = meter
        .basis()
        .iter()
        .map(|m| {
            let m = m.amplitudes();
            let upper: Vec<C64> = (0..2).map(|i| (0..2).map(|j| m[j].conj() * c[(i, j)]).sum()).collect();
            let norm = vec_norm(&upper);
            (norm * norm, upper)
        })
        .collect();
    let u: f64 = rng_from_seed(seed).random();
    let outcome = usize::from(u >= branches[0].0);
    let (probability, upper) = branches[outcome].clone();
    let upper_state = StateVector::normalized(upper).expect("meter branches of the Bell state are nonzero");
    Fig2Outcome { outcome, probability, upper_state }
}

struct ControlledRun {
    rho_after: DensityMatrix,
    expectation: f64,
    branch_one: f64,
    conditional: [f64; 2],
}

/// Source S emits `psi0`, source Q emits `c0|00⟩ + c1|11⟩` on `(α, β)`, the
/// gate acts on `A, B, α`, and `A` is measured. Joint index order is
/// `A, B, α, β`.
fn controlled_experiment(
    psi0: &BipartiteState,
    psi1: &BipartiteState,
    amplitudes: [f64; 2],
    app: &Apparatus,
) -> Result<ControlledRun> {
    let gate = build_gate_g(psi0, psi1)?;
    let (ds, de) = (psi0.dim_s(), psi0.dim_e());
    let n = gate.dim_ab();
    let mut joint = vec![ZERO; 4 * n];
    for (ab, &x) in psi0.vector().amplitudes().iter().enumerate() {
        for (k, &c) in amplitudes.iter().enumerate() {
            joint[(ab * 2 + k) * 2 + k] = x * c;
        }
    }
    let through_gate = |v: &[C64]| -> Vec<C64> {
        let mut out = vec![ZERO; 4 * n];
        for beta in 0..2 {
            let part: Vec<C64> = (0..2 * n).map(|i| v[i * 2 + beta]).collect();
            for (i, x) in gate.apply(&part).into_iter().enumerate() {
                out[i * 2 + beta] = x;
            }
        }
        out
    };
    let as_state =
        |v: Vec<C64>| -> Result<BipartiteState> { BipartiteState::new(ds, de * 4, StateVector::normalized(v)?) };

    // Experiment (a): nothing touches β.
    let after = as_state(through_gate(&joint))?;
    let rho_after = reduced_density(&after, Factor::First);
    let expectation = app.expected_value_on_pure(&after)?;

    // Experiment (b): β is read by the meter before the gate.
    let mut probs = [0.0; 2];
    let mut conditional = [0.0; 2];
    for k in 0..2 {
        let projected: Vec<C64> = joint.iter().enumerate().map(|(i, &x)| if i % 2 == k { x } else { ZERO }).collect();
        let p = vec_norm(&projected).powi(2);
        if p <= 0.0 {
            return Err(Error::OutOfRange {
                what: "branch probability",
                detail: format!("meter outcome {k} is impossible"),
            });
        }
        probs[k] = p;
        conditional[k] = app.expected_value_on_pure(&as_state(through_gate(&projected))?)?;
    }
    Ok(ControlledRun { rho_after, expectation, branch_one: probs[1], conditional })
}

fn check_pair(rho0: &DensityMatrix, rho1: &DensityMatrix, app: &Apparatus) -> Result<()> {
    if rho0.dim() != app.dim_system() || rho1.dim() != app.dim_system() {
        return Err(Error::DimensionMismatch(format!(
            "apparatus measures dimension {}, states have {} and {}",
            app.dim_system(),
            rho0.dim(),
            rho1.dim()
        )));
    }
    Ok(())
}

/// Purifications of both states sharing one environment of dimension
/// `max(rank ρ₀, rank ρ₁)`.
pub fn common_purifications(rho0: &DensityMatrix, rho1: &DensityMatrix) -> Result<(BipartiteState, BipartiteState)> {
    let (a, b) = (purify(rho0), purify(rho1));
    let de = a.dim_e().max(b.dim_e());
    Ok((a.pad_environment(de)?, b.pad_environment(de)?))
}

fn run_controlled(
    rho0: &DensityMatrix,
    rho1: &DensityMatrix,
    amplitudes: [f64; 2],
    app: &Apparatus,
) -> Result<ControlledRun> {
    check_pair(rho0, rho1, app)?;
    let (psi0, psi1) = common_purifications(rho0, rho1)?;
    controlled_experiment(&psi0, &psi1, amplitudes, app)
}

const BELL_AMPLITUDES: [f64; 2] = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];

/// Experiment (a): `𝔼` against `F((ρ₀ + ρ₁)/2)`.
pub fn run_fig3a(rho0: &DensityMatrix, rho1: &DensityMatrix, app: &Apparatus) -> Result<ExperimentReport> {
    let run = run_controlled(rho0, rho1, BELL_AMPLITUDES, app)?;
    let mid = rho0.interpolate(rho1, 0.5)?;
    let reference = expected_value(app, &mid)?;
    let checks = vec![
        Check::diff("expectation", run.expectation, reference),
        Check::new("reduced_state", run.rho_after.max_abs_diff(&mid)),
    ];
    Ok(ExperimentReport::from_checks("fig3a", run.expectation, reference, EXACT_TOL, checks))
}

/// Experiment (b): the meter reads `β` first; `𝔼` comes from the law of
/// total expectation and is compared with experiment (a).
pub fn run_fig3b(rho0: &DensityMatrix, rho1: &DensityMatrix, app: &Apparatus) -> Result<ExperimentReport> {
    let run = run_controlled(rho0, rho1, BELL_AMPLITUDES, app)?;
    let [e0, e1] = run.conditional;
    let a = run.branch_one;
    let total = (1.0 - a) * e0 + a * e1;
    let checks = vec![
        Check::diff("branch_probability", a, 0.5),
        Check::diff("conditional_0", e0, expected_value(app, rho0)?),
        Check::diff("conditional_1", e1, expected_value(app, rho1)?),
        Check::diff("deferred_measurement", total, run.expectation),
    ];
    Ok(ExperimentReport::from_checks("fig3b", total, run.expectation, EXACT_TOL, checks)
        .conditionals(vec![e0, e1])
        .branch(a))
}

/// The half-sum identity, from experiment (b) on `(ρ₀, ρ₁)` and on the
/// swapped pair.
pub fn check_midpoint(rho0: &DensityMatrix, rho1: &DensityMatrix, app: &Apparatus) -> Result<ExperimentReport> {
    let forward = run_controlled(rho0, rho1, BELL_AMPLITUDES, app)?;
    let swapped = run_controlled(rho1, rho0, BELL_AMPLITUDES, app)?;
    let f0 = expected_value(app, rho0)?;
    let f1 = expected_value(app, rho1)?;
    let f_mid = expected_value(app, &rho0.interpolate(rho1, 0.5)?)?;
    let (a, b) = (forward.branch_one, swapped.branch_one);
    let lhs1 = forward.expectation;
    let rhs1 = (1.0 - a) * f0 + a * f1;
    let lhs2 = swapped.expectation;
    let rhs2 = (1.0 - b) * f1 + b * f0;
    let reference = (f0 + f1) / 2.0;
    let checks = vec![
        Check::diff("forward", lhs1, rhs1),
        Check::diff("swapped", lhs2, rhs2),
        Check::diff("summed", (lhs1 + lhs2) / 2.0, (rhs1 + rhs2) / 2.0),
        Check::diff("direct", f_mid, reference),
    ];
    Ok(ExperimentReport::from_checks("midpoint", f_mid, reference, EXACT_TOL, checks)
        .conditionals(vec![forward.conditional[0], forward.conditional[1]])
        .branch(a))
}

/// One bisection step: the interval `[lo, hi]` is halved and the value at
/// the midpoint is the mean of the carried endpoint values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyadicStep {
    pub lo: f64,
    pub hi: f64,
    pub mid: f64,
    pub value: f64,
}

/// Nested midpoints from `[0, 1]` down to `p/2^q`, carrying only `F(ρ₀)` and
/// `F(ρ₁)`. Returns the steps and the value at `p/2^q`.
pub fn dyadic_iteration(f0: f64, f1: f64, p: u64, q: u32) -> Result<(Vec<DyadicStep>, f64)> {
    if q > 63 || p > (1u64 << q) {
        return Err(Error::OutOfRange { what: "dyadic numerator", detail: format!("{p} exceeds 2^{q}") });
    }
    if p == 1u64 << q {
        return Ok((Vec::new(), f1));
    }
    let (mut lo, mut hi, mut v_lo, mut v_hi) = (0.0, 1.0, f0, f1);
    let mut steps = Vec::with_capacity(q as usize);
    for bit in (0..q).rev() {
        let mid = (lo + hi) / 2.0;
        let value = (v_lo + v_hi) / 2.0;
        steps.push(DyadicStep { lo, hi, mid, value });
        if (p >> bit) & 1 == 1 {
            (lo, v_lo) = (mid, value);
        } else {
            (hi, v_hi) = (mid, value);
        }
    }
    Ok((steps, v_lo))
}

/// Linearity at `λ = p/2^q`: the nested-midpoint value, each midpoint step
/// checked on the engine, and direct evaluation of `F(ρ_λ)`.
pub fn check_dyadic(
    rho0: &DensityMatrix,
    rho1: &DensityMatrix,
    app: &Apparatus,
    p: u64,
    q: u32,
) -> Result<ExperimentReport> {
    if q > DYADIC_MAX_Q {
        return Err(Error::OutOfRange { what: "dyadic exponent", detail: format!("{q} exceeds {DYADIC_MAX_Q}") });
    }
    check_pair(rho0, rho1, app)?;
    let f0 = expected_value(app, rho0)?;
    let f1 = expected_value(app, rho1)?;
    let (steps, iterated) = dyadic_iteration(f0, f1, p, q)?;
    let lambda = p as f64 / (1u64 << q) as f64;
    let reference = (1.0 - lambda) * f0 + lambda * f1;
    let direct = expected_value(app, &rho0.interpolate(rho1, lambda)?)?;

    let mut step_residual = 0.0_f64;
    for s in &steps {
        let lo = rho0.interpolate(rho1, s.lo)?;
        let hi = rho0.interpolate(rho1, s.hi)?;
        let run = run_controlled(&lo, &hi, BELL_AMPLITUDES, app)?;
        let expected = (expected_value(app, &lo)? + expected_value(app, &hi)?) / 2.0;
        step_residual = step_residual.max((run.expectation - expected).abs());
    }
    let checks = vec![
        Check::diff("iterated", iterated, reference),
        Check::diff("direct", direct, reference),
        Check::new("midpoint_steps", step_residual),
    ];
    Ok(ExperimentReport::from_checks("dyadic", direct, reference, CHAIN_TOL, checks).conditionals(vec![iterated]))
}

/// Grid level used for the finite sup/inf ingredients of [`run_appendix`].
pub const APPENDIX_GRID_Q: u32 = DYADIC_MAX_Q;

/// The modified experiment for an arbitrary `λ` between two mixing weights
/// `ξ < λ < η`.
pub fn run_appendix(
    xi: f64,
    lambda: f64,
    eta: f64,
    rho0: &DensityMatrix,
    rho1: &DensityMatrix,
    app: &Apparatus,
) -> Result<ExperimentReport> {
    let in_unit = |x: f64| (0.0..=1.0).contains(&x);
    if !(xi < lambda && lambda < eta) || !in_unit(xi) || !in_unit(eta) {
        return Err(Error::OutOfRange {
            what: "appendix weights",
            detail: format!("need 0 <= xi < lambda < eta <= 1, got ({xi}, {lambda}, {eta})"),
        });
    }
    check_pair(rho0, rho1, app)?;
    let rho_xi = rho0.interpolate(rho1, xi)?;
    let rho_eta = rho0.interpolate(rho1, eta)?;
    let rho_lambda = rho0.interpolate(rho1, lambda)?;
    let width = eta - xi;
    let a_expected = (lambda - xi) / width;
    let amplitudes = [((eta - lambda) / width).sqrt(), a_expected.sqrt()];
    let run = run_controlled(&rho_xi, &rho_eta, amplitudes, app)?;
    let [e0, e1] = run.conditional;
    let a = run.branch_one;

    let f = |x: f64| -> Result<f64> { expected_value(app, &rho0.interpolate(rho1, x)?) };
    let (f0, f1) = (f(0.0)?, f(1.0)?);
    let (f_xi, f_eta) = (expected_value(app, &rho_xi)?, expected_value(app, &rho_eta)?);
    let f_lambda = run.expectation;
    let reference = (1.0 - lambda) * f0 + lambda * f1;

    // Orient so that F(ρ₀) ≤ F(ρ₁); swapping the endpoints maps ρ_x to ρ_{1−x}.
    let (low, high) = if f0 <= f1 { (f_xi, f_eta) } else { (f_eta, f_xi) };
    let sandwich = (low - f_lambda).max(f_lambda - high).max(0.0);
    let sandwich = if sandwich <= SANDWICH_SLACK { 0.0 } else { sandwich };

    // Finite dyadic grid: below-λ values never exceed F(ρ_λ), above-λ values
    // never fall short of it (in the oriented order).
    let grid = 1u64 << APPENDIX_GRID_Q;
    let (mut below, mut above) = (f64::NEG_INFINITY, f64::INFINITY);
    let sign = if f0 <= f1 { 1.0 } else { -1.0 };
    for k in 0..=grid {
        let x = k as f64 / grid as f64;
        if x == lambda {
            continue;
        }
        let v = sign * f(x)?;
        if x < lambda {
            below = below.max(v);
        } else {
            above = above.min(v);
        }
    }
    let grid_sup = (below - sign * f_lambda - SANDWICH_SLACK).max(0.0);
    let grid_inf = (sign * f_lambda - above - SANDWICH_SLACK).max(0.0);

    let checks = vec![
        Check::diff("branch_probability", a, a_expected),
        Check::new("reduced_state", run.rho_after.max_abs_diff(&rho_lambda)),
        Check::diff("conditional_0", e0, f_xi),
        Check::diff("conditional_1", e1, f_eta),
        Check::diff("total_expectation", f_lambda, (1.0 - a) * e0 + a * e1),
        Check::diff("interpolation", f_lambda, (1.0 - a) * f_xi + a * f_eta),
        Check::new("sandwich", sandwich),
        Check::new("grid_sup", grid_sup),
        Check::new("grid_inf", grid_inf),
        Check::diff("answer", f_lambda, reference),
    ];
    Ok(ExperimentReport::from_checks("appendix", f_lambda, reference, CHAIN_TOL, checks)
        .conditionals(vec![e0, e1])
        .branch(a))
}

/// Law of total expectation for a flattened mixture, plus the induction that
/// folds the weights one component at a time.
pub fn check_general_mixture(components: &[MixtureComponent], app: &Apparatus) -> Result<ExperimentReport> {
    validate_mixture(components)?;
    let rho = mixture_density(components)?;
    if rho.dim() != app.dim_system() {
        return Err(Error::DimensionMismatch(format!(
            "apparatus measures dimension {}, mixture has {}",
            app.dim_system(),
            rho.dim()
        )));
    }
    let branch: Vec<f64> = components.iter().map(|c| app.expected_value_on_pure(&c.state)).collect::<Result<_>>()?;
    let total: f64 = components.iter().zip(&branch).map(|(c, e)| c.probability * e).sum();
    let f_rho = expected_value(app, &rho)?;

    let reduced: Vec<DensityMatrix> = components.iter().map(|c| reduced_density(&c.state, Factor::First)).collect();
    let mut per_branch = 0.0_f64;
    for (e, r) in branch.iter().zip(&reduced) {
        per_branch = per_branch.max((e - expected_value(app, r)?).abs());
    }

    // Tail mixtures T_j = Σ_{k≥j} p_k ρ_k / w_j: F(T_j) = (p_j/w_j)F(ρ_j) + (w_{j+1}/w_j)F(T_{j+1}).
    let mut induction = 0.0_f64;
    let n = components.len();
    let mut tail_weight = components[n - 1].probability;
    let mut tail = reduced[n - 1].clone();
    for j in (0..n - 1).rev() {
        let p = components[j].probability;
        let w = p + tail_weight;
        if w <= 0.0 {
            continue;
        }
        let next = if tail_weight > 0.0 {
            mix(&[(p / w, reduced[j].clone()), (tail_weight / w, tail.clone())])?
        } else {
            reduced[j].clone()
        };
        let lhs = expected_value(app, &next)?;
        let rhs = if tail_weight > 0.0 {
            (p / w) * expected_value(app, &reduced[j])? + (tail_weight / w) * expected_value(app, &tail)?
        } else {
            expected_value(app, &reduced[j])?
        };
        induction = induction.max((lhs - rhs).abs());
        tail = next;
        tail_weight = w;
    }

    let checks = vec![
        Check::new("branch_expectations", per_branch),
        Check::new("induction", induction),
        Check::diff("total_expectation", total, f_rho),
    ];
    Ok(ExperimentReport::from_checks("mixtures", total, f_rho, EXACT_TOL, checks).conditionals(branch))
}

/// The up/down mixture, the left/right mixture and one electron of the
/// singlet, all measured by the same device.
pub fn spin_mixture_triple(app: &Apparatus) -> Result<ExperimentReport> {
    let half = |a: NamedState, b: NamedState| {
        vec![
            MixtureComponent { probability: 0.5, state: named_state(a) },
            MixtureComponent { probability: 0.5, state: named_state(b) },
        ]
    };
    let m1 = check_general_mixture(&half(NamedState::Up, NamedState::Down), app)?;
    let m2 = check_general_mixture(&half(NamedState::Left, NamedState::Right), app)?;
    let singlet = app.expected_value_on_pure(&named_state(NamedState::Singlet))?;
    let mut checks = vec![
        Check::diff("m1_vs_singlet", m1.expectation, singlet),
        Check::diff("m2_vs_singlet", m2.expectation, singlet),
    ];
    checks.extend(m1.checks.iter().map(|c| Check::new(format!("m1_{}", c.name), c.residual)));
    checks.extend(m2.checks.iter().map(|c| Check::new(format!("m2_{}", c.name), c.residual)));
    Ok(ExperimentReport::from_checks("mixtures", m1.expectation, singlet, EXACT_TOL, checks).conditionals(vec![
        m1.expectation,
        m2.expectation,
        singlet,
    ]))
}

/// Phase-shifted Schmidt coefficients leave every outcome probability on the
/// system unchanged, and an environment-only unitary undoes the shift.
pub fn check_envariance(psi: &BipartiteState, phases: &[f64], app: &Apparatus) -> Result<ExperimentReport> {
    let schmidt = schmidt_decompose(psi);
    let rank = schmidt.rank();
    if phases.len() != rank {
        return Err(Error::DimensionMismatch(format!("{} phases for Schmidt rank {rank}", phases.len())));
    }
    let shifted = schmidt.with_phases(phases);
    let before = app.distribution_on_pure(psi)?;
    let after = app.distribution_on_pure(&shifted)?;
    let tv = before.iter().zip(&after).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0;

    let mut all_phases = phases.to_vec();
    all_phases.resize(schmidt.e_basis.len(), 0.0);
    let u_e = envariance_unitary(&all_phases, &schmidt.e_basis)?;
    let undone = shifted.apply_environment(&u_e)?;
    let mean = |probs: &[f64]| app.outcome_values().iter().zip(probs).map(|(x, p)| x * p).sum::<f64>();
    let (e_before, e_after) = (mean(&before), mean(&after));
    let checks =
        vec![Check::new("total_variation", tv), Check::new("environment_undo", undone.distance_up_to_phase(psi))];
    Ok(ExperimentReport::from_checks("envariance", e_after, e_before, EXACT_TOL, checks))
}

/// Outcome probabilities of a qubit device as affine forms, evaluated on the
/// two spin mixtures, the singlet, and the polarized states.
pub fn spin_case_study(app: &Apparatus) -> Result<ExperimentReport> {
    if app.dim_system() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "spin case study needs a qubit device, got dimension {}",
            app.dim_system()
        )));
    }
    let prob = |s: NamedState, k: usize| -> Result<f64> { Ok(app.distribution_on_pure(&named_state(s))?[k]) };
    let mut checks = Vec::new();
    let mut headline = (0.0, 0.0, Vec::new());
    for k in 0..app.n_outcomes() {
        let form = fit_affine(app, k)?;
        let b = form.b();
        let m1 = 0.5 * prob(NamedState::Up, k)? + 0.5 * prob(NamedState::Down, k)?;
        let m2 = 0.5 * prob(NamedState::Left, k)? + 0.5 * prob(NamedState::Right, k)?;
        let s = prob(NamedState::Singlet, k)?;
        let up = prob(NamedState::Up, k)?;
        let at_zero = form.eval(&BlochVector::zero());
        checks.push(Check::diff(format!("m1_{k}"), m1, b));
        checks.push(Check::diff(format!("m2_{k}"), m2, b));
        checks.push(Check::diff(format!("m1_minus_m2_{k}"), m1, m2));
        checks.push(Check::diff(format!("singlet_{k}"), s, b));
        checks.push(Check::diff(format!("up_{k}"), up, form.a()[2] + b));
        checks.push(Check::diff(format!("zero_{k}"), at_zero, b));
        if k == 0 {
            headline = (m1, b, vec![m1, m2, s]);
        }
    }
    Ok(ExperimentReport::from_checks("spin", headline.0, headline.1, EXACT_TOL, checks).conditionals(headline.2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apparatus::random_apparatus_with;
    use crate::seeding::rng_from_seed;
    use crate::states::BipartiteState;
    use proptest::prelude::*;
    use rand::Rng;

    fn named_rho(s: NamedState) -> DensityMatrix {
        reduced_density(&named_state(s), Factor::First)
    }

    fn random_instance<R: Rng>(rng: &mut R, max_ds: usize) -> (DensityMatrix, DensityMatrix, Apparatus) {
        let ds = rng.random_range(1..=max_ds);
        let da = rng.random_range(1..=3);
        let k = rng.random_range(1..=(ds * da).min(4));
        let app = random_apparatus_with(ds, da, k, rng).unwrap();
        let r0 = DensityMatrix::random(ds, rng.random_range(1..=ds), rng).unwrap();
        let r1 = DensityMatrix::random(ds, rng.random_range(1..=ds), rng).unwrap();
        (r0, r1, app)
    }

    /// Deferred-measurement oracle: β is measured after the gate instead of
    /// before, on an independently assembled joint state.
    fn measure_beta_after_gate(rho0: &DensityMatrix, rho1: &DensityMatrix, app: &Apparatus) -> (f64, f64) {
        let (psi0, psi1) = common_purifications(rho0, rho1).unwrap();
        let gate = build_gate_g(&psi0, &psi1).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let ab_alpha: Vec<Vec<C64>> = (0..2)
            .map(|k| {
                let mut v = vec![ZERO; 2 * gate.dim_ab()];
                for (ab, x) in psi0.vector().amplitudes().iter().enumerate() {
                    v[ab * 2 + k] = x * h;
                }
                gate.apply(&v)
            })
            .collect();
        let (ds, de) = (psi0.dim_s(), psi0.dim_e());
        let mut total = 0.0;
        let mut a = 0.0;
        for (k, v) in ab_alpha.iter().enumerate() {
            let p = vec_norm(v).powi(2);
            let state = BipartiteState::new(ds, de * 2, StateVector::normalized(v.clone()).unwrap()).unwrap();
            total += p * app.expected_value_on_pure(&state).unwrap();
            if k == 1 {
                a = p;
            }
        }
        (total, a)
    }

    #[test]
    fn gate_maps_psi0_as_specified() {
        let mut rng = rng_from_seed(3);
        let psi0 = BipartiteState::random(2, 3, &mut rng);
        let psi1 = BipartiteState::random(2, 3, &mut rng);
        let g = build_gate_g(&psi0, &psi1).unwrap();
        assert!(g.unitary().is_unitary(1e-10));
        let with_control = |psi: &BipartiteState, k: usize| -> Vec<C64> {
            let mut v = vec![ZERO; 12];
            for (ab, x) in psi.vector().amplitudes().iter().enumerate() {
                v[ab * 2 + k] = *x;
            }
            v
        };
        let diff = |a: &[C64], b: &[C64]| a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(diff(&g.apply(&with_control(&psi0, 0)), &with_control(&psi0, 0)) < 1e-10);
        assert!(diff(&g.apply(&with_control(&psi0, 1)), &with_control(&psi1, 1)) < 1e-10);

        let same = build_gate_g(&psi0, &psi0).unwrap();
        for k in 0..2 {
            assert!(diff(&same.apply(&with_control(&psi0, k)), &with_control(&psi0, k)) < 1e-10);
        }
        assert!(build_gate_g(&psi0, &BipartiteState::random(3, 2, &mut rng)).is_err());
    }

    #[test]
    fn fig2_preparation() {
        let meter = MeterMu::computational();
        for seed in 0..200 {
            let out = run_fig2(&meter, seed);
            let expected = StateVector::basis(2, out.outcome);
            assert!(out.upper_state.distance_up_to_phase(&expected) < 1e-12);
            assert!((out.probability - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn fig2_outcome_frequencies_are_binomial() {
        let meter = MeterMu::computational();
        let n = 100_000u64;
        let ones: u64 = (0..n).map(|s| run_fig2(&meter, s).outcome as u64).sum();
        let sigma = (n as f64 / 4.0).sqrt();
        assert!((ones as f64 - n as f64 / 2.0).abs() < 5.0 * sigma, "{ones}");
    }

    #[test]
    fn fig3a_simple_cases() {
        let z = Apparatus::pauli_meter(2);
        let report = run_fig3a(&named_rho(NamedState::Up), &named_rho(NamedState::Down), &z).unwrap();
        assert!(report.expectation.abs() < 1e-12 && report.pass);

        let mut rng = rng_from_seed(9);
        let rho = DensityMatrix::random(3, 2, &mut rng).unwrap();
        let app = random_apparatus_with(3, 2, 3, &mut rng).unwrap();
        let report = run_fig3a(&rho, &rho, &app).unwrap();
        assert!((report.expectation - expected_value(&app, &rho).unwrap()).abs() < 1e-12);
        assert!(run_fig3a(&rho, &DensityMatrix::maximally_mixed(2), &app).is_err());
    }

    #[test]
    fn fig3b_matches_fig3a_and_conditionals() {
        let mut rng = rng_from_seed(10);
        for _ in 0..20 {
            let (r0, r1, app) = random_instance(&mut rng, 4);
            let a = run_fig3a(&r0, &r1, &app).unwrap();
            let b = run_fig3b(&r0, &r1, &app).unwrap();
            assert!(a.pass && b.pass, "{a:?} {b:?}");
            assert!((b.branch_probability.unwrap() - 0.5).abs() < 1e-12);
            assert!((b.conditional_expectations[0] - expected_value(&app, &r0).unwrap()).abs() < 1e-10);
            assert!((b.conditional_expectations[1] - expected_value(&app, &r1).unwrap()).abs() < 1e-10);
            assert!((a.expectation - b.expectation).abs() < 1e-10);
            let (deferred, a_after) = measure_beta_after_gate(&r0, &r1, &app);
            assert!((deferred - a.expectation).abs() < 1e-10);
            assert!((a_after - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn midpoint_cases() {
        let mut rng = rng_from_seed(11);
        let rho = DensityMatrix::random(2, 2, &mut rng).unwrap();
        let app = random_apparatus_with(2, 2, 3, &mut rng).unwrap();
        let r = check_midpoint(&rho, &rho, &app).unwrap();
        assert!((r.expectation - expected_value(&app, &rho).unwrap()).abs() < 1e-12);

        let x = Apparatus::pauli_meter(0);
        let r = check_midpoint(&named_rho(NamedState::Up), &named_rho(NamedState::Right), &x).unwrap();
        assert!(r.residual < 1e-12);
        assert!((r.expectation - 0.5).abs() < 1e-12);

        let mut worst = 0.0_f64;
        for _ in 0..100 {
            let (r0, r1, app) = random_instance(&mut rng, 4);
            worst = worst.max(check_midpoint(&r0, &r1, &app).unwrap().residual);
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn worked_quarter_expansion() {
        let (f0, f1) = (0.3, -0.7);
        let (steps, value) = dyadic_iteration(f0, f1, 1, 2).unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!((steps[0].mid, steps[0].value), (0.5, (f0 + f1) / 2.0));
        assert_eq!(steps[1].mid, 0.25);
        assert_eq!(steps[1].value, (f0 + (f0 + f1) / 2.0) / 2.0);
        assert!((value - (0.75 * f0 + 0.25 * f1)).abs() < 1e-15);
        assert_eq!(dyadic_iteration(f0, f1, 0, 3).unwrap().1, f0);
        assert_eq!(dyadic_iteration(f0, f1, 8, 3).unwrap().1, f1);
        assert!(dyadic_iteration(f0, f1, 9, 3).is_err());
    }

    #[test]
    fn dyadic_grid_on_random_instance() {
        let mut rng = rng_from_seed(12);
        let (r0, r1, app) = random_instance(&mut rng, 4);
        let f0 = expected_value(&app, &r0).unwrap();
        let zero = check_dyadic(&r0, &r1, &app, 0, 6).unwrap();
        assert!((zero.expectation - f0).abs() < 1e-12);
        for p in 0..=64 {
            let r = check_dyadic(&r0, &r1, &app, p, 6).unwrap();
            assert!(r.pass, "{r:?}");
        }
        assert!(check_dyadic(&r0, &r1, &app, 1, DYADIC_MAX_Q + 1).is_err());
        assert!(check_dyadic(&r0, &r1, &app, 5, 2).is_err());
    }

    #[test]
    fn appendix_cases() {
        let mut rng = rng_from_seed(13);
        let (r0, r1, app) = random_instance(&mut rng, 2);
        let r = run_appendix(0.0, 0.3, 1.0, &r0, &r1, &app).unwrap();
        assert!((r.branch_probability.unwrap() - 0.3).abs() < 1e-12);
        let r = run_appendix(0.25, 0.5, 0.75, &r0, &r1, &app).unwrap();
        assert!((r.branch_probability.unwrap() - 0.5).abs() < 1e-12);
        let l = std::f64::consts::FRAC_1_SQRT_2;
        let r = run_appendix(0.0, l, 1.0, &r0, &r1, &app).unwrap();
        assert!(r.pass && r.check("answer").unwrap() < 1e-9, "{r:?}");
        assert_eq!(r.check("sandwich"), Some(0.0));
        assert!(run_appendix(0.5, 0.5, 0.9, &r0, &r1, &app).is_err());
        assert!(run_appendix(0.1, 0.5, 1.5, &r0, &r1, &app).is_err());
    }

    #[test]
    fn mixtures_of_one_three_and_five() {
        let mut rng = rng_from_seed(14);
        let app = random_apparatus_with(3, 2, 4, &mut rng).unwrap();
        let single = vec![MixtureComponent { probability: 1.0, state: BipartiteState::random(3, 2, &mut rng) }];
        assert!(check_general_mixture(&single, &app).unwrap().residual < 1e-12);
        let three: Vec<MixtureComponent> = [0.5, 0.25, 0.25]
            .iter()
            .map(|&p| MixtureComponent {
                probability: p,
                state: BipartiteState::random(3, rng.random_range(1..=3), &mut rng),
            })
            .collect();
        let r = check_general_mixture(&three, &app).unwrap();
        assert!(r.pass && r.residual < 1e-10, "{r:?}");
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        let mut five: Vec<MixtureComponent> = w
            .iter()
            .map(|x| MixtureComponent { probability: x / s, state: BipartiteState::random(3, 2, &mut rng) })
            .collect();
        let drift: f64 = 1.0 - five.iter().map(|c| c.probability).sum::<f64>();
        five[0].probability += drift;
        assert!(check_general_mixture(&five, &app).unwrap().pass);
    }

    #[test]
    fn spin_mixtures_are_indistinguishable() {
        let mut rng = rng_from_seed(15);
        for _ in 0..20 {
            let da = rng.random_range(1..=3);
            let app = random_apparatus_with(2, da, rng.random_range(1..=(2 * da).min(4)), &mut rng).unwrap();
            let r = spin_mixture_triple(&app).unwrap();
            assert!(r.pass, "{r:?}");
            let [a, b, c] =
                [r.conditional_expectations[0], r.conditional_expectations[1], r.conditional_expectations[2]];
            assert!((a - b).abs() < 1e-10 && (b - c).abs() < 1e-10);
        }
        // the three states share one density matrix
        let m1 = mix(&[(0.5, named_rho(NamedState::Up)), (0.5, named_rho(NamedState::Down))]).unwrap();
        assert!(m1.max_abs_diff(&named_rho(NamedState::Singlet)) < 1e-15);
    }

    #[test]
    fn envariance_cases() {
        let mut rng = rng_from_seed(16);
        let app = random_apparatus_with(2, 2, 3, &mut rng).unwrap();
        let phi = named_state(NamedState::BellPhi);
        let r = check_envariance(&phi, &[0.0, 0.0], &app).unwrap();
        assert!(r.residual < 1e-12);
        let r = check_envariance(&phi, &[0.0, std::f64::consts::PI], &app).unwrap();
        assert!(r.check("total_variation").unwrap() < 1e-12 && r.pass);
        assert!(check_envariance(&phi, &[0.0], &app).is_err());

        let mut worst = 0.0_f64;
        for _ in 0..50 {
            let ds = rng.random_range(1..=4);
            let de = rng.random_range(1..=4);
            let psi = BipartiteState::random(ds, de, &mut rng);
            let rank = schmidt_decompose(&psi).rank();
            let phases: Vec<f64> = (0..rank).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            let da = rng.random_range(1..=3);
            let app = random_apparatus_with(ds, da, rng.random_range(1..=(ds * da).min(4)), &mut rng).unwrap();
            let r = check_envariance(&psi, &phases, &app).unwrap();
            assert!(r.pass, "{r:?}");
            worst = worst.max(r.check("total_variation").unwrap());
        }
        assert!(worst < 1e-10);
    }

    #[test]
    fn spin_case_study_identities() {
        let mut rng = rng_from_seed(17);
        for _ in 0..10 {
            let app = random_apparatus_with(2, 2, rng.random_range(1..=4), &mut rng).unwrap();
            let r = spin_case_study(&app).unwrap();
            assert!(r.pass, "{r:?}");
            assert!(r.check("m1_minus_m2_0").unwrap() < 1e-12);
        }
        assert!(spin_case_study(&random_apparatus_with(3, 1, 2, &mut rng).unwrap()).is_err());
    }

    #[test]
    fn report_pass_tracks_tolerance() {
        let r =
            ExperimentReport::from_checks("x", 0.0, 0.0, 1e-10, vec![Check::new("a", 1e-11), Check::new("b", 5e-11)]);
        assert!(r.pass && r.residual == 5e-11);
        let r = r.with_tolerance(1e-11);
        assert!(!r.pass);
        let r = ExperimentReport::from_checks("x", 0.0, 0.0, 1.0, vec![Check::new("a", f64::NAN)]);
        assert!(!r.pass);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn linearity_on_grid_and_irrationals(seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let (r0, r1, app) = random_instance(&mut rng, 4);
            let f0 = expected_value(&app, &r0).unwrap();
            let f1 = expected_value(&app, &r1).unwrap();
            let lambdas = (0..=100).map(|i| i as f64 / 100.0).chain((0..20).map(|_| rng.random::<f64>()));
            for l in lambdas {
                let direct = expected_value(&app, &r0.interpolate(&r1, l).unwrap()).unwrap();
                prop_assert!((direct - ((1.0 - l) * f0 + l * f1)).abs() < 1e-9);
            }
        }

        #[test]
        fn branch_probability_ignores_the_states(seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let (r0, r1, app) = random_instance(&mut rng, 3);
            let r = run_fig3b(&r0, &r1, &app).unwrap();
            prop_assert!((r.branch_probability.unwrap() - 0.5).abs() < 1e-12);
        }

        #[test]
        fn appendix_sandwich_and_answer(seed in any::<u64>(), xi in 0.0f64..0.45, gap in 0.05f64..0.5, t in 0.01f64..0.99) {
            let mut rng = rng_from_seed(seed);
            let (r0, r1, app) = random_instance(&mut rng, 3);
            let eta = (xi + gap).min(1.0);
            let lambda = xi + t * (eta - xi);
            prop_assume!(xi < lambda && lambda < eta);
            let r = run_appendix(xi, lambda, eta, &r0, &r1, &app).unwrap();
            prop_assert!(r.pass, "{:?}", r);
        }
    }
}
