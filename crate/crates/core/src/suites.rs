//! Named verification suites.
//!
//! A [`Suite`] turns one trial index into one [`ExperimentReport`]. Suites are
//! registered by name in a [`SuiteRegistry`]; the CLI looks them up from
//! `--suite`. Trial `t` of suite `s` draws all of its randomness from
//! `derive_rng(seed, s, t)`, and trials are merged in index order, so output
//! does not depend on the worker count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apparatus::{expected_value, extract_povm, outcome_distribution, random_apparatus_with, Apparatus};
use crate::error::{Error, Result};
use crate::experiments::{
    check_dyadic, check_envariance, check_general_mixture, check_midpoint, dyadic_iteration, run_appendix, run_fig3a,
    run_fig3b, spin_case_study, spin_mixture_triple, Check, ExperimentReport, CHAIN_TOL, EXACT_TOL,
};
use crate::linalg::{eig_hermitian, max_dim, random_unitary_with, ComplexMatrix, StateVector};
use crate::reconstruction::{two_branch_apparatus, verify_born_with};
use crate::seeding::{derive_rng, LabRng};
use crate::states::{schmidt_decompose, BipartiteState, DensityMatrix, MixtureComponent};

/// Name that runs every registered suite.
pub const ALL: &str = "all";

/// Parameter triples always covered by the appendix suite.
pub const APPENDIX_TRIPLES: [(f64, f64, f64); 3] =
    [(0.0, std::f64::consts::FRAC_1_SQRT_2, 1.0), (0.25, 0.5, 0.75), (0.1, 0.37, 0.9)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub trials: u64,
    /// Overrides each suite's default tolerance.
    pub tol: Option<f64>,
    /// Upper bound on the measured system's dimension.
    pub dim_system: usize,
    /// Upper bound on the apparatus ancilla dimension.
    pub dim_ancilla: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seed: 0, trials: 10, tol: None, dim_system: 4, dim_ancilla: 3 }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::OutOfRange { what: "trials", detail: "must be at least 1".into() });
        }
        if let Some(tol) = self.tol {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(Error::OutOfRange { what: "tol", detail: format!("{tol} is not a positive number") });
            }
        }
        if self.dim_system == 0 || self.dim_ancilla == 0 {
            return Err(Error::OutOfRange { what: "dimension bound", detail: "must be at least 1".into() });
        }
        // largest joint space: A ⊗ B ⊗ α ⊗ β with B as large as A, or A ⊗ ancilla
        let ds = self.dim_system;
        let need = (ds * ds * 4).max(ds * self.dim_ancilla);
        if need > max_dim() {
            return Err(Error::DimensionLimit { requested: need, max: max_dim() });
        }
        Ok(())
    }
}

/// Everything a trial may depend on.
pub struct TrialContext<'a> {
    pub config: &'a SuiteConfig,
    pub trial: u64,
    pub rng: LabRng,
}

impl TrialContext<'_> {
    pub fn dim_system(&mut self) -> usize {
        self.rng.random_range(1..=self.config.dim_system)
    }

    pub fn dim_ancilla(&mut self) -> usize {
        self.rng.random_range(1..=self.config.dim_ancilla)
    }

    /// Random apparatus with at most four outcomes.
    pub fn apparatus(&mut self, dim_system: usize) -> Result<Apparatus> {
        let da = self.dim_ancilla();
        let k = self.rng.random_range(1..=(dim_system * da).min(4));
        random_apparatus_with(dim_system, da, k, &mut self.rng)
    }

    pub fn density(&mut self, dim: usize) -> Result<DensityMatrix> {
        let rank = self.rng.random_range(1..=dim);
        DensityMatrix::random(dim, rank, &mut self.rng)
    }

    /// Two random states and a random apparatus on a shared system.
    pub fn instance(&mut self) -> Result<(DensityMatrix, DensityMatrix, Apparatus)> {
        let ds = self.dim_system();
        let app = self.apparatus(ds)?;
        Ok((self.density(ds)?, self.density(ds)?, app))
    }
}

pub trait Suite: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    fn default_tolerance(&self) -> f64 {
        EXACT_TOL
    }

    fn run_trial(&self, ctx: &mut TrialContext<'_>) -> Result<ExperimentReport>;
}

pub struct SuiteRegistry {
    suites: Vec<Box<dyn Suite>>,
}

impl Default for SuiteRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl SuiteRegistry {
    pub fn empty() -> Self {
        Self { suites: Vec::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Envariance));
        r.register(Box::new(Linearity));
        r.register(Box::new(Midpoint));
        r.register(Box::new(Dyadic));
        r.register(Box::new(Appendix));
        r.register(Box::new(Mixtures));
        r.register(Box::new(Povm));
        r.register(Box::new(Born));
        r.register(Box::new(Spin));
        r
    }

    /// Adds a suite, replacing any earlier one with the same name.
    pub fn register(&mut self, suite: Box<dyn Suite>) {
        match self.suites.iter().position(|s| s.name() == suite.name()) {
            Some(i) => self.suites[i] = suite,
            None => self.suites.push(suite),
        }
    }

    pub fn get(&self, name: &str) -> Option<&dyn Suite> {
        self.suites.iter().find(|s| s.name() == name).map(|s| s.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.suites.iter().map(|s| s.name()).collect()
    }

    pub fn suites(&self) -> impl Iterator<Item = &dyn Suite> {
        self.suites.iter().map(|s| s.as_ref())
    }

    /// Runs `name` (or every suite for [`ALL`]) and returns the reports in
    /// registration then trial order.
    pub fn run(&self, name: &str, config: &SuiteConfig) -> Result<Vec<ExperimentReport>> {
        config.validate()?;
        if name == ALL {
            let mut out = Vec::new();
            for s in &self.suites {
                out.extend(run_suite(s.as_ref(), config)?);
            }
            return Ok(out);
        }
        let suite = self.get(name).ok_or_else(|| Error::OutOfRange {
            what: "suite",
            detail: format!("unknown suite {name:?}; expected one of {}, {ALL}", self.names().join(", ")),
        })?;
        run_suite(suite, config)
    }
}

pub fn run_suite(suite: &dyn Suite, config: &SuiteConfig) -> Result<Vec<ExperimentReport>> {
    let tol = config.tol.unwrap_or_else(|| suite.default_tolerance());
    (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let mut ctx = TrialContext { config, trial, rng: derive_rng(config.seed, suite.name(), trial) };
            Ok(suite
                .run_trial(&mut ctx)?
                .with_suite(suite.name())
                .with_label(format!("{}#{trial}", suite.name()))
                .with_tolerance(tol))
        })
        .collect()
}

struct Envariance;

impl Suite for Envariance {
    fn name(&self) -> &'static str {
        "envariance"
    }

    fn description(&self) -> &'static str {
        "Schmidt phase shifts leave system statistics unchanged"
    }

    fn run_trial(&self, ctx: &mut TrialContext<'_>) -> Result<ExperimentReport> {
        let ds = ctx.dim_system();
        let de = ctx.rng.random_range(1..=ctx.config.dim_system);
        let psi = BipartiteState::random(ds, de, &mut ctx.rng);
        let rank = schmidt_decompose(&psi).rank();
        let phases: Vec<f64> = (0..rank).map(|_| ctx.rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let app = ctx.apparatus(ds)?;
        check_envariance(&psi, &phases, &app)
    }
}

struct Linearity;

impl Suite for Linearity {
    fn name(&self) -> &'static str {
        "linearity"
    }

    fn description(&self) -> &'static str {
        "controlled-gate experiment with and without the early meter reading"
    }

    fn run_trial(&self, ctx: &mut TrialContext<'_>) -> Result<ExperimentReport> {
        let (r0, r1, app) = ctx.instance()?;
        let a = run_fig3a(&r0, &r1, &app)?;
        let b = run_fig3b(&r0, &r1, &app)?;
        let extra = a.checks.iter().map(|c| Check::new(format!("fig3a_{}", c.name), c.residual)).collect();
        Ok(b.with_extra_checks(extra))
    }
}

struct Midpoint;

impl Suite for Midpoint {
    fn name(&self) -> &'static str {
        "midpoint"
    }

    fn description(&self) -> &'static str {
        "half-sum identity from the swapped pair of experiments"
    }

    fn run_trial(&self, ctx: &mut TrialContext<'_>) -> Result<ExperimentReport> {
        let (r0, r1, app) = ctx.instance()?;
        check_midpoint(&r0, &r1, &app)
    }
}

/// Exponent covered by every dyadic trial.
pub const DYADIC_SUITE_Q: u32 = 6;

struct Dyadic;

impl Suite for Dyadic {
    fn name(&self) -> &'static str {
        "dyadic"
    }

    fn description(&self) -> &'static str {
        "nested midpoints at every p/2^6"
    }

    fn default_tolerance(&self) -> f64 {
        CHAIN_TOL
    }

    fn run_trial(&self, ctx: &mut TrialContext<'_>) -> Result<ExperimentReport> {
        let (r0, r1, app) = ctx.instance()?;
        let q = DYADIC_SUITE_Q;
        let headline = ctx.rng.random_range(0..=1u64 << q);
        let mut worst = vec![0.0_f64; 3];
        let mut report = None;
        for p in 0..=1u64 << q {
            let r = check_dyadic(&r0, &r1, &app, p, q)?;
            for (w, c) in worst.iter_mut().zip(&r.checks) {
                *w = w.max(c.residual);
            }
            if p == headline {
                report = Some(r);
            }
        }
        let report = report.expect("headline numerator is in range");
        let names: Vec<String> = report.checks.iter().map(|c| format!("max_{}", c.name)).collect();
        let mut extra: Vec<Check> = names.into_iter().zip(worst).map(|(n, w)| Check::new(n, w)).collect();

        let f0 = expected_value(&app, &r0)?;
        let f1 = expected_value(&app, &r1)?;
        let (_, quarter) = dyadic_iteration(f0, f1, 1, 2)?;
        let f_quarter = expected_value(&app, &r0.interpolate(&r1, 0.25)?)?;
        extra.push(Check::new("worked_quarter", (quarter - f_quarter).abs()));
        Ok(report.with_extra_checks(extra))
    }
}

struct Appendix;

impl Suite for Appendix {
    fn name(&self) -> &'static str {
        "appendix"
    }

    fn description(&self) -> &'static str {
        "modified source amplitudes for arbitrary real weights"
    }

    fn default_tolerance(&self) -> f64 {
        CHAIN_TOL
    }

    fn run_trial(&self, ctx: &mut TrialContext<'_>) -> Result<ExperimentReport> {
        let (xi, lambda, eta) = match APPENDIX_TRIPLES.get(ctx.trial as usize) {
            Some(&t) => t,
            None => {
                let mut w = [ctx.rng.random::<f64>(), ctx.rng.random::<f64>(), ctx.rng.random::<f64>()];
                w.sort_by(f64::total_cmp);
                if !(w[0] < w[1] && w[1] < w[2]) {
                    w = [0.25, 0.5, 0.75];
                }
                (w[0], w[1], w[2])
            }
        };
        let (r0, r1, app) = ctx.instance()?;
        run_appendix(xi, lambda, eta, &r0, &r1, &app)
    }
}

/// Mixture sizes cycled through by the mixtures suite.
pub const MIXTURE_SIZES: [usize; 3] = [1, 3, 5];

struct Mixtures;

impl Suite for Mixtures {
    fn name(&self) -> &'static str {
        "mixtures"
    }

    fn description(&self) -> &'static str {
        "law of total expectation for mixtures of pure and improper states"
    }

    fn run_trial(&self, ctx: &mut TrialContext<'_>) -> Result<ExperimentReport> {
        if ctx.trial % 4 == 3 {
            let app = ctx.apparatus(2)?;
            return spin_mixture_triple(&app);
        }
        let n = MIXTURE_SIZES[(ctx.trial % 4) as usize % MIXTURE_SIZES.len()];
        let ds = ctx.dim_system();
        let weights: Vec<f64> = (0..n).map(|_| ctx.rng.random_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut components: Vec<MixtureComponent> = Vec::with_capacity(n);
        for w in &weights {
            let de = ctx.rng.random_range(1..=ctx.config.dim_system);
            components
                .push(MixtureComponent { probability: w / total, state: BipartiteState::random(ds, de, &mut ctx.rng) });
        }
        let drift = 1.0 - components.iter().map(|c| c.probability).sum::<f64>();
        components[0].probability += drift;
        let app = ctx.apparatus(ds)?;
        check_general_mixture(&components, &app)
    }
}

/// Random states compared against each extracted POVM.
pub const POVM_STATES: usize = 50;

struct Povm;

impl Suite for Povm {
    fn name(&self) -> &'static str {
        "povm"
    }

    fn description(&self) -> &'static str {
        "operators recovered from a black box reproduce its statistics"
    }

    fn default_tolerance(&self) -> f64 {
        CHAIN_TOL
    }

    fn run_trial(&self, ctx: &mut TrialContext<'_>) -> Result<ExperimentReport> {
        let ds = ctx.dim_system();
        let app = ctx.apparatus(ds)?;
        let povm = extract_povm(&app)?;
        let mut sum = ComplexMatrix::zeros(ds, ds);
        let mut negativity = 0.0_f64;
        for m in povm.elements() {
            sum = sum.add(m);
            negativity = negativity.max(-eig_hermitian(&m.hermitian_part())?.min_value());
        }
        let mut worst = 0.0_f64;
        let mut first = 0.0;
        for i in 0..POVM_STATES {
            let rho = ctx.density(ds)?;
            let engine = outcome_distribution(&app, &rho)?;
            let via = povm.probabilities(&rho)?;
            if i == 0 {
                first = via[0];
            }
            for (a, b) in engine.iter().zip(&via) {
                worst = worst.max((a - b).abs());
            }
        }
        let checks = vec![
            Check::new("completeness", sum.max_abs_diff(&ComplexMatrix::identity(ds))),
            Check::new("negativity", negativity.max(0.0)),
            Check::new("probabilities", worst),
        ];
        Ok(ExperimentReport::from_checks("povm", first, first, CHAIN_TOL, checks))
    }
}

struct Born;

impl Suite for Born {
    fn name(&self) -> &'static str {
        "born"
    }

    fn description(&self) -> &'static str {
        "trace rule from the extremes of a two-branch device"
    }

    fn default_tolerance(&self) -> f64 {
        CHAIN_TOL
    }

    fn run_trial(&self, ctx: &mut TrialContext<'_>) -> Result<ExperimentReport> {
        let psi1 = StateVector::new(random_unitary_with(2, &mut ctx.rng).column(0))?;
        let app = two_branch_apparatus(&psi1)?;
        let cert = verify_born_with(&app, &psi1, crate::reconstruction::BORN_SAMPLES, &mut ctx.rng)?;
        let checks = vec![
            Check::new("purity", cert.purity_error()),
            Check::new("antipodality", cert.antipodality_error()),
            Check::new("born", cert.max_abs_error),
            Check::new("closed_form", cert.closed_form_error),
        ];
        let on_psi1 = outcome_distribution(&app, &DensityMatrix::from_pure(&psi1))?[0];
        Ok(ExperimentReport::from_checks("born", on_psi1, 1.0, CHAIN_TOL, checks))
    }
}

struct Spin;

impl Suite for Spin {
    fn name(&self) -> &'static str {
        "spin"
    }

    fn description(&self) -> &'static str {
        "spin mixtures and the singlet on the affine form of a qubit device"
    }

    fn run_trial(&self, ctx: &mut TrialContext<'_>) -> Result<ExperimentReport> {
        let app = ctx.apparatus(2)?;
        spin_case_study(&app)
    }
}
