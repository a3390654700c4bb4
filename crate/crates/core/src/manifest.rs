//! Experiment files: one experiment (or a list of them) described in JSON.
//!
//! ```json
//! {
//!   "label": "quarter",
//!   "seed": 3,
//!   "experiment": {
//!     "appendix": {
//!       "xi": 0.0, "lambda": 0.3, "eta": 1.0,
//!       "rho0": {"named": "up"},
//!       "rho1": {"random": {"dim": 2, "rank": 2}},
//!       "apparatus": {"sigma": "x"}
//!     }
//!   }
//! }
//! ```
//!
//! Schema problems are reported with the JSON path of the offending field.

use serde::{Deserialize, Serialize};

use crate::apparatus::{random_apparatus, Apparatus, MeterMu};
use crate::error::{Error, Result};
use crate::experiments::{
    check_dyadic, check_envariance, check_general_mixture, check_midpoint, run_appendix, run_fig2, run_fig3a,
    run_fig3b, spin_case_study, Check, ExperimentReport, CHAIN_TOL, EXACT_TOL,
};
use crate::linalg::{max_dim, Factor, StateVector};
use crate::reconstruction::{two_branch_apparatus, verify_born};
use crate::seeding::{derive_rng, LabRng};
use crate::states::{
    bloch_to_density, mixture_density, named_state, purify, reduced_density, BipartiteState, BlochVector,
    DensityMatrix, MixtureComponent, NamedState,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    #[serde(default)]
    pub label: Option<String>,
    /// Seed for every `random` state or apparatus in the file.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerance: Option<f64>,
    pub experiment: ExperimentSpec,
}

/// A single file or a list of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Manifest {
    One(Box<ExperimentFile>),
    Many(Vec<ExperimentFile>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentSpec {
    Fig2 {
        #[serde(default)]
        meter: Option<[StateVector; 2]>,
    },
    Fig3a(PairSpec),
    Fig3b(PairSpec),
    Midpoint(PairSpec),
    Dyadic {
        rho0: StateSpec,
        rho1: StateSpec,
        apparatus: ApparatusSpec,
        p: u64,
        q: u32,
    },
    Appendix {
        xi: f64,
        lambda: f64,
        eta: f64,
        rho0: StateSpec,
        rho1: StateSpec,
        apparatus: ApparatusSpec,
    },
    Mixture {
        state: StateSpec,
        apparatus: ApparatusSpec,
    },
    Envariance {
        state: StateSpec,
        phases: Vec<f64>,
        apparatus: ApparatusSpec,
    },
    Spin {
        apparatus: ApparatusSpec,
    },
    Born {
        psi1: StateVector,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub rho0: StateSpec,
    pub rho1: StateSpec,
    pub apparatus: ApparatusSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSpec {
    Named(NamedState),
    Bloch(BlochVector),
    Density(DensityMatrix),
    Vector(StateVector),
    Bipartite(BipartiteState),
    /// Proper mixture; nested mixtures are flattened.
    Mixture(Vec<WeightedState>),
    Random {
        dim: usize,
        rank: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedState {
    pub probability: f64,
    pub state: StateSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ApparatusSpec {
    Sigma(Axis),
    Random {
        dim_system: usize,
        dim_ancilla: usize,
        outcomes: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    Explicit(Apparatus),
    TwoBranch(StateVector),
    Trivial {
        dim: usize,
        #[serde(default = "one")]
        value: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// Parses a manifest, reporting schema errors with their JSON path.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Schema { path: ".".into(), message: e.to_string() })?;
    if let serde_json::Value::Array(items) = value {
        let mut files = Vec::with_capacity(items.len());
        for (i, item) in items.into_iter().enumerate() {
            files.push(parse_file(item).map_err(|e| match e {
                Error::Schema { path, message } => Error::Schema { path: format!("[{i}].{path}"), message },
                other => other,
            })?);
        }
        return Ok(Manifest::Many(files));
    }
    Ok(Manifest::One(Box::new(parse_file(value)?)))
}

fn parse_file(value: serde_json::Value) -> Result<ExperimentFile> {
    serde_path_to_error::deserialize(value)
        .map_err(|e| Error::Schema { path: e.path().to_string(), message: e.inner().to_string() })
}

/// Sequential source of randomness for `random` entries of one file.
struct Draws {
    seed: u64,
    next: u64,
}

impl Draws {
    fn rng(&mut self) -> LabRng {
        self.next += 1;
        derive_rng(self.seed, "manifest", self.next - 1)
    }
}

impl StateSpec {
    fn components(&self, draws: &mut Draws) -> Result<Vec<MixtureComponent>> {
        let single = |state: BipartiteState| vec![MixtureComponent { probability: 1.0, state }];
        Ok(match self {
            StateSpec::Named(n) => single(named_state(*n)),
            StateSpec::Vector(v) => single(BipartiteState::pure(v.clone())),
            StateSpec::Bipartite(b) => single(b.clone()),
            StateSpec::Mixture(parts) => {
                let mut out = Vec::new();
                for part in parts {
                    for c in part.state.components(draws)? {
                        out.push(MixtureComponent { probability: part.probability * c.probability, state: c.state });
                    }
                }
                out
            }
            StateSpec::Bloch(_) | StateSpec::Density(_) | StateSpec::Random { .. } => {
                single(purify(&self.density(draws)?))
            }
        })
    }

    fn density(&self, draws: &mut Draws) -> Result<DensityMatrix> {
        match self {
            StateSpec::Bloch(p) => Ok(bloch_to_density(p)),
            StateSpec::Density(d) => Ok(d.clone()),
            StateSpec::Random { dim, rank } => {
                if *dim > max_dim() {
                    return Err(Error::DimensionLimit { requested: *dim, max: max_dim() });
                }
                DensityMatrix::random(*dim, *rank, &mut draws.rng())
            }
            StateSpec::Named(_) | StateSpec::Vector(_) | StateSpec::Bipartite(_) => {
                let c = self.components(draws)?;
                Ok(reduced_density(&c[0].state, Factor::First))
            }
            StateSpec::Mixture(_) => mixture_density(&self.components(draws)?),
        }
    }

    fn pure(&self) -> Result<BipartiteState> {
        match self {
            StateSpec::Named(n) => Ok(named_state(*n)),
            StateSpec::Vector(v) => Ok(BipartiteState::pure(v.clone())),
            StateSpec::Bipartite(b) => Ok(b.clone()),
            _ => Err(Error::InvalidDensity("envariance needs a pure bipartite state".into())),
        }
    }
}

impl ApparatusSpec {
    fn build(&self, file_seed: u64) -> Result<Apparatus> {
        match self {
            ApparatusSpec::Sigma(axis) => Ok(Apparatus::pauli_meter(*axis as usize)),
            ApparatusSpec::Random { dim_system, dim_ancilla, outcomes, seed } => {
                let joint = dim_system.saturating_mul(*dim_ancilla);
                if joint > max_dim() {
                    return Err(Error::DimensionLimit { requested: joint, max: max_dim() });
                }
                random_apparatus(*dim_system, *dim_ancilla, *outcomes, seed.unwrap_or(file_seed))
            }
            ApparatusSpec::Explicit(app) => Ok(app.clone()),
            ApparatusSpec::TwoBranch(psi1) => two_branch_apparatus(psi1),
            ApparatusSpec::Trivial { dim, value } => Ok(Apparatus::trivial(*dim, *value)),
        }
    }
}

impl ExperimentFile {
    pub fn run(&self) -> Result<ExperimentReport> {
        let mut draws = Draws { seed: self.seed, next: 0 };
        let pair = |p: &PairSpec, draws: &mut Draws| -> Result<(DensityMatrix, DensityMatrix, Apparatus)> {
            Ok((p.rho0.density(draws)?, p.rho1.density(draws)?, p.apparatus.build(self.seed)?))
        };
        let report = match &self.experiment {
            ExperimentSpec::Fig2 { meter } => {
                let meter = match meter {
                    Some([a, b]) => MeterMu::new(a.clone(), b.clone())?,
                    None => MeterMu::computational(),
                };
                let out = run_fig2(&meter, self.seed);
                let m = meter.basis()[out.outcome].amplitudes();
                let expected = StateVector::normalized(m.iter().map(|z| z.conj()).collect())?;
                let checks = vec![Check::new("upper_state", out.upper_state.distance_up_to_phase(&expected))];
                let mut r =
                    ExperimentReport::from_checks("fig2", out.outcome as f64, out.outcome as f64, EXACT_TOL, checks);
                r.branch_probability = Some(out.probability);
                r
            }
            ExperimentSpec::Fig3a(p) => {
                let (r0, r1, app) = pair(p, &mut draws)?;
                run_fig3a(&r0, &r1, &app)?
            }
            ExperimentSpec::Fig3b(p) => {
                let (r0, r1, app) = pair(p, &mut draws)?;
                run_fig3b(&r0, &r1, &app)?
            }
            ExperimentSpec::Midpoint(p) => {
                let (r0, r1, app) = pair(p, &mut draws)?;
                check_midpoint(&r0, &r1, &app)?
            }
            ExperimentSpec::Dyadic { rho0, rho1, apparatus, p, q } => {
                let (r0, r1) = (rho0.density(&mut draws)?, rho1.density(&mut draws)?);
                check_dyadic(&r0, &r1, &apparatus.build(self.seed)?, *p, *q)?
            }
            ExperimentSpec::Appendix { xi, lambda, eta, rho0, rho1, apparatus } => {
                let (r0, r1) = (rho0.density(&mut draws)?, rho1.density(&mut draws)?);
                run_appendix(*xi, *lambda, *eta, &r0, &r1, &apparatus.build(self.seed)?)?
            }
            ExperimentSpec::Mixture { state, apparatus } => {
                check_general_mixture(&state.components(&mut draws)?, &apparatus.build(self.seed)?)?
            }
            ExperimentSpec::Envariance { state, phases, apparatus } => {
                check_envariance(&state.pure()?, phases, &apparatus.build(self.seed)?)?
            }
            ExperimentSpec::Spin { apparatus } => spin_case_study(&apparatus.build(self.seed)?)?,
            ExperimentSpec::Born { psi1 } => {
                let cert = verify_born(&two_branch_apparatus(psi1)?, psi1)?;
                let checks = vec![
                    Check::new("purity", cert.purity_error()),
                    Check::new("antipodality", cert.antipodality_error()),
                    Check::new("born", cert.max_abs_error),
                    Check::new("closed_form", cert.closed_form_error),
                ];
                ExperimentReport::from_checks("born", 1.0, 1.0, CHAIN_TOL, checks)
            }
        };
        let report = match self.tolerance {
            Some(t) if !(t.is_finite() && t > 0.0) => {
                return Err(Error::Schema {
                    path: "tolerance".into(),
                    message: format!("{t} is not a positive number"),
                })
            }
            Some(t) => report.with_tolerance(t),
            None => report,
        };
        Ok(match &self.label {
            Some(l) => report.with_label(l.clone()),
            None => report,
        })
    }
}

impl Manifest {
    pub fn run(&self) -> Result<Vec<ExperimentReport>> {
        match self {
            Manifest::One(f) => Ok(vec![f.run()?]),
            Manifest::Many(fs) => fs.iter().map(ExperimentFile::run).collect(),
        }
    }
}
