//! JSON experiment configuration: schema-validated (unknown keys rejected)
//! before any output is produced.

use crate::conservation::{
    make_random, make_relaxed_balanced, make_relaxed_balanced_diag_path, ConservationError,
};
use crate::linalg::{symmetrize, Matrix, Vector};
use crate::models::Model;
use crate::neural_ode::LambdaProfile;
use crate::objectives::{attention_loss, quadratic_loss, Objective};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorSpec>,
    /// λ(s) profile for the neural-ODE experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_profile: Option<LambdaSpec>,
    /// Field geometry for the neural-ODE experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSpec>,
    /// Grid sizes swept by the convergence experiment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_values: Option<Vec<usize>>,
    /// Number of sampled points / draws for scan experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_seeds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature_nodes: Option<usize>,
    #[serde(default)]
    pub tolerances: ToleranceSpec,
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    RunFlow,
    CompareIntrinsic,
    CheckCriteria,
    Counterexample,
    NeuralOde,
    Convergence,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::RunFlow => "run-flow",
            ExperimentKind::CompareIntrinsic => "compare-intrinsic",
            ExperimentKind::CheckCriteria => "check-criteria",
            ExperimentKind::Counterexample => "counterexample",
            ExperimentKind::NeuralOde => "neural-ode",
            ExperimentKind::Convergence => "convergence",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    LinearChain { dims: Vec<usize> },
    RankOne { n: usize, m: usize, r: usize },
    DiagPath { n: usize, m: usize },
    Attention { d1: usize, dim: usize },
}

impl ModelSpec {
    pub fn build(&self) -> Result<Model, crate::models::ModelError> {
        match self {
            ModelSpec::LinearChain { dims } => crate::models::linear_chain(dims),
            ModelSpec::RankOne { n, m, r } => crate::models::rank_one_lift(*n, *m, *r),
            ModelSpec::DiagPath { n, m } => crate::models::diag_path_lift(*n, *m),
            ModelSpec::Attention { d1, dim } => crate::models::attention_lift(*d1, *dim),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// All balance defects zero.
    Balanced {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Relaxed balanced with the given shifts (for a chain: one per
    /// interface; for the diagonal path-lifting: n lambdas then m mus).
    Relaxed {
        lambda: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Unstructured Gaussian.
    Random {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum InitError {
    #[error("init kind is not supported for this model: {0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Conservation(#[from] ConservationError),
}

impl InitSpec {
    pub fn seed_or(&self, fallback: u64) -> u64 {
        match self {
            InitSpec::Balanced { seed }
            | InitSpec::Relaxed { seed, .. }
            | InitSpec::Random { seed } => seed.unwrap_or(fallback),
        }
    }

    pub fn build(&self, model: &Model, fallback_seed: u64) -> Result<Vector, InitError> {
        let seed = self.seed_or(fallback_seed);
        match self {
            InitSpec::Random { .. } => Ok(make_random(model, seed)),
            InitSpec::Balanced { .. } => build_relaxed(model, None, seed),
            InitSpec::Relaxed { lambda, .. } => build_relaxed(model, Some(lambda), seed),
        }
    }
}

fn build_relaxed(model: &Model, lambda: Option<&[f64]>, seed: u64) -> Result<Vector, InitError> {
    match model {
        Model::LinearChain { dims } => {
            let n_ifc = dims.len().saturating_sub(2);
            let lam = match lambda {
                Some(l) => l.to_vec(),
                None => vec![0.0; n_ifc],
            };
            Ok(make_relaxed_balanced(dims, &lam, seed)?)
        }
        Model::DiagPath { n, m } => {
            let (lam, mu) = match lambda {
                Some(l) => {
                    let lam = l.get(..*n).unwrap_or_default().to_vec();
                    let mu = l.get(*n..).unwrap_or_default().to_vec();
                    (lam, mu)
                }
                None => (vec![0.0; *n], vec![0.0; *m]),
            };
            Ok(make_relaxed_balanced_diag_path(*n, *m, &lam, &mu, seed)?)
        }
        Model::RankOne { n, m, r } => {
            // per-neuron shifts: |u_j|^2 - |v_j|^2 = lambda_j
            let lam = match lambda {
                Some(l) => l.to_vec(),
                None => vec![0.0; *r],
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut u = Matrix::zeros(*n, *r);
            let mut v = Matrix::zeros(*m, *r);
            for j in 0..*r {
                for i in 0..*n {
                    let g: f64 = rng.sample(StandardNormal);
                    u[(i, j)] = g;
                }
                for i in 0..*m {
                    let g: f64 = rng.sample(StandardNormal);
                    v[(i, j)] = g;
                }
                let target = u.column(j).norm_squared() - lam.get(j).copied().unwrap_or(0.0);
                if target <= 0.0 {
                    return Err(InitError::Conservation(
                        ConservationError::InfeasibleLambda {
                            interface: j,
                            value: target,
                        },
                    ));
                }
                let scale = (target.sqrt()) / v.column(j).norm();
                for i in 0..*m {
                    v[(i, j)] *= scale;
                }
            }
            Ok(model
                .layout()
                .pack(&[u, v])
                .expect("layout matches construction"))
        }
        Model::Attention { .. } => Err(InitError::Unsupported(
            "attention ships with random initialization only",
        )),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    Quadratic {
        target: MatrixSpec,
    },
    Attention {
        tokens: MatrixSpec,
        target: MatrixSpec,
    },
}

impl LossSpec {
    pub fn build(&self) -> Result<Objective, crate::objectives::ObjectiveError> {
        match self {
            LossSpec::Quadratic { target } => quadratic_loss(target.build()),
            LossSpec::Attention { tokens, target } => {
                attention_loss(tokens.build(), target.build())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum MatrixSpec {
    /// Explicit row-major data.
    Rows(Vec<Vec<f64>>),
    /// Seeded Gaussian draw.
    Random {
        rows: usize,
        cols: usize,
        seed: u64,
        #[serde(default = "default_scale")]
        scale: f64,
    },
}

fn default_scale() -> f64 {
    1.0
}

impl MatrixSpec {
    pub fn build(&self) -> Matrix {
        match self {
            MatrixSpec::Rows(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                Matrix::from_fn(r, c, |i, j| rows[i][j])
            }
            MatrixSpec::Random {
                rows,
                cols,
                seed,
                scale,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Matrix::from_fn(*rows, *cols, |_, _| {
                    let g: f64 = rng.sample(StandardNormal);
                    g * scale
                })
            }
        }
    }

    /// Symmetrized variant, for fields that must be symmetric.
    pub fn build_symmetric(&self) -> Matrix {
        symmetrize(&self.build())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSpec {
    pub dt: f64,
    pub t_final: f64,
    #[serde(default = "default_scheme")]
    pub scheme: String,
}

fn default_scheme() -> String {
    "rk4".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSpec {
    Constant { value: f64 },
    LinearS,
    QuadraticS,
    Sampled { values: Vec<f64> },
}

impl LambdaSpec {
    pub fn build(&self) -> LambdaProfile {
        match self {
            LambdaSpec::Constant { value } => LambdaProfile::Constant(*value),
            LambdaSpec::LinearS => LambdaProfile::LinearS,
            LambdaSpec::QuadraticS => LambdaProfile::QuadraticS,
            LambdaSpec::Sampled { values } => LambdaProfile::Sampled(values.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    /// State dimension n (fields are n x n).
    pub n: usize,
    /// Grid size L.
    pub l: usize,
    /// Seed of the symmetric Gaussian A_0.
    pub a0_seed: u64,
    #[serde(default = "default_a0_scale")]
    pub a0_scale: f64,
}

fn default_a0_scale() -> f64 {
    0.5
}

impl FieldSpec {
    pub fn a0(&self) -> Matrix {
        MatrixSpec::Random {
            rows: self.n,
            cols: self.n,
            seed: self.a0_seed,
            scale: self.a0_scale,
        }
        .build_symmetric()
    }
}

/// Upper (`max`) and lower (`min`) bounds checked against summary metrics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSpec {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub max: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub min: BTreeMap<String, f64>,
}

impl ToleranceSpec {
    pub fn is_empty(&self) -> bool {
        self.max.is_empty() && self.min.is_empty()
    }

    /// All bounds satisfied; a bound on a missing metric fails.
    pub fn pass(&self, summary: &BTreeMap<String, f64>) -> bool {
        self.max
            .iter()
            .all(|(k, v)| summary.get(k).is_some_and(|x| x <= v))
            && self
                .min
                .iter()
                .all(|(k, v)| summary.get(k).is_some_and(|x| x >= v))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: String,
    pub prefix: String,
}
