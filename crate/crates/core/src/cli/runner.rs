//! Dispatches one experiment per invocation: parses and validates the
//! config, runs the named study, writes CSV artifacts and `manifest.json`.
//!
//! Exit-code contract: 2 schema violation, 3 numerical failure (partial
//! outputs plus an error record are kept), 4 I/O failure.

use super::config::{ExperimentConfig, ExperimentKind, InitSpec, MatrixSpec};
use super::manifest::Manifest;
use crate::conservation::{self, balance_report, laws_for};
use crate::criteria;
use crate::flows::{self, IntrinsicRhs, ScalarBalance, Trajectory};
use crate::linalg::{unvec, vec_mat, Matrix, Vector};
use crate::models::{as_monomial, Model};
use crate::neural_ode::{
    self, conserved_field, discrete_adjoint_gradient, euler_convergence_check, gamma_profile,
    infinite_depth_rhs, perturbed_balance_check, relaxed_field, state_solve, FieldGrid,
    GradientKind, LambdaProfile, QuadratureRule, StateScheme, DEFAULT_GAMMA_PANELS,
    DEFAULT_QUADRATURE_NODES,
};
use crate::objectives::Objective;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Environment variable that, when set, re-roots all output directories.
pub const OUTPUT_ROOT_ENV: &str = "INTRINSIC_FLOW_OUT";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Schema(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Schema(_) => 2,
            RunError::Numerical(_) => 3,
            RunError::Io(_) => 4,
        }
    }
}

fn schema<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Schema(e.to_string())
}

fn numerical<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Numerical(e.to_string())
}

fn io_err<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Io(e.to_string())
}

/// Runs the experiment described by the config file; returns the manifest
/// and the directory the artifacts were written to.
pub fn run_config_path(path: &Path) -> Result<(Manifest, PathBuf), RunError> {
    let raw = fs::read_to_string(path).map_err(io_err)?;
    run_config_str(&raw)
}

/// Same, from raw JSON text.
pub fn run_config_str(raw: &str) -> Result<(Manifest, PathBuf), RunError> {
    let config: ExperimentConfig = serde_json::from_str(raw).map_err(schema)?;
    let config_hash = hex_digest(raw.as_bytes());
    let dir = resolve_output_dir(&config);
    let mut manifest = Manifest::new(
        config.experiment.as_str(),
        config_hash,
        config.seed,
        config.tolerances.clone(),
    );
    // everything below may produce partial outputs; the writer tracks them
    let mut writer = ArtifactWriter::new(&dir, &config.output.prefix);
    let result = match config.experiment {
        ExperimentKind::RunFlow => run_flow(&config, &mut writer, &mut manifest),
        ExperimentKind::CompareIntrinsic => compare_intrinsic(&config, &mut writer, &mut manifest),
        ExperimentKind::CheckCriteria => check_criteria(&config, &mut writer, &mut manifest),
        ExperimentKind::Counterexample => counterexample(&config, &mut writer, &mut manifest),
        ExperimentKind::NeuralOde => neural_ode_study(&config, &mut writer, &mut manifest),
        ExperimentKind::Convergence => convergence_study(&config, &mut writer, &mut manifest),
    };
    manifest.outputs = writer.written();
    match result {
        Ok(()) => {
            manifest.finalize();
            let json = manifest.to_json();
            writer.write_raw("manifest.json", &json)?;
            Ok((manifest, dir))
        }
        Err(e @ RunError::Numerical(_)) => {
            manifest.status = "numerical-error".to_string();
            manifest.pass = false;
            let record = format!(
                "{{\n  \"error\": {}\n}}\n",
                serde_json::to_string(&e.to_string()).unwrap()
            );
            let _ = writer.write_raw("error.json", &record);
            let _ = writer.write_raw("manifest.json", &manifest.to_json());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn resolve_output_dir(config: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(&config.output.dir),
        None => PathBuf::from(&config.output.dir),
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(out.len() * 2);
    for b in out {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Buffers artifact rows and writes files once, creating the directory on
/// first write (so a config error never leaves partial files behind).
struct ArtifactWriter {
    dir: PathBuf,
    prefix: String,
    written: Vec<String>,
}

impl ArtifactWriter {
    fn new(dir: &Path, prefix: &str) -> Self {
        ArtifactWriter {
            dir: dir.to_path_buf(),
            prefix: prefix.to_string(),
            written: Vec::new(),
        }
    }

    fn write_raw(&mut self, name: &str, content: &str) -> Result<(), RunError> {
        fs::create_dir_all(&self.dir).map_err(io_err)?;
        let path = self.dir.join(name);
        fs::write(&path, content).map_err(io_err)?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    fn write_csv(&mut self, stem: &str, header: &str, rows: &[String]) -> Result<(), RunError> {
        let mut content = String::with_capacity(rows.len() * 32 + header.len() + 1);
        content.push_str(header);
        content.push('\n');
        for r in rows {
            content.push_str(r);
            content.push('\n');
        }
        let name = format!("{}_{stem}.csv", self.prefix);
        self.write_raw(&name, &content)
    }

    fn written(&self) -> Vec<String> {
        self.written.clone()
    }
}

fn csv_row(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s
}

fn state_header(k: usize) -> String {
    let mut h = String::from("t");
    for i in 0..k {
        let _ = write!(h, ",state_{i}");
    }
    h
}

fn write_trajectory(
    writer: &mut ArtifactWriter,
    stem: &str,
    traj: &Trajectory,
) -> Result<(), RunError> {
    let k = traj.states.first().map_or(0, Vector::len);
    let rows: Vec<String> = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(t, s)| {
            let mut vals = Vec::with_capacity(k + 1);
            vals.push(*t);
            vals.extend(s.iter().cloned());
            csv_row(&vals)
        })
        .collect();
    writer.write_csv(stem, &state_header(k), &rows)
}

fn require_model(config: &ExperimentConfig) -> Result<Model, RunError> {
    config
        .model
        .as_ref()
        .ok_or_else(|| RunError::Schema("experiment requires a model spec".into()))?
        .build()
        .map_err(schema)
}

fn require_init(config: &ExperimentConfig) -> Result<&InitSpec, RunError> {
    config
        .init
        .as_ref()
        .ok_or_else(|| RunError::Schema("experiment requires an init spec".into()))
}

fn require_loss(config: &ExperimentConfig) -> Result<Objective, RunError> {
    config
        .loss
        .as_ref()
        .ok_or_else(|| RunError::Schema("experiment requires a loss spec".into()))?
        .build()
        .map_err(schema)
}

fn require_integrator(config: &ExperimentConfig) -> Result<(f64, f64), RunError> {
    let spec = config
        .integrator
        .as_ref()
        .ok_or_else(|| RunError::Schema("experiment requires an integrator spec".into()))?;
    if spec.scheme != "rk4" {
        return Err(RunError::Schema(format!(
            "unknown scheme {:?}; only \"rk4\" is shipped",
            spec.scheme
        )));
    }
    if spec.dt <= 0.0 || spec.t_final <= 0.0 {
        return Err(RunError::Schema("dt and t_final must be positive".into()));
    }
    Ok((spec.dt, spec.t_final))
}

// --- run-flow ---------------------------------------------------------

fn run_flow(
    config: &ExperimentConfig,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<(), RunError> {
    let model = require_model(config)?;
    let theta0 = require_init(config)?
        .build(&model, config.seed)
        .map_err(schema)?;
    let obj = require_loss(config)?;
    let (dt, t_final) = require_integrator(config)?;
    let traj = flows::param_gradient_flow(&model, &obj, &theta0, t_final, dt).map_err(numerical)?;
    write_trajectory(writer, "trajectory", &traj)?;

    let laws = laws_for(&model).map_err(numerical)?;
    let drift =
        conservation::conservation_drift(&traj.times, &traj.states, &laws).map_err(numerical)?;
    let mut rows = Vec::with_capacity(traj.len());
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut final_loss = f64::NAN;
    for (d, state) in drift.iter().zip(&traj.states) {
        let loss = obj
            .value(&model.lift(state).map_err(numerical)?)
            .map_err(numerical)?;
        rows.push(csv_row(&[d.time, d.absolute, d.relative, loss]));
        max_abs = max_abs.max(d.absolute);
        max_rel = max_rel.max(d.relative);
        final_loss = loss;
    }
    writer.write_csv("derived", "t,drift_abs,drift_rel,loss", &rows)?;
    manifest.insert("max_drift_abs", max_abs);
    manifest.insert("max_drift_rel", max_rel);
    manifest.insert("final_loss", final_loss);
    Ok(())
}

// --- compare-intrinsic ------------------------------------------------

/// Builds the intrinsic right-hand side matching the model at θ0, reading
/// the conserved data off the initialization.
fn intrinsic_rhs_for(model: &Model, theta0: &Vector) -> Result<IntrinsicRhs, RunError> {
    match model {
        Model::LinearChain { dims } => {
            let layout = model.layout();
            let depth = dims.len() - 1;
            if depth == 2 && model.lifted_dim() == 1 {
                // scalar product lifting: conserved Gram S = U2^T U2 - U1 U1^T
                let u1 = layout.view(theta0, 0);
                let u2 = layout.view(theta0, 1);
                let s = u2.transpose() * &u2 - &u1 * u1.transpose();
                return Ok(IntrinsicRhs::Scalar {
                    balance: ScalarBalance::Gram(s),
                });
            }
            let report = balance_report(theta0, dims).map_err(numerical)?;
            let worst = report
                .interfaces
                .iter()
                .map(|i| i.residual)
                .fold(0.0f64, f64::max);
            if worst > 1e-8 * (1.0 + theta0.norm()) {
                return Err(RunError::Numerical(format!(
                    "initialization is not relaxed balanced (residual {worst:.3e}); \
                     the intrinsic chain flow is only valid under relaxed balance"
                )));
            }
            if depth == 2 {
                let (n, m) = model.lift_shape().expect("chains have a lift shape");
                Ok(IntrinsicRhs::TwoLayer {
                    n,
                    m,
                    lambda: report.interfaces[0].lambda_star,
                })
            } else {
                if dims.iter().any(|&d| d != dims[0]) {
                    return Err(RunError::Schema(
                        "deep intrinsic chains need square layers".into(),
                    ));
                }
                Ok(IntrinsicRhs::DeepLinear {
                    n: dims[0],
                    lambda: report.lambdas(),
                })
            }
        }
        Model::DiagPath { n, m } => {
            let laws = laws_for(model).map_err(numerical)?;
            let h = laws.evaluate(theta0).map_err(numerical)?;
            let lambda = Vector::from_iterator(*n, h.iter().take(*n).cloned());
            let mu = Vector::from_iterator(*m, h.iter().skip(*n).cloned());
            Ok(IntrinsicRhs::ThreeLayer {
                n: *n,
                m: *m,
                lambda,
                mu,
            })
        }
        _ => Err(RunError::Schema(
            "compare-intrinsic supports linear chains and the diagonal path-lifting".into(),
        )),
    }
}

/// The intrinsic metric K(z) as an explicit d x d matrix, by applying the
/// (linear-in-G) right-hand side to canonical gradients.
fn intrinsic_metric_matrix(rhs: &IntrinsicRhs, z: &Vector) -> Result<Matrix, RunError> {
    let d = rhs.lifted_dim();
    let mut k = Matrix::zeros(d, d);
    for j in 0..d {
        let mut e = Vector::zeros(d);
        e[j] = 1.0;
        let col = rhs.eval(z, &e).map_err(numerical)?;
        // rhs = -K g, so the column is -rhs
        k.set_column(j, &(-col));
    }
    Ok(k)
}

fn compare_intrinsic(
    config: &ExperimentConfig,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<(), RunError> {
    let model = require_model(config)?;
    let theta0 = require_init(config)?
        .build(&model, config.seed)
        .map_err(schema)?;
    let obj = require_loss(config)?;
    let (dt, t_final) = require_integrator(config)?;

    let full = flows::param_gradient_flow(&model, &obj, &theta0, t_final, dt).map_err(numerical)?;
    let z_full = flows::lift_trajectory(&model, &full).map_err(numerical)?;
    let rhs = intrinsic_rhs_for(&model, &theta0)?;
    let z0 = model.lift(&theta0).map_err(numerical)?;
    let intrinsic = flows::intrinsic_flow(&rhs, &z0, &obj, t_final, dt).map_err(numerical)?;

    write_trajectory(writer, "z_full", &z_full)?;
    write_trajectory(writer, "z_intrinsic", &intrinsic)?;

    let compare = flows::trajectory_compare(&z_full, &intrinsic).map_err(numerical)?;
    let laws = laws_for(&model).map_err(numerical)?;
    let drift =
        conservation::conservation_drift(&full.times, &full.states, &laws).map_err(numerical)?;

    let mut rows = Vec::with_capacity(full.len());
    let mut compare_sup = 0.0f64;
    let mut metric_sup = 0.0f64;
    let mut max_drift_rel = 0.0f64;
    for (i, t) in full.times.iter().enumerate() {
        let m_full = model.metric(&full.states[i]).map_err(numerical)?;
        let k_intr = intrinsic_metric_matrix(&rhs, &z_full.states[i])?;
        let metric_err = (&m_full - &k_intr).norm() / m_full.norm().max(1e-300);
        let loss_full = obj.value(&z_full.states[i]).map_err(numerical)?;
        let loss_intr = obj.value(&intrinsic.states[i]).map_err(numerical)?;
        rows.push(csv_row(&[
            *t,
            compare[i],
            metric_err,
            drift[i].relative,
            loss_full,
            loss_intr,
        ]));
        compare_sup = compare_sup.max(compare[i]);
        metric_sup = metric_sup.max(metric_err);
        max_drift_rel = max_drift_rel.max(drift[i].relative);
    }
    writer.write_csv(
        "derived",
        "t,compare_error,metric_identity_error,drift_rel,loss_full,loss_intrinsic",
        &rows,
    )?;
    manifest.insert("compare_error", compare_sup);
    manifest.insert("metric_identity_error", metric_sup);
    manifest.insert("max_drift_rel", max_drift_rel);
    manifest.insert(
        "final_loss_full",
        obj.value(z_full.last_state()).map_err(numerical)?,
    );
    manifest.insert(
        "final_loss_intrinsic",
        obj.value(intrinsic.last_state()).map_err(numerical)?,
    );
    Ok(())
}

// --- check-criteria ----------------------------------------------------

/// Nonzero-coordinate θ draw: uniform magnitudes in [0.5, 1.5) with random
/// signs, suitable for monomial liftings.
fn random_nonzero_theta(dim: usize, seed: u64) -> Vector {
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Vector::from_fn(dim, |_, _| {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        sign * (0.5 + rng.random::<f64>())
    })
}

fn check_criteria(
    config: &ExperimentConfig,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<(), RunError> {
    let model = require_model(config)?;
    let laws = laws_for(&model).map_err(numerical)?;
    let num_seeds = config.num_seeds.unwrap_or(20);
    let tol = 1e-8;
    let monomial = as_monomial(&model).ok();
    let dims_str = model_tag(&model);

    let mut rows = Vec::with_capacity(num_seeds);
    let mut frac_trivial = 0usize;
    let mut frac_inclusion = 0usize;
    let mut frac_frobenius = 0usize;
    let mut dim_span_min = usize::MAX;
    let mut dim_span_max = 0usize;
    let mut worst_dm = 0.0f64;
    for s in 0..num_seeds {
        let seed = config.seed.wrapping_add(s as u64);
        let theta = random_nonzero_theta(model.param_dim(), seed);
        let report =
            criteria::kernel_inclusion_check(&model, &laws, &theta, tol).map_err(numerical)?;
        let frob = match &monomial {
            Some(ml) => Some(
                criteria::frobenius_check(ml, &theta, crate::linalg::RANK_TOL, 1)
                    .map_err(numerical)?,
            ),
            None => None,
        };
        frac_trivial += report.intersection_trivial as usize;
        frac_inclusion += report.inclusion_holds as usize;
        worst_dm = worst_dm.max(report.worst_dm_norm);
        let (f_span, f_with, f_holds) = match &frob {
            Some(f) => {
                frac_frobenius += f.holds as usize;
                dim_span_min = dim_span_min.min(f.dim_span);
                dim_span_max = dim_span_max.max(f.dim_span);
                (
                    f.dim_span.to_string(),
                    f.dim_span_with_brackets.to_string(),
                    f.holds.to_string(),
                )
            }
            None => (String::new(), String::new(), String::new()),
        };
        rows.push(format!(
            "{seed},{dims_str},{},{},{},{},{},{},{},{f_span},{f_with},{f_holds}",
            report.dim_ker_phi,
            report.dim_ker_h,
            report.dim_intersection,
            report.worst_dm_norm,
            report.dm_scale,
            report.intersection_trivial,
            report.inclusion_holds,
        ));
    }
    writer.write_csv(
        "criteria",
        "seed,dims,dim_ker_phi,dim_ker_h,dim_intersection,worst_dm_norm,dm_scale,\
         intersection_trivial,inclusion_holds,frobenius_dim_span,\
         frobenius_dim_span_with_brackets,frobenius_holds",
        &rows,
    )?;
    let n = num_seeds as f64;
    manifest.insert("frac_intersection_trivial", frac_trivial as f64 / n);
    manifest.insert("frac_inclusion_holds", frac_inclusion as f64 / n);
    manifest.insert("worst_dm_norm_max", worst_dm);
    manifest.verdict("intersection_trivial", frac_trivial == num_seeds);
    manifest.verdict("inclusion_holds", frac_inclusion == num_seeds);
    if monomial.is_some() {
        manifest.insert("frac_frobenius_holds", frac_frobenius as f64 / n);
        manifest.insert("frobenius_dim_span_min", dim_span_min as f64);
        manifest.insert("frobenius_dim_span_max", dim_span_max as f64);
        manifest.verdict("frobenius_holds", frac_frobenius == num_seeds);
    }
    Ok(())
}

fn model_tag(model: &Model) -> String {
    match model {
        Model::LinearChain { dims } => format!(
            "linear_chain[{}]",
            dims.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(";")
        ),
        Model::RankOne { n, m, r } => format!("rank_one[{n};{m};{r}]"),
        Model::DiagPath { n, m } => format!("diag_path[{n};{m}]"),
        Model::Attention { d1, dim } => format!("attention[{d1};{dim}]"),
    }
}

// --- counterexample ----------------------------------------------------

fn counterexample(
    config: &ExperimentConfig,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<(), RunError> {
    let model = require_model(config)?;
    let Model::LinearChain { dims } = &model else {
        return Err(RunError::Schema(
            "counterexample expects a two-layer linear chain (dims [m, r, n])".into(),
        ));
    };
    if dims.len() != 3 {
        return Err(RunError::Schema(
            "counterexample expects exactly two layers".into(),
        ));
    }
    let (m, r, n) = (dims[0], dims[1], dims[2]);
    let num_seeds = config.num_seeds.unwrap_or(20);
    let mut rows = Vec::with_capacity(num_seeds);
    let mut max_dphi_ratio = 0.0f64;
    let mut max_dh_ratio = 0.0f64;
    let mut min_dm_ratio = f64::INFINITY;
    let mut produced = 0usize;
    let mut seed_cursor = 0u64;
    while produced < num_seeds {
        let seed = config.seed.wrapping_add(seed_cursor);
        seed_cursor += 1;
        if seed_cursor > 100 * num_seeds as u64 {
            return Err(RunError::Numerical(
                "could not draw enough unbalanced full-rank factor pairs".into(),
            ));
        }
        let u = MatrixSpec::Random {
            rows: n,
            cols: r,
            seed,
            scale: 1.0,
        }
        .build();
        let v = MatrixSpec::Random {
            rows: m,
            cols: r,
            seed: seed.wrapping_add(0x9e37_79b9),
            scale: 1.0,
        }
        .build();
        let dir = match criteria::counterexample_direction(&u, &v) {
            Ok(d) => d,
            Err(criteria::CriteriaError::RelaxedBalanced { .. })
            | Err(criteria::CriteriaError::RankDeficient(..)) => continue,
            Err(e) => return Err(numerical(e)),
        };
        let dphi_ratio = dir.dphi_norm / dir.dphi_scale.max(1e-300);
        let dh_ratio = dir.dh_norm / dir.dh_scale.max(1e-300);
        let dm_ratio = dir.dm_norm / dir.dm_scale.max(1e-300);
        max_dphi_ratio = max_dphi_ratio.max(dphi_ratio);
        max_dh_ratio = max_dh_ratio.max(dh_ratio);
        min_dm_ratio = min_dm_ratio.min(dm_ratio);
        rows.push(format!(
            "{seed},{n},{m},{r},{}",
            csv_row(&[
                dir.dphi_norm,
                dir.dphi_scale,
                dphi_ratio,
                dir.dh_norm,
                dir.dh_scale,
                dh_ratio,
                dir.dm_norm,
                dir.dm_scale,
                dm_ratio,
            ])
        ));
        produced += 1;
    }
    writer.write_csv(
        "counterexample",
        "seed,n,m,r,dphi_norm,dphi_scale,dphi_ratio,dh_norm,dh_scale,dh_ratio,\
         dm_norm,dm_scale,dm_ratio",
        &rows,
    )?;
    manifest.insert("max_dphi_ratio", max_dphi_ratio);
    manifest.insert("max_dh_ratio", max_dh_ratio);
    manifest.insert("min_dm_ratio", min_dm_ratio);
    Ok(())
}

// --- neural-ode ---------------------------------------------------------

fn neural_ode_study(
    config: &ExperimentConfig,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<(), RunError> {
    let field_spec = config
        .field
        .as_ref()
        .ok_or_else(|| RunError::Schema("neural-ode requires a field spec".into()))?;
    let profile = config
        .lambda_profile
        .as_ref()
        .map(|l| l.build())
        .unwrap_or(LambdaProfile::Constant(0.0));
    let obj = require_loss(config)?;
    let (dt, t_final) = require_integrator(config)?;
    let a0 = field_spec.a0();
    let grid = relaxed_field(&profile, &a0, field_spec.l).map_err(numerical)?;
    let n = field_spec.n;

    // exactness of the discrete adjoint against FD of the discrete loss
    let adjoint_fd_err = adjoint_fd_check(&grid, &obj).map_err(numerical)?;
    manifest.insert("adjoint_fd_err", adjoint_fd_err);

    // the flow itself (discrete-adjoint gradient)
    let flow = neural_ode::functional_gradient_flow(&grid, &obj, t_final, dt).map_err(numerical)?;
    let mut z_rows = Vec::with_capacity(flow.times.len());
    let mut drift_rows = Vec::with_capacity(flow.times.len());
    let h0 = conserved_field(&flow.fields[0]).map_err(numerical)?;
    let mut h_drift_max = 0.0f64;
    let mut final_loss = f64::NAN;
    for (i, t) in flow.times.iter().enumerate() {
        let mut vals = vec![*t];
        vals.extend(vec_mat(&flow.z1[i]).iter().cloned());
        z_rows.push(csv_row(&vals));
        let hs = conserved_field(&flow.fields[i]).map_err(numerical)?;
        let drift = hs
            .iter()
            .zip(&h0)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        h_drift_max = h_drift_max.max(drift);
        let loss = obj.value(&vec_mat(&flow.z1[i])).map_err(numerical)?;
        drift_rows.push(csv_row(&[*t, drift, loss]));
        final_loss = loss;
    }
    writer.write_csv("z1", &state_header(n * n).replace("state", "z1"), &z_rows)?;
    writer.write_csv("h_drift", "t,h_drift_max,loss", &drift_rows)?;
    manifest.insert("h_drift_max", h_drift_max);
    manifest.insert("final_loss", final_loss);

    // perturbed-balance diagnostics at start and end
    let pb0 = perturbed_balance_check(&grid, &profile).map_err(numerical)?;
    let pb1 = perturbed_balance_check(flow.fields.last().unwrap(), &profile).map_err(numerical)?;
    manifest.insert("eta_initial", pb0.eta);
    manifest.insert("eta_final", pb1.eta);
    manifest.insert("suffix_poly_gap_initial", pb0.suffix_poly_gap);
    Ok(())
}

fn adjoint_fd_check(grid: &FieldGrid, obj: &Objective) -> Result<f64, RunError> {
    let grads = discrete_adjoint_gradient(grid, obj).map_err(numerical)?;
    let l = grid.l();
    let n = grid.n();
    let h = grid.h();
    let loss = |g: &FieldGrid| -> Result<f64, RunError> {
        let path = state_solve(g, StateScheme::Euler);
        obj.value(&vec_mat(&path[l])).map_err(numerical)
    };
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (k, gk) in grads.iter().enumerate() {
        for idx in 0..n * n {
            let mut up = grid.clone();
            let mut dn = grid.clone();
            up.sample_mut(k)[idx] += eps;
            dn.sample_mut(k)[idx] -= eps;
            let fd = (loss(&up)? - loss(&dn)?) / (2.0 * eps) / h;
            let analytic = gk.as_slice()[idx];
            worst = worst.max((fd - analytic).abs() / (1.0 + analytic.abs()));
        }
    }
    Ok(worst)
}

// --- convergence --------------------------------------------------------

fn convergence_study(
    config: &ExperimentConfig,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<(), RunError> {
    let field_spec = config
        .field
        .as_ref()
        .ok_or_else(|| RunError::Schema("convergence requires a field spec".into()))?;
    let profile = config
        .lambda_profile
        .as_ref()
        .map(|l| l.build())
        .unwrap_or(LambdaProfile::Constant(0.0));
    let obj = require_loss(config)?;
    let (dt, t_final) = require_integrator(config)?;
    let l_values = config
        .l_values
        .clone()
        .unwrap_or_else(|| vec![8, 16, 32, 64]);
    let a0 = field_spec.a0();
    let nodes = config.quadrature_nodes.unwrap_or(DEFAULT_QUADRATURE_NODES);

    // Euler state-solver convergence on the continuous relaxed field
    let continuous = {
        let a0 = a0.clone();
        let profile = profile.clone();
        let n = field_spec.n;
        move |s: f64| &a0 + Matrix::identity(n, n) * (0.5 * profile.integral(s))
    };
    let euler_rows = euler_convergence_check(&continuous, &l_values).map_err(numerical)?;
    let rows: Vec<String> = euler_rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{}",
                r.l,
                r.sup_error,
                r.ratio.map(|x| x.to_string()).unwrap_or_default()
            )
        })
        .collect();
    writer.write_csv("euler", "l,sup_error,ratio", &rows)?;
    let euler_ratios: Vec<f64> = euler_rows.iter().filter_map(|r| r.ratio).collect();
    if let (Some(min), Some(max)) = (
        euler_ratios.iter().cloned().reduce(f64::min),
        euler_ratios.iter().cloned().reduce(f64::max),
    ) {
        manifest.insert("euler_ratio_min", min);
        manifest.insert("euler_ratio_max", max);
    }

    // γ diagnostics: fixed probes plus the configured profile
    let gm = |p: &LambdaProfile| -> Result<f64, RunError> {
        Ok(gamma_profile(p, DEFAULT_GAMMA_PANELS)
            .map_err(numerical)?
            .max_abs())
    };
    manifest.insert("gamma_max_zero", gm(&LambdaProfile::Constant(0.0))?);
    manifest.insert("gamma_max_const_0_4", gm(&LambdaProfile::Constant(0.4))?);
    manifest.insert("gamma_max_linear_probe", gm(&LambdaProfile::LinearS)?);
    manifest.insert("gamma_max_profile", gm(&profile)?);

    // infinite-depth limit: discretized functional flow vs intrinsic flow
    let gamma = gamma_profile(&profile, DEFAULT_GAMMA_PANELS).map_err(numerical)?;
    let rule = QuadratureRule::gauss_legendre(nodes).map_err(numerical)?;
    let n = field_spec.n;
    // intrinsic start: the continuum Z_1(0) for the relaxed field
    let fine = FieldGrid::sample(&continuous, 4096).map_err(numerical)?;
    let z1_start = state_solve(&fine, StateScheme::Rk4)
        .pop()
        .expect("path has entries");
    let intr_rhs = |z: &Vector| -> Result<Vector, flows::FlowError> {
        let zm = unvec(z, n, n)?;
        let g = unvec(&obj.gradient(z)?, n, n)?;
        let out = infinite_depth_rhs(&zm, &gamma, &g, &rule)
            .map_err(|e| flows::FlowError::External(e.to_string()))?;
        Ok(vec_mat(&out))
    };
    let intr_traj =
        flows::rk4_integrate(&intr_rhs, &vec_mat(&z1_start), t_final, dt).map_err(numerical)?;
    let z1_intr = unvec(intr_traj.last_state(), n, n).map_err(numerical)?;

    let mut depth_rows = Vec::with_capacity(l_values.len());
    let mut errors = Vec::with_capacity(l_values.len());
    for &l in &l_values {
        let grid = relaxed_field(&profile, &a0, l).map_err(numerical)?;
        let flow =
            neural_ode::functional_gradient_flow(&grid, &obj, t_final, dt).map_err(numerical)?;
        let err = (flow.z1.last().unwrap() - &z1_intr).norm();
        errors.push(err);
        let order = if errors.len() >= 2 {
            let prev = errors[errors.len() - 2];
            (prev / err).log2().to_string()
        } else {
            String::new()
        };
        depth_rows.push(format!("{l},{err},{order}"));
    }
    writer.write_csv("infinite_depth", "l,final_error,order", &depth_rows)?;
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    manifest.verdict("errors_monotone", monotone);
    manifest.insert("errors_monotone", if monotone { 1.0 } else { 0.0 });
    if errors.len() >= 2 {
        // least-squares slope of log error against log L
        let logs: Vec<(f64, f64)> = l_values
            .iter()
            .zip(&errors)
            .map(|(&l, &e)| ((l as f64).ln(), e.ln()))
            .collect();
        let n_pts = logs.len() as f64;
        let sx: f64 = logs.iter().map(|p| p.0).sum();
        let sy: f64 = logs.iter().map(|p| p.1).sum();
        let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
        let slope = (n_pts * sxy - sx * sy) / (n_pts * sxx - sx * sx);
        manifest.insert("empirical_order", -slope);
    }
    manifest.insert("final_error_last", *errors.last().unwrap());

    // conserved-field drift refinement along the continuum-gradient flow
    if l_values.len() >= 2 {
        let drift_at = |l: usize, dt_loc: f64| -> Result<f64, RunError> {
            let grid = relaxed_field(&profile, &a0, l).map_err(numerical)?;
            let flow = neural_ode::functional_gradient_flow_with(
                &grid,
                &obj,
                t_final,
                dt_loc,
                GradientKind::ContinuumClosedForm,
            )
            .map_err(numerical)?;
            let h0 = conserved_field(&flow.fields[0]).map_err(numerical)?;
            let hf = conserved_field(flow.fields.last().unwrap()).map_err(numerical)?;
            Ok(h0
                .iter()
                .zip(&hf)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0f64, f64::max))
        };
        let l0 = l_values[0];
        let coarse = drift_at(l0, dt * 2.0)?;
        let fine_drift = drift_at(2 * l0, dt)?;
        manifest.insert("h_drift_coarse", coarse);
        manifest.insert("h_drift_fine", fine_drift);
        manifest.insert("h_drift_refinement_ratio", coarse / fine_drift.max(1e-300));
    }
    Ok(())
}
