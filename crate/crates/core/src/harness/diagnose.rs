//! Run-level diagnostics and parameter sweeps on top of the simulation loop.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::scenario::generate_scenario;
use super::sim::{run_with_probe, SimTrace, StepProbe};
use crate::analysis::{
    error_dynamics_check, lyapunov_decay_check, matrix_ff_conditions, measure_contraction,
    small_gain_certificate, verify_kernel_invariance, AppendixBReport, ContractionReport,
    ErrorDynamicsReport, ErrorDynamicsSample, FrozenAdmmOperator, KernelReport, LyapunovReport,
    StabilityCertificate,
};
use crate::error::{Error, Result};
use crate::observer::Forgetting;
use crate::solvers::{local_corrections, residual_source, SolverKind};
use crate::topology::DualLayout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Frozen operators are sampled every `kernel_stride` steps below `kernel_horizon`.
    pub kernel_horizon: usize,
    pub kernel_stride: usize,
    /// Steps at which the frozen ADMM iteration is run to measure contraction.
    pub contraction_steps: Vec<usize>,
    pub contraction_iters: usize,
    pub appendix_b_stride: usize,
    /// Steps over which the error-dynamics identity is checked.
    pub error_dynamics_horizon: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            kernel_horizon: 500,
            kernel_stride: 50,
            contraction_steps: vec![0, 10, 100],
            contraction_iters: 100,
            appendix_b_stride: 10,
            error_dynamics_horizon: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionSummary {
    pub steps: Vec<usize>,
    pub mu_hat: f64,
    pub all_monotone: bool,
    pub reports: Vec<ContractionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixBSummary {
    pub samples: usize,
    pub max_congruence: f64,
    pub max_condition: f64,
    pub max_uniform: f64,
    pub ordered: bool,
    pub s_min: f64,
    pub s_max: f64,
}

impl From<&AppendixBReport> for AppendixBSummary {
    fn from(r: &AppendixBReport) -> Self {
        Self {
            samples: r.congruence.len(),
            max_congruence: r.max_congruence,
            max_condition: r.max_condition,
            max_uniform: r.max_uniform,
            ordered: r.ordered,
            s_min: r.s_min,
            s_max: r.s_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub solver: SolverKind,
    pub seed: u64,
    pub steps: usize,
    pub config_hash: String,
    /// Decay factor used for the Lyapunov test: `γ`, or the largest
    /// congruence bound for diagonal forgetting.
    pub gamma_bar: f64,
    pub lyapunov: LyapunovReport,
    pub appendix_b: Option<AppendixBSummary>,
    pub kernel: Option<KernelReport>,
    pub contraction: Option<ContractionSummary>,
    pub certificate: Option<StabilityCertificate>,
    pub error_dynamics: Option<ErrorDynamicsReport>,
}

fn frozen_operator(kind: SolverKind, probe: &StepProbe, layout: &DualLayout, rho: f64, alpha: f64) -> Result<FrozenAdmmOperator> {
    if kind == SolverKind::AdmmDirect {
        let xl = local_corrections(&probe.contributions)?;
        let res = residual_source(&probe.contributions, &xl);
        FrozenAdmmOperator::build(&res, layout, rho, alpha)
    } else {
        FrozenAdmmOperator::build(&probe.contributions, layout, rho, alpha)
    }
}

/// Re-runs the configured scenario, sampling dense operators along the way.
pub fn analyze(config: &ScenarioConfig, opts: &AnalysisOptions) -> Result<(SimTrace, AnalysisReport)> {
    let scenario = Arc::new(generate_scenario(config)?);
    let kind = config.solver;
    let params = config.solver_params();
    let layout = DualLayout::new(scenario.topology());
    let want_kernel = |k: usize| kind.uses_dual() && k < opts.kernel_horizon && k % opts.kernel_stride.max(1) == 0;
    let want_contraction = |k: usize| kind.uses_dual() && opts.contraction_steps.contains(&k);
    let want_b = |k: usize| k % opts.appendix_b_stride.max(1) == 0;
    let noiseless = config.noise_std == 0.0;
    let want_dyn = |k: usize| noiseless && k <= opts.error_dynamics_horizon;

    let mut ops = Vec::new();
    let mut contraction = Vec::new();
    let mut s_trace: Vec<DMatrix<f64>> = Vec::new();
    let mut dyn_samples: Vec<ErrorDynamicsSample> = Vec::new();
    let mut pending: Option<StepProbe> = None;
    let epsilon = config.epsilon;

    let trace = run_with_probe(
        scenario.clone(),
        kind,
        params,
        |k| want_kernel(k) || want_contraction(k) || want_b(k) || want_dyn(k) || want_dyn(k.wrapping_sub(1)),
        |probe| {
            let k = probe.k;
            if let Some(prev) = pending.take() {
                if prev.k + 1 == k {
                    dyn_samples.push(ErrorDynamicsSample {
                        x_err: prev.x_err.clone(),
                        x_err_next: probe.x_err.clone(),
                        dynamics: prev.dynamics.clone(),
                        s_post: prev.s_post.clone(),
                        s_prior: prev.s_prior.clone(),
                        xi_err: &prev.xi_exact - &prev.xi_hat,
                        epsilon,
                        floor: probe.truth_norm.max(1.0),
                    });
                }
            }
            if want_kernel(k) || want_contraction(k) {
                let op = frozen_operator(kind, &probe, &layout, params.rho, params.alpha)?;
                if want_contraction(k) {
                    if let Some(q0) = &probe.q0 {
                        contraction.push((k, measure_contraction(&op, q0, opts.contraction_iters)?));
                    }
                }
                if want_kernel(k) {
                    ops.push(op);
                }
            }
            if want_b(k) {
                s_trace.push(probe.s_post.clone());
            }
            if want_dyn(k) {
                pending = Some(probe);
            }
            Ok(())
        },
    )?;

    let n = scenario.topology().n_agents();
    let d = scenario.topology().state_dim();
    let gamma_matrix = match &scenario.forgetting {
        Forgetting::Scalar(g) => DMatrix::identity(n * d, n * d) * g.sqrt(),
        f => f.dense(n, d)?,
    };
    let appendix_b = if s_trace.is_empty() {
        None
    } else {
        Some(matrix_ff_conditions(&s_trace, &gamma_matrix)?)
    };
    let gamma_bar = match scenario.forgetting.scalar() {
        Some(g) => g,
        None => appendix_b.as_ref().map(|r| r.max_congruence).unwrap_or(1.0),
    };

    let v = trace.column(|r| r.lyapunov_v);
    let lyapunov = lyapunov_decay_check(&v, gamma_bar, 1, 1e-12);

    let contraction = (!contraction.is_empty()).then(|| ContractionSummary {
        steps: contraction.iter().map(|c| c.0).collect(),
        mu_hat: contraction.iter().map(|c| c.1.mu_hat).fold(0.0, f64::max),
        all_monotone: contraction.iter().all(|c| c.1.monotone),
        reports: contraction.into_iter().map(|c| c.1).collect(),
    });
    let kernel = if ops.len() >= 2 {
        Some(verify_kernel_invariance(&ops, &layout)?)
    } else {
        None
    };

    let certificate = if trace.rows.len() >= 10 && kind != SolverKind::Richardson {
        let w: Vec<f64> = v.iter().map(|x| x.max(0.0).sqrt()).collect();
        let dist = trace.column(|r| r.dist_qeq);
        let mu = contraction.as_ref().map(|c| c.mu_hat).unwrap_or(0.0);
        Some(small_gain_certificate(&w, &dist, epsilon, gamma_bar, mu, params.h_iters)?)
    } else {
        None
    };

    let error_dynamics = if dyn_samples.is_empty() {
        None
    } else {
        Some(error_dynamics_check(&dyn_samples, 1e-9)?)
    };

    let report = AnalysisReport {
        solver: kind,
        seed: config.seed,
        steps: trace.rows.len(),
        config_hash: config.hash(),
        gamma_bar,
        lyapunov,
        appendix_b: appendix_b.as_ref().map(AppendixBSummary::from),
        kernel,
        contraction,
        certificate,
        error_dynamics,
    };
    Ok((trace, report))
}

/// Returns `config` with one key replaced. `value` is read as a TOML value,
/// falling back to a string.
pub fn with_param(config: &ScenarioConfig, name: &str, value: &str) -> Result<ScenarioConfig> {
    let mut table: toml::Table =
        toml::from_str(&config.to_toml_string()).map_err(|e| Error::Config(e.to_string()))?;
    let parsed: toml::Value = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    table.insert(name.to_string(), parsed);
    let cfg: ScenarioConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{name} = {value}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub solver: SolverKind,
    pub final_err_state_norm: f64,
    pub final_err_corr_norm: f64,
    /// Mean `‖ξ̃_k‖` over `k > 100` (over all steps for shorter runs).
    pub mean_err_corr_norm: f64,
    pub max_dist_qeq: f64,
}

pub fn sweep(base: &ScenarioConfig, param: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|value| {
            let cfg = with_param(base, param, value)?;
            let trace = super::sim::run(&cfg)?;
            let skip = if trace.rows.len() > 101 { 101 } else { 0 };
            let tail = &trace.rows[skip..];
            let mean = if tail.is_empty() {
                0.0
            } else {
                tail.iter().map(|r| r.err_corr_norm).sum::<f64>() / tail.len() as f64
            };
            Ok(SweepRow {
                param: param.to_string(),
                value: value.clone(),
                solver: cfg.solver,
                final_err_state_norm: trace.rows.last().map_or(0.0, |r| r.err_state_norm),
                final_err_corr_norm: trace.rows.last().map_or(0.0, |r| r.err_corr_norm),
                mean_err_corr_norm: mean,
                max_dist_qeq: trace.rows.iter().map(|r| r.dist_qeq).fold(0.0, f64::max),
            })
        })
        .collect()
}
