//! The observer loop: measurement update, correction, prediction, and
//! per-step error metrics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::scenario::{generate_scenario, rng_for, Scenario, Stream};
use crate::error::{Error, Result};
use crate::model::Measurements;
use crate::observer::{InfoContributions, ObserverState};
use crate::solvers::{solve_centralized, Corrector, SolverKind, SolverParams};

/// Metrics of one observer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    /// `‖x_k − x̂_{k|k-1}‖`.
    pub err_state_norm: f64,
    /// `‖ξ_k − ξ̂_k‖` with `ξ_k` the exact solution of the observer's system.
    pub err_corr_norm: f64,
    /// `x̃_kᵀ S_{k|k-1} x̃_k`.
    pub lyapunov_v: f64,
    /// `‖q_{k,0} − q*_k‖` for the dual solvers, zero otherwise.
    pub dist_qeq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub solver: SolverKind,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub rows: Vec<TraceRow>,
    /// Per step, per agent prior estimation error norms.
    pub agent_errors: Vec<Vec<f64>>,
    /// Prior estimation error of the centralized baseline observer.
    pub baseline_err: Option<Vec<f64>>,
}

impl SimTrace {
    pub fn column(&self, f: impl Fn(&TraceRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(row_finite)
    }
}

fn row_finite(r: &TraceRow) -> bool {
    r.err_state_norm.is_finite()
        && r.err_corr_norm.is_finite()
        && r.lyapunov_v.is_finite()
        && r.dist_qeq.is_finite()
}

/// Dense snapshot of one step, for diagnostics.
#[derive(Debug, Clone)]
pub struct StepProbe {
    pub k: usize,
    pub truth_norm: f64,
    pub x_err: DVector<f64>,
    pub s_prior: DMatrix<f64>,
    pub s_post: DMatrix<f64>,
    /// Posterior contributions `(S_{k|k}, b_k)` seen by the solver.
    pub contributions: InfoContributions,
    pub xi_exact: DVector<f64>,
    pub xi_hat: DVector<f64>,
    pub dynamics: DMatrix<f64>,
    /// Dual state before the step's inner iterations.
    pub q0: Option<DVector<f64>>,
}

pub struct Simulation {
    scenario: Arc<Scenario>,
    observer: ObserverState,
    corrector: Corrector,
    baseline: Option<ObserverState>,
    x_true: DVector<f64>,
    noise: Option<(ChaCha8Rng, Normal<f64>)>,
    k: usize,
}

impl Simulation {
    pub fn new(scenario: Arc<Scenario>) -> Result<Self> {
        let kind = scenario.config.solver;
        let params = scenario.config.solver_params();
        Self::with_solver(scenario, kind, params)
    }

    pub fn with_solver(scenario: Arc<Scenario>, kind: SolverKind, params: SolverParams) -> Result<Self> {
        let cfg = &scenario.config;
        let topo = scenario.topology().clone();
        let observer = ObserverState::new(
            topo.clone(),
            scenario.xhat0.clone(),
            &scenario.p0,
            cfg.epsilon,
            scenario.forgetting.clone(),
        )?;
        let baseline = cfg.baseline.then(|| observer.clone());
        let corrector = Corrector::new(kind, params, &topo)?;
        let noise = (cfg.noise_std > 0.0).then(|| {
            (
                rng_for(cfg.seed, Stream::Noise, 0),
                Normal::new(0.0, cfg.noise_std).expect("validated std"),
            )
        });
        Ok(Self {
            x_true: scenario.x0.clone(),
            scenario,
            observer,
            corrector,
            baseline,
            noise,
            k: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn observer(&self) -> &ObserverState {
        &self.observer
    }

    pub fn corrector(&self) -> &Corrector {
        &self.corrector
    }

    pub fn truth(&self) -> &DVector<f64> {
        &self.x_true
    }

    fn measure(&mut self) -> Result<Measurements> {
        let mut y = self.scenario.model.measure(&self.x_true, self.k)?;
        if let Some((rng, dist)) = self.noise.as_mut() {
            for v in y.local.values_mut().chain(y.relative.values_mut()) {
                v.iter_mut().for_each(|e| *e += dist.sample(rng));
            }
        }
        Ok(y)
    }

    /// Advances one step and returns its metrics, the per-agent errors,
    /// the baseline error and, if requested, a dense probe.
    pub fn step(&mut self, probe: bool) -> Result<(TraceRow, Vec<f64>, Option<f64>, Option<StepProbe>)> {
        let k = self.k;
        self.step_inner(probe).map_err(|e| e.at_step(k))
    }

    fn step_inner(&mut self, probe: bool) -> Result<(TraceRow, Vec<f64>, Option<f64>, Option<StepProbe>)> {
        let k = self.k;
        let model = self.scenario.model.clone();
        let d = model.state_dim();
        let x_err = &self.x_true - &self.observer.x_prior;
        let prior = self.observer.contributions.to_block_sparse();
        let lyapunov_v = x_err.dot(&prior.mul_vec(&x_err)?);
        let agent_errors = (0..model.topology().n_agents())
            .map(|i| x_err.rows(i * d, d).norm())
            .collect();
        let baseline_err = self
            .baseline
            .as_ref()
            .map(|b| (&self.x_true - &b.x_prior).norm());

        let y = self.measure()?;
        self.observer.measurement_update(&model, &y)?;
        let (s_post, b) = self.observer.contributions.assemble_dense(None);
        let xi_exact = solve_centralized(&s_post, &b)?;
        let q0 = if probe {
            self.corrector.admm_state().map(|s| s.q.clone())
        } else {
            None
        };
        let out = self.corrector.correct(&self.observer.contributions, Some(&xi_exact))?;
        let xi_hat = out.result.xi;
        let row = TraceRow {
            k,
            err_state_norm: x_err.norm(),
            err_corr_norm: (&xi_exact - &xi_hat).norm(),
            lyapunov_v,
            dist_qeq: out.dual_distance.unwrap_or(0.0),
        };
        let probe = probe.then(|| StepProbe {
            k,
            truth_norm: self.x_true.norm(),
            x_err: x_err.clone(),
            s_prior: prior.to_dense(),
            s_post: s_post.clone(),
            contributions: self.observer.contributions.clone(),
            xi_exact: xi_exact.clone(),
            xi_hat: xi_hat.clone(),
            dynamics: model.dynamics_matrix(k),
            q0,
        });

        self.observer.apply_correction(&xi_hat)?;
        self.observer.predict(&model)?;
        if let Some(base) = self.baseline.as_mut() {
            base.measurement_update(&model, &y)?;
            let (s, b) = base.contributions.assemble_dense(None);
            let xi = solve_centralized(&s, &b)?;
            base.apply_correction(&xi)?;
            base.predict(&model)?;
        }
        self.x_true = model.step_truth(&self.x_true, k)?;
        self.k += 1;
        Ok((row, agent_errors, baseline_err, probe))
    }
}

/// Runs a generated scenario for `config.steps` steps with the given solver.
pub fn run_scenario(scenario: Arc<Scenario>, kind: SolverKind, params: SolverParams) -> Result<SimTrace> {
    run_with_probe(scenario, kind, params, |_| false, |_| Ok(()))
}

/// Like [`run_scenario`], handing a dense probe to `sink` at every step for
/// which `want(k)` holds.
pub fn run_with_probe(
    scenario: Arc<Scenario>,
    kind: SolverKind,
    params: SolverParams,
    want: impl Fn(usize) -> bool,
    mut sink: impl FnMut(StepProbe) -> Result<()>,
) -> Result<SimTrace> {
    let steps = scenario.config.steps;
    let mut sim = Simulation::with_solver(scenario.clone(), kind, params)?;
    let mut rows = Vec::with_capacity(steps);
    let mut agent_errors = Vec::with_capacity(steps);
    let mut baseline = scenario.config.baseline.then(|| Vec::with_capacity(steps));
    for k in 0..steps {
        let (row, agents, base, probe) = sim.step(want(k))?;
        if !row_finite(&row) || !sim.observer.x_prior.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { k });
        }
        rows.push(row);
        agent_errors.push(agents);
        if let (Some(list), Some(e)) = (baseline.as_mut(), base) {
            list.push(e);
        }
        if let Some(p) = probe {
            sink(p)?;
        }
    }
    Ok(SimTrace {
        solver: kind,
        seed: scenario.config.seed,
        config: ScenarioConfig {
            solver: kind,
            ..scenario.config.clone()
        },
        rows,
        agent_errors,
        baseline_err: baseline,
    })
}

/// Generates the scenario and runs the configured solver.
pub fn run(config: &ScenarioConfig) -> Result<SimTrace> {
    let scenario = Arc::new(generate_scenario(config)?);
    run_scenario(scenario, config.solver, config.solver_params())
}
