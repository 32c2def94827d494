//! Agent dynamics, local and relative measurement models, global stacking and
//! numerical checks of the standing assumptions (uniform bounds, complete
//! uniform observability, uniform invertibility).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::linalg::{spectral_norm, sym_eig_range};
use crate::topology::SensingTopology;

type MatrixFn = dyn Fn(usize) -> DMatrix<f64> + Send + Sync;
type VectorFn = dyn Fn(usize) -> DVector<f64> + Send + Sync;

/// A matrix that is either constant or a deterministic function of the step.
#[derive(Clone)]
pub enum Schedule {
    Constant(DMatrix<f64>),
    Varying(Arc<MatrixFn>),
}

impl Schedule {
    pub fn varying(f: impl Fn(usize) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        Schedule::Varying(Arc::new(f))
    }

    pub fn at(&self, k: usize) -> DMatrix<f64> {
        match self {
            Schedule::Constant(m) => m.clone(),
            Schedule::Varying(f) => f(k),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Schedule::Constant(_))
    }
}

impl From<DMatrix<f64>> for Schedule {
    fn from(m: DMatrix<f64>) -> Self {
        Schedule::Constant(m)
    }
}

impl fmt::Debug for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant(m) => f.debug_tuple("Constant").field(&m.shape()).finish(),
            Schedule::Varying(_) => f.write_str("Varying(..)"),
        }
    }
}

/// Input sequence `u_i(k)`.
#[derive(Clone)]
pub enum InputSignal {
    Zero,
    Varying(Arc<VectorFn>),
}

impl InputSignal {
    pub fn varying(f: impl Fn(usize) -> DVector<f64> + Send + Sync + 'static) -> Self {
        InputSignal::Varying(Arc::new(f))
    }
}

impl fmt::Debug for InputSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputSignal::Zero => f.write_str("Zero"),
            InputSignal::Varying(_) => f.write_str("Varying(..)"),
        }
    }
}

/// Absolute sensor `y = H x_i` with information weight `R`.
#[derive(Debug, Clone)]
pub struct LocalSensor {
    pub map: Schedule,
    pub weight: DMatrix<f64>,
}

/// Relative sensor on a directed edge `(i, j)`:
/// `y = H_own x_i + H_other x_j` with information weight `R`.
#[derive(Debug, Clone)]
pub struct RelativeSensor {
    pub own_map: Schedule,
    pub other_map: Schedule,
    pub weight: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct AgentModel {
    pub dynamics: Schedule,
    pub input_map: Schedule,
    pub input: InputSignal,
    pub local: Option<LocalSensor>,
}

impl AgentModel {
    pub fn dynamics_at(&self, k: usize) -> DMatrix<f64> {
        self.dynamics.at(k)
    }

    /// `B_i(k) u_i(k)`.
    pub fn forcing_at(&self, k: usize, state_dim: usize) -> DVector<f64> {
        match &self.input {
            InputSignal::Zero => DVector::zeros(state_dim),
            InputSignal::Varying(u) => self.input_map.at(k) * u(k),
        }
    }
}

/// One round of noiseless (or harness-perturbed) measurements.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Measurements {
    pub local: BTreeMap<usize, DVector<f64>>,
    pub relative: BTreeMap<(usize, usize), DVector<f64>>,
}

impl Measurements {
    pub fn is_empty(&self) -> bool {
        self.local.is_empty() && self.relative.is_empty()
    }
}

/// Stacked multi-agent model with its topology.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    topology: Arc<SensingTopology>,
    agents: Vec<AgentModel>,
    relative: Vec<RelativeSensor>,
}

fn check_weight(w: &DMatrix<f64>, what: &str) -> Result<()> {
    if !w.is_square() {
        return Err(Error::InvalidParameter(format!("{what} weight must be square")));
    }
    let asym = (w - w.transpose()).amax();
    if asym > 1e-12 * (1.0 + w.amax()) {
        return Err(Error::InvalidParameter(format!("{what} weight must be symmetric")));
    }
    if w.clone().cholesky().is_none() {
        return Err(Error::NotSpd(format!("{what} weight")));
    }
    Ok(())
}

impl NetworkModel {
    /// `relative` is aligned with `topology.sensing_edges()`.
    pub fn new(
        topology: Arc<SensingTopology>,
        agents: Vec<AgentModel>,
        relative: Vec<RelativeSensor>,
    ) -> Result<Self> {
        check_len("agent models", topology.n_agents(), agents.len())?;
        check_len("relative sensors", topology.sensing_edges().len(), relative.len())?;
        let d = topology.state_dim();
        for (i, a) in agents.iter().enumerate() {
            let a0 = a.dynamics.at(0);
            if a0.shape() != (d, d) {
                return Err(Error::DimensionError {
                    context: "dynamics block",
                    expected: d,
                    got: a0.nrows(),
                });
            }
            match (&a.local, topology.is_anchor(i)) {
                (Some(s), true) => {
                    check_len("local measurement map columns", d, s.map.at(0).ncols())?;
                    check_len("local weight", s.map.at(0).nrows(), s.weight.nrows())?;
                    check_weight(&s.weight, "local")?;
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(Error::TopologyMismatch(format!(
                        "agent {i} has a local sensor but is not an anchor"
                    )))
                }
                (None, true) => {
                    return Err(Error::TopologyMismatch(format!(
                        "anchor {i} has no local sensor"
                    )))
                }
            }
        }
        for r in &relative {
            check_len("relative own map columns", d, r.own_map.at(0).ncols())?;
            check_len("relative other map columns", d, r.other_map.at(0).ncols())?;
            check_len("relative weight", r.own_map.at(0).nrows(), r.weight.nrows())?;
            check_weight(&r.weight, "relative")?;
        }
        Ok(Self {
            topology,
            agents,
            relative,
        })
    }

    pub fn topology(&self) -> &Arc<SensingTopology> {
        &self.topology
    }

    pub fn agents(&self) -> &[AgentModel] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &AgentModel {
        &self.agents[i]
    }

    /// Relative sensors aligned with `topology().sensing_edges()`.
    pub fn relative_sensors(&self) -> &[RelativeSensor] {
        &self.relative
    }

    pub fn relative_sensor(&self, i: usize, j: usize) -> Option<&RelativeSensor> {
        self.topology
            .sensing_edges()
            .binary_search(&(i, j))
            .ok()
            .map(|e| &self.relative[e])
    }

    pub fn state_dim(&self) -> usize {
        self.topology.state_dim()
    }

    pub fn global_dim(&self) -> usize {
        self.topology.global_dim()
    }

    /// `x_{k+1} = A_k x_k + B_k u_k`, agent block by agent block.
    pub fn step_truth(&self, x: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
        check_len("state", self.global_dim(), x.len())?;
        let d = self.state_dim();
        let mut out = DVector::zeros(x.len());
        for (i, agent) in self.agents.iter().enumerate() {
            let r = self.topology.agent_range(i);
            let next = agent.dynamics_at(k) * x.rows(r.start, d) + agent.forcing_at(k, d);
            out.rows_mut(r.start, d).copy_from(&next);
        }
        Ok(out)
    }

    /// Noiseless local and relative measurements of state `x` at step `k`.
    pub fn measure(&self, x: &DVector<f64>, k: usize) -> Result<Measurements> {
        check_len("state", self.global_dim(), x.len())?;
        let d = self.state_dim();
        let block = |i: usize| x.rows(i * d, d);
        let mut m = Measurements::default();
        for (i, agent) in self.agents.iter().enumerate() {
            if let Some(sensor) = &agent.local {
                m.local.insert(i, sensor.map.at(k) * block(i));
            }
        }
        for (&(i, j), sensor) in self.topology.sensing_edges().iter().zip(&self.relative) {
            let y = sensor.own_map.at(k) * block(i) + sensor.other_map.at(k) * block(j);
            m.relative.insert((i, j), y);
        }
        Ok(m)
    }

    /// Dense block-diagonal `A_k`.
    pub fn dynamics_matrix(&self, k: usize) -> DMatrix<f64> {
        let blocks: Vec<_> = self.agents.iter().map(|a| a.dynamics_at(k)).collect();
        crate::linalg::block_diag(&blocks)
    }

    /// Dense `(H_k, R_k)`: local rows in agent order, then relative rows in
    /// sensing-edge order.
    pub fn measurement_matrices(&self, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.state_dim();
        let nd = self.global_dim();
        let mut rows: Vec<(DMatrix<f64>, DMatrix<f64>)> = Vec::new();
        for (i, agent) in self.agents.iter().enumerate() {
            if let Some(s) = &agent.local {
                let h = s.map.at(k);
                let mut g = DMatrix::zeros(h.nrows(), nd);
                g.view_mut((0, i * d), (h.nrows(), d)).copy_from(&h);
                rows.push((g, s.weight.clone()));
            }
        }
        for (&(i, j), s) in self.topology.sensing_edges().iter().zip(&self.relative) {
            let (hi, hj) = (s.own_map.at(k), s.other_map.at(k));
            let mut g = DMatrix::zeros(hi.nrows(), nd);
            g.view_mut((0, i * d), (hi.nrows(), d)).copy_from(&hi);
            g.view_mut((0, j * d), (hj.nrows(), d)).copy_from(&hj);
            rows.push((g, s.weight.clone()));
        }
        let total: usize = rows.iter().map(|(g, _)| g.nrows()).sum();
        let mut h = DMatrix::zeros(total, nd);
        let mut r = DMatrix::zeros(total, total);
        let mut at = 0;
        for (g, w) in rows {
            let n = g.nrows();
            h.view_mut((at, 0), (n, nd)).copy_from(&g);
            r.view_mut((at, at), (n, n)).copy_from(&w);
            at += n;
        }
        (h, r)
    }

    /// Stacks a measurement set in the row order of [`Self::measurement_matrices`].
    pub fn stack_measurements(&self, m: &Measurements) -> Result<DVector<f64>> {
        let mut parts: Vec<f64> = Vec::new();
        for (i, agent) in self.agents.iter().enumerate() {
            if agent.local.is_some() {
                let y = m.local.get(&i).ok_or_else(|| {
                    Error::TopologyMismatch(format!("missing local measurement of agent {i}"))
                })?;
                parts.extend(y.iter());
            }
        }
        for e in self.topology.sensing_edges() {
            let y = m.relative.get(e).ok_or_else(|| {
                Error::TopologyMismatch(format!("missing relative measurement on {e:?}"))
            })?;
            parts.extend(y.iter());
        }
        Ok(DVector::from_vec(parts))
    }

    /// Open-loop transition `Φ(k, k0) = A_{k-1}…A_{k0}`, identity when `k = k0`.
    pub fn transition(&self, k: usize, k0: usize) -> DMatrix<f64> {
        assert!(k >= k0, "transition requires k >= k0");
        let mut phi = DMatrix::identity(self.global_dim(), self.global_dim());
        for t in k0..k {
            phi = self.dynamics_matrix(t) * phi;
        }
        phi
    }

    /// Observability Gramian over the window `[k-K, k]`.
    pub fn observability_gramian(&self, k: usize, window: usize) -> Result<Gramian> {
        if k < window {
            return Err(Error::InvalidWindow { k, window });
        }
        let nd = self.global_dim();
        let start = k - window;
        let mut phi = DMatrix::identity(nd, nd);
        let mut g = DMatrix::zeros(nd, nd);
        for t in start..=k {
            let (h, _) = self.measurement_matrices(t);
            let hp = &h * &phi;
            g += hp.transpose() * hp;
            phi = self.dynamics_matrix(t) * phi;
        }
        let (min_eig, max_eig) = sym_eig_range(&g);
        Ok(Gramian {
            matrix: g,
            min_eig,
            max_eig,
        })
    }

    /// Smallest `K ≤ max_window` with `λ_min(G(K, K)) > tol · max(1, λ_max)`.
    pub fn smallest_observable_window(&self, max_window: usize, tol: f64) -> Option<usize> {
        (1..=max_window).find(|&w| {
            self.observability_gramian(w, w)
                .map(|g| g.min_eig > tol * g.max_eig.max(1.0))
                .unwrap_or(false)
        })
    }

    /// Sweeps `k = 0..=horizon` computing the bound constants and the sliding
    /// Gramian extremes for window `K`.
    pub fn verify_assumptions(&self, horizon: usize, window: usize) -> Result<AssumptionReport> {
        let d = self.state_dim();
        let mut rep = AssumptionReport {
            window,
            horizon,
            ..AssumptionReport::default()
        };
        let mut alpha1 = f64::INFINITY;
        let mut alpha2: f64 = 0.0;
        let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
        for k in 0..=horizon {
            let a = self.dynamics_matrix(k);
            let (h, _) = self.measurement_matrices(k);
            for (i, agent) in self.agents.iter().enumerate() {
                if agent.dynamics_at(k).try_inverse().is_none() {
                    return Err(Error::SingularDynamics { agent: i, k });
                }
            }
            let a_inv = a.clone().try_inverse().ok_or(Error::SingularDynamics { agent: 0, k })?;
            rep.a_bar = rep.a_bar.max(spectral_norm(&a));
            rep.a_inv_bar = rep.a_inv_bar.max(spectral_norm(&a_inv));
            rep.h_bar = rep.h_bar.max(spectral_norm(&h));
            let mut bu: f64 = 0.0;
            for agent in &self.agents {
                bu += agent.forcing_at(k, d).norm_squared();
            }
            rep.b_bar = rep.b_bar.max(bu.sqrt());
            if let Some((pa, ph)) = &prev {
                rep.a_delta = rep.a_delta.max(spectral_norm(&(&a - pa)));
                rep.h_delta = rep.h_delta.max(spectral_norm(&(&h - ph)));
            }
            if k >= window {
                let g = self.observability_gramian(k, window)?;
                if g.min_eig < alpha1 {
                    alpha1 = g.min_eig;
                    rep.worst_k = Some(k);
                }
                alpha2 = alpha2.max(g.max_eig);
            }
            prev = Some((a, h));
        }
        rep.alpha1 = if alpha1.is_finite() { alpha1 } else { 0.0 };
        rep.alpha2 = alpha2;
        rep.observable = horizon >= window && rep.alpha1 > 1e-10 * rep.alpha2.max(1.0);
        Ok(rep)
    }
}

#[derive(Debug, Clone)]
pub struct Gramian {
    pub matrix: DMatrix<f64>,
    pub min_eig: f64,
    pub max_eig: f64,
}

/// Measured constants of the standing assumptions over a finite horizon.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct AssumptionReport {
    pub horizon: usize,
    pub window: usize,
    pub a_bar: f64,
    pub b_bar: f64,
    pub h_bar: f64,
    pub a_delta: f64,
    pub h_delta: f64,
    pub a_inv_bar: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Step attaining the smallest Gramian eigenvalue.
    pub worst_k: Option<usize>,
    pub observable: bool,
}

/// Double integrator in the plane: state `[p; v]`, input acceleration.
pub fn double_integrator(ts: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(ts > 0.0) || !ts.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sampling time must be positive, got {ts}"
        )));
    }
    let mut a = DMatrix::identity(4, 4);
    a[(0, 2)] = ts;
    a[(1, 3)] = ts;
    let mut b = DMatrix::zeros(4, 2);
    b[(0, 0)] = 0.5 * ts * ts;
    b[(1, 1)] = 0.5 * ts * ts;
    b[(2, 0)] = ts;
    b[(3, 1)] = ts;
    Ok((a, b))
}

/// Position selector `[I₂ 0]` for the planar double integrator.
pub fn position_selector() -> DMatrix<f64> {
    let mut h = DMatrix::zeros(2, 4);
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    h
}
