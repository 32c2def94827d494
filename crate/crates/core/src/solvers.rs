//! Correction-step solvers: exact centralized solve, Richardson iteration,
//! partition-based ADMM and its residual variant with closed-form local
//! integration.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::observer::{InfoContributions, InfoSource};
use crate::topology::{DualLayout, SensingTopology};

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionResult {
    pub xi: DVector<f64>,
    /// Agent `i`'s extended vector `[ξ_i^(i); col(ξ_j^(i))]` (distributed solvers only).
    pub extended: Vec<DVector<f64>>,
    pub iterations: usize,
    /// `‖S ξ̂ − b‖` against the observer's own system.
    pub residual: f64,
}

/// Exact `S⁻¹ b` by Cholesky.
pub fn solve_centralized(s: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("right-hand side", s.nrows(), b.len())?;
    if b.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(b.len()));
    }
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("information matrix".into()))?;
    Ok(chol.solve(b))
}

fn stacked<I, F>(src: &I, f: F) -> DVector<f64>
where
    I: InfoSource + ?Sized,
    F: Fn(usize) -> DVector<f64>,
{
    let topo = src.topology();
    let d = topo.state_dim();
    let mut out = DVector::zeros(topo.global_dim());
    for i in 0..topo.n_agents() {
        out.rows_mut(i * d, d).copy_from(&f(i));
    }
    out
}

/// `‖S x − b‖` from block-sparse products.
pub fn system_residual<I: InfoSource + ?Sized>(src: &I, x: &DVector<f64>) -> f64 {
    let d = src.topology().state_dim();
    let block = |j: usize| x.rows(j * d, d).into_owned();
    stacked(src, |i| {
        InfoContributions::product_block(src, i, block) - InfoContributions::innovation_block(src, i)
    })
    .norm()
}

/// One Richardson step `ξ̂' = ξ̂ − α_R (S ξ̂ − b)`, agent by agent.
pub fn richardson_step<I: InfoSource + ?Sized>(
    src: &I,
    xi: &DVector<f64>,
    alpha_r: f64,
) -> Result<DVector<f64>> {
    check_len("correction", src.topology().global_dim(), xi.len())?;
    let d = src.topology().state_dim();
    let block = |j: usize| xi.rows(j * d, d).into_owned();
    Ok(stacked(src, |i| {
        let grad = InfoContributions::product_block(src, i, block)
            - InfoContributions::innovation_block(src, i);
        block(i) - grad * alpha_r
    }))
}

/// Agent `i`'s ADMM subproblem for one observer step: the factorized
/// Hessian `H_ρ,i = ρ H⁰_i + H¹_i` and the linear term `b̄_i`.
#[derive(Debug, Clone)]
pub struct LocalProblem {
    pub agent: usize,
    pub neighbors: Vec<usize>,
    pub curvature: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl LocalProblem {
    pub fn assemble<I: InfoSource + ?Sized>(src: &I, i: usize, rho: f64) -> Result<Self> {
        let topo = src.topology();
        let d = topo.state_dim();
        let neighbors = topo.neighbors(i).to_vec();
        let deg = neighbors.len();
        let n = (1 + deg) * d;
        let (s_loc, b_loc) = src.local(i);
        let mut h1 = DMatrix::zeros(n, n);
        let mut b_bar = DVector::zeros(n);
        h1.view_mut((0, 0), (d, d)).copy_from(s_loc);
        b_bar.rows_mut(0, d).copy_from(b_loc);
        for (p, &j) in neighbors.iter().enumerate() {
            let e = topo.edge_id(i, j).expect("neighbor edge");
            let (s_e, b_e) = src.edge(e);
            let (own, other) = if i < j { (0, d) } else { (d, 0) };
            let c = (1 + p) * d;
            let mut top = h1.view_mut((0, 0), (d, d));
            top += s_e.view((own, own), (d, d)) * 0.5;
            h1.view_mut((0, c), (d, d))
                .copy_from(&(s_e.view((own, other), (d, d)) * 0.5));
            h1.view_mut((c, 0), (d, d))
                .copy_from(&(s_e.view((other, own), (d, d)) * 0.5));
            h1.view_mut((c, c), (d, d))
                .copy_from(&(s_e.view((other, other), (d, d)) * 0.5));
            let mut b_own = b_bar.rows_mut(0, d);
            b_own += b_e.rows(own, d) * 0.5;
            b_bar.rows_mut(c, d).copy_from(&(b_e.rows(other, d) * 0.5));
        }
        let mut hessian = h1.clone();
        for r in 0..d {
            hessian[(r, r)] += rho * deg as f64;
        }
        for r in d..n {
            hessian[(r, r)] += rho;
        }
        let factor = hessian.clone().cholesky().ok_or_else(|| {
            Error::InternalInvariantViolation(format!("local ADMM Hessian of agent {i} is not SPD"))
        })?;
        Ok(Self {
            agent: i,
            neighbors,
            curvature: h1,
            hessian,
            b_bar,
            factor,
        })
    }

    /// `ξ̂_{N_i} = H_ρ,i⁻¹ (b̄_i + A_qiᵀ q_i)`.
    pub fn primal(&self, layout: &DualLayout, q_i: &[f64]) -> DVector<f64> {
        let rhs = &self.b_bar + layout.aq_transpose(self.agent, q_i);
        self.factor.solve(&rhs)
    }

    pub fn hessian_inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }
}

/// Closed-form primal update of agent `i`.
pub fn admm_primal<I: InfoSource + ?Sized>(
    src: &I,
    layout: &DualLayout,
    i: usize,
    q: &DVector<f64>,
    rho: f64,
) -> Result<DVector<f64>> {
    check_len("dual vector", layout.len(), q.len())?;
    let p = LocalProblem::assemble(src, i, rho)?;
    Ok(p.primal(layout, &q.as_slice()[layout.agent_range(i)]))
}

/// Message from `from` to `to` in round `h`:
/// `η_from = −q_{from to, from} + 2ρ ξ_from^(from)` and
/// `η_to = −q_{from to, to} + 2ρ ξ_to^(from)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaMessage {
    pub edge: usize,
    pub from: usize,
    pub to: usize,
    pub h: usize,
    pub sender_var: DVector<f64>,
    pub receiver_var: DVector<f64>,
}

/// Messages agent `i` sends after its primal update in round `h`.
pub fn eta_messages(
    topology: &SensingTopology,
    layout: &DualLayout,
    i: usize,
    q_i: &[f64],
    ext_i: &DVector<f64>,
    rho: f64,
    h: usize,
) -> Vec<EtaMessage> {
    let d = layout.state_dim();
    let base = layout.agent_range(i).start;
    topology
        .neighbors(i)
        .iter()
        .enumerate()
        .map(|(p, &j)| {
            let own = layout.own_range(i, p);
            let copy = layout.copy_range(i, p);
            let q_own = DVector::from_column_slice(&q_i[own.start - base..own.end - base]);
            let q_copy = DVector::from_column_slice(&q_i[copy.start - base..copy.end - base]);
            EtaMessage {
                edge: topology.edge_id(i, j).expect("neighbor edge"),
                from: i,
                to: j,
                h,
                sender_var: -q_own + ext_i.rows(0, d) * (2.0 * rho),
                receiver_var: -q_copy + ext_i.rows((1 + p) * d, d) * (2.0 * rho),
            }
        })
        .collect()
}

/// Relaxed dual update of agent `i` from its inbox for round `h`.
pub fn apply_messages(
    topology: &SensingTopology,
    layout: &DualLayout,
    i: usize,
    q_i: &[f64],
    inbox: &[EtaMessage],
    alpha: f64,
    h: usize,
) -> Result<DVector<f64>> {
    let base = layout.agent_range(i).start;
    let mut out = DVector::from_column_slice(q_i);
    for (p, &j) in topology.neighbors(i).iter().enumerate() {
        let msg = inbox
            .iter()
            .find(|m| m.from == j && m.to == i && m.h == h)
            .ok_or_else(|| {
                Error::ProtocolError(format!("agent {i} missing message from {j} in round {h}"))
            })?;
        let own = layout.own_range(i, p);
        let copy = layout.copy_range(i, p);
        let mut o = out.rows_mut(own.start - base, own.len());
        o *= 1.0 - alpha;
        o += &msg.receiver_var * alpha;
        let mut c = out.rows_mut(copy.start - base, copy.len());
        c *= 1.0 - alpha;
        c += &msg.sender_var * alpha;
    }
    Ok(out)
}

/// Synchronous dual round: every agent emits its messages, every agent
/// consumes its inbox.
pub fn admm_dual(
    topology: &SensingTopology,
    layout: &DualLayout,
    q: &DVector<f64>,
    extended: &[DVector<f64>],
    rho: f64,
    alpha: f64,
    h: usize,
) -> Result<DVector<f64>> {
    check_len("dual vector", layout.len(), q.len())?;
    check_len("extended copies", topology.n_agents(), extended.len())?;
    let n = topology.n_agents();
    let mut inboxes: Vec<Vec<EtaMessage>> = vec![Vec::new(); n];
    for i in 0..n {
        let q_i = &q.as_slice()[layout.agent_range(i)];
        for m in eta_messages(topology, layout, i, q_i, &extended[i], rho, h) {
            inboxes[m.to].push(m);
        }
    }
    let mut out = DVector::zeros(q.len());
    for (i, inbox) in inboxes.iter().enumerate() {
        let r = layout.agent_range(i);
        let q_i = apply_messages(topology, layout, i, &q.as_slice()[r.clone()], inbox, alpha, h)?;
        out.rows_mut(r.start, r.len()).copy_from(&q_i);
    }
    Ok(out)
}

/// Dual variables and parameters carried across observer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub layout: Arc<DualLayout>,
    pub q: DVector<f64>,
    pub rho: f64,
    pub alpha: f64,
    pub h_iters: usize,
}

impl AdmmState {
    pub fn new(layout: Arc<DualLayout>, rho: f64, alpha: f64, h_iters: usize) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidParameter(format!("rho must be positive, got {rho}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if h_iters == 0 {
            return Err(Error::InvalidParameter("h_iters must be at least 1".into()));
        }
        let q = DVector::zeros(layout.len());
        Ok(Self {
            layout,
            q,
            rho,
            alpha,
            h_iters,
        })
    }

    pub fn local_problems<I: InfoSource + ?Sized>(&self, src: &I) -> Result<Vec<LocalProblem>> {
        (0..src.topology().n_agents())
            .map(|i| LocalProblem::assemble(src, i, self.rho))
            .collect()
    }
}

fn primal_all(problems: &[LocalProblem], layout: &DualLayout, q: &DVector<f64>) -> Vec<DVector<f64>> {
    problems
        .iter()
        .map(|p| p.primal(layout, &q.as_slice()[layout.agent_range(p.agent)]))
        .collect()
}

fn own_copies(layout: &DualLayout, extended: &[DVector<f64>]) -> DVector<f64> {
    let d = layout.state_dim();
    let mut xi = DVector::zeros(extended.len() * d);
    for (i, ext) in extended.iter().enumerate() {
        xi.rows_mut(i * d, d).copy_from(&layout.select_own(ext));
    }
    xi
}

/// `H` synchronous (primal, exchange, dual) rounds warm-started from
/// `state.q`, then a final primal read-out.
pub fn admm_run<I: InfoSource + ?Sized>(src: &I, state: &mut AdmmState) -> Result<CorrectionResult> {
    let topo = src.topology();
    check_len("dual vector", state.layout.len(), state.q.len())?;
    let problems = state.local_problems(src)?;
    if problems.iter().all(|p| p.b_bar.iter().all(|&v| v == 0.0)) {
        return Ok(CorrectionResult {
            xi: DVector::zeros(topo.global_dim()),
            extended: problems.iter().map(|p| DVector::zeros(p.b_bar.len())).collect(),
            iterations: 0,
            residual: 0.0,
        });
    }
    let layout = state.layout.clone();
    for h in 0..state.h_iters {
        let ext = primal_all(&problems, &layout, &state.q);
        state.q = admm_dual(topo, &layout, &state.q, &ext, state.rho, state.alpha, h)?;
    }
    let extended = primal_all(&problems, &layout, &state.q);
    let xi = own_copies(&layout, &extended);
    let residual = system_residual(src, &xi);
    Ok(CorrectionResult {
        xi,
        extended,
        iterations: state.h_iters,
        residual,
    })
}

/// Information terms with the innovations replaced, sharing the matrices
/// of an underlying source.
pub struct ResidualSource<'a, I: InfoSource + ?Sized> {
    base: &'a I,
    local_b: Vec<DVector<f64>>,
    edge_b: Vec<DVector<f64>>,
}

impl<I: InfoSource + ?Sized> InfoSource for ResidualSource<'_, I> {
    fn topology(&self) -> &SensingTopology {
        self.base.topology()
    }

    fn local(&self, agent: usize) -> (&DMatrix<f64>, &DVector<f64>) {
        (self.base.local(agent).0, &self.local_b[agent])
    }

    fn edge(&self, e: usize) -> (&DMatrix<f64>, &DVector<f64>) {
        (self.base.edge(e).0, &self.edge_b[e])
    }
}

/// `ξ^ℓ_i = (S^ℓ_i)⁻¹ b^ℓ_i`, or zero when agent `i` has no local innovation.
pub fn local_corrections<I: InfoSource + ?Sized>(src: &I) -> Result<Vec<DVector<f64>>> {
    let topo = src.topology();
    (0..topo.n_agents())
        .map(|i| {
            let (s, b) = src.local(i);
            if b.iter().all(|&v| v == 0.0) {
                return Ok(DVector::zeros(b.len()));
            }
            let chol = s
                .clone()
                .cholesky()
                .ok_or(Error::InconsistentLocalInfo { agent: i })?;
            Ok(chol.solve(b))
        })
        .collect()
}

/// The residual problem `S η = b^r − S^r ξ^ℓ` with local innovations zero.
pub fn residual_source<'a, I: InfoSource + ?Sized>(
    src: &'a I,
    xi_local: &[DVector<f64>],
) -> ResidualSource<'a, I> {
    let topo = src.topology();
    let d = topo.state_dim();
    let edge_b = topo
        .comm_edges()
        .iter()
        .enumerate()
        .map(|(e, &(a, b))| {
            let (s_e, b_e) = src.edge(e);
            let mut pair = DVector::zeros(2 * d);
            pair.rows_mut(0, d).copy_from(&xi_local[a]);
            pair.rows_mut(d, d).copy_from(&xi_local[b]);
            b_e - s_e * pair
        })
        .collect();
    ResidualSource {
        base: src,
        local_b: vec![DVector::zeros(d); topo.n_agents()],
        edge_b,
    }
}

/// Closed-form local integration followed by ADMM on the residual.
pub fn residual_split_solve<I: InfoSource + ?Sized>(
    src: &I,
    state: &mut AdmmState,
) -> Result<CorrectionResult> {
    let d = src.topology().state_dim();
    let xi_local = local_corrections(src)?;
    let res = residual_source(src, &xi_local);
    let eta = admm_run(&res, state)?;
    let mut xi = eta.xi;
    for (i, xl) in xi_local.iter().enumerate() {
        let mut blk = xi.rows_mut(i * d, d);
        blk += xl;
    }
    let residual = system_residual(src, &xi);
    Ok(CorrectionResult {
        xi,
        extended: eta.extended,
        iterations: eta.iterations,
        residual,
    })
}

/// The unique dual fixed point for the exact solution `ξ = S⁻¹ b`.
pub fn equilibrium_dual(
    topology: &SensingTopology,
    layout: &DualLayout,
    problems: &[LocalProblem],
    xi: &DVector<f64>,
    rho: f64,
) -> Result<DVector<f64>> {
    check_len("correction", topology.global_dim(), xi.len())?;
    let d = topology.state_dim();
    let mut q = DVector::zeros(layout.len());
    for p in problems {
        let i = p.agent;
        let mut ext = DVector::zeros(layout.extended_len(i));
        ext.rows_mut(0, d).copy_from(&xi.rows(i * d, d));
        for (pos, &j) in p.neighbors.iter().enumerate() {
            ext.rows_mut((1 + pos) * d, d).copy_from(&xi.rows(j * d, d));
        }
        let r = &p.hessian * ext - &p.b_bar;
        for pos in 0..p.neighbors.len() {
            let c = layout.copy_range(i, pos);
            q.rows_mut(c.start, d).copy_from(&r.rows((1 + pos) * d, d));
        }
    }
    for i in 0..topology.n_agents() {
        for (pos, &j) in topology.neighbors(i).iter().enumerate() {
            let pos_j = topology.neighbor_position(j, i).expect("symmetric neighbors");
            let partner = q.rows(layout.copy_range(j, pos_j).start, d).into_owned();
            let own = xi.rows(i * d, d) * (2.0 * rho) - partner;
            q.rows_mut(layout.own_range(i, pos).start, d).copy_from(&own);
        }
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Centralized,
    Richardson,
    Admm,
    AdmmDirect,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [
        SolverKind::Centralized,
        SolverKind::Richardson,
        SolverKind::Admm,
        SolverKind::AdmmDirect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Centralized => "centralized",
            SolverKind::Richardson => "richardson",
            SolverKind::Admm => "admm",
            SolverKind::AdmmDirect => "admm_direct",
        }
    }

    pub fn uses_dual(self) -> bool {
        matches!(self, SolverKind::Admm | SolverKind::AdmmDirect)
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown solver `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub alpha_r: f64,
    pub rho: f64,
    pub alpha: f64,
    pub h_iters: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            alpha_r: 0.05,
            rho: 1.0,
            alpha: 0.95,
            h_iters: 1,
        }
    }
}

/// A correction solver with its warm-start state.
#[derive(Debug, Clone)]
pub struct Corrector {
    pub kind: SolverKind,
    pub params: SolverParams,
    xi: DVector<f64>,
    admm: Option<AdmmState>,
}

/// Output of one correction step, with the dual distance to the equilibrium
/// of the step's frozen problem measured before iterating.
#[derive(Debug, Clone)]
pub struct StepCorrection {
    pub result: CorrectionResult,
    pub dual_distance: Option<f64>,
}

impl Corrector {
    pub fn new(kind: SolverKind, params: SolverParams, topology: &SensingTopology) -> Result<Self> {
        if kind == SolverKind::Richardson && !(params.alpha_r > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha_r must be positive, got {}",
                params.alpha_r
            )));
        }
        if params.h_iters == 0 {
            return Err(Error::InvalidParameter("h_iters must be at least 1".into()));
        }
        let admm = if kind.uses_dual() {
            let layout = Arc::new(DualLayout::new(topology));
            Some(AdmmState::new(layout, params.rho, params.alpha, params.h_iters)?)
        } else {
            None
        };
        Ok(Self {
            kind,
            params,
            xi: DVector::zeros(topology.global_dim()),
            admm,
        })
    }

    pub fn admm_state(&self) -> Option<&AdmmState> {
        self.admm.as_ref()
    }

    /// Computes `ξ̂_k`. With `exact = Some(S⁻¹b)` the dual distance
    /// `‖q_{k,0} − q*_k‖` is also reported for the dual solvers.
    pub fn correct(
        &mut self,
        contributions: &InfoContributions,
        exact: Option<&DVector<f64>>,
    ) -> Result<StepCorrection> {
        match self.kind {
            SolverKind::Centralized => {
                let (s, b) = contributions.assemble_dense(None);
                let xi = solve_centralized(&s, &b)?;
                let residual = (&s * &xi - &b).norm();
                Ok(StepCorrection {
                    result: CorrectionResult {
                        xi,
                        extended: Vec::new(),
                        iterations: 1,
                        residual,
                    },
                    dual_distance: None,
                })
            }
            SolverKind::Richardson => {
                let b_zero = contributions.innovation_vector().iter().all(|&v| v == 0.0);
                let mut xi = self.xi.clone();
                let mut iterations = 0;
                if b_zero {
                    xi.fill(0.0);
                } else {
                    for _ in 0..self.params.h_iters {
                        xi = richardson_step(contributions, &xi, self.params.alpha_r)?;
                        iterations += 1;
                    }
                }
                self.xi = xi.clone();
                let residual = system_residual(contributions, &xi);
                Ok(StepCorrection {
                    result: CorrectionResult {
                        xi,
                        extended: Vec::new(),
                        iterations,
                        residual,
                    },
                    dual_distance: None,
                })
            }
            SolverKind::Admm => {
                let state = self.admm.as_mut().expect("dual state");
                let dual_distance = match exact {
                    Some(xi) => Some(dual_distance(contributions, state, xi)?),
                    None => None,
                };
                let result = admm_run(contributions, state)?;
                Ok(StepCorrection {
                    result,
                    dual_distance,
                })
            }
            SolverKind::AdmmDirect => {
                let state = self.admm.as_mut().expect("dual state");
                let dual_distance = match exact {
                    Some(xi) => {
                        let xi_local = local_corrections(contributions)?;
                        let res = residual_source(contributions, &xi_local);
                        let d = contributions.topology().state_dim();
                        let mut eta = xi.clone();
                        for (i, xl) in xi_local.iter().enumerate() {
                            let mut blk = eta.rows_mut(i * d, d);
                            blk -= xl;
                        }
                        Some(dual_distance(&res, state, &eta)?)
                    }
                    None => None,
                };
                let result = residual_split_solve(contributions, state)?;
                Ok(StepCorrection {
                    result,
                    dual_distance,
                })
            }
        }
    }
}

fn dual_distance<I: InfoSource + ?Sized>(src: &I, state: &AdmmState, xi: &DVector<f64>) -> Result<f64> {
    let problems = state.local_problems(src)?;
    let q_star = equilibrium_dual(src.topology(), &state.layout, &problems, xi, state.rho)?;
    Ok((&state.q - q_star).norm())
}
