//! Information-form observer: per-agent and per-edge information
//! contributions, forgetting-factor prediction and the correction update.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::model::{Measurements, NetworkModel};
use crate::topology::SensingTopology;

/// Symmetric block matrix whose off-diagonal storage exists only on
/// communication edges. Edge `(i, j)` with `i < j` stores `S_ij`;
/// `S_ji = S_ijᵀ` is implied.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseInfoMatrix {
    topology: Arc<SensingTopology>,
    diag: Vec<DMatrix<f64>>,
    off: Vec<DMatrix<f64>>,
}

impl BlockSparseInfoMatrix {
    pub fn zeros(topology: Arc<SensingTopology>) -> Self {
        let d = topology.state_dim();
        let diag = vec![DMatrix::zeros(d, d); topology.n_agents()];
        let off = vec![DMatrix::zeros(d, d); topology.n_comm_edges()];
        Self {
            topology,
            diag,
            off,
        }
    }

    pub fn block_diagonal(topology: Arc<SensingTopology>, blocks: &[DMatrix<f64>]) -> Result<Self> {
        check_len("diagonal blocks", topology.n_agents(), blocks.len())?;
        let mut m = Self::zeros(topology);
        for (slot, b) in m.diag.iter_mut().zip(blocks) {
            if slot.shape() != b.shape() {
                return Err(Error::DimensionError {
                    context: "diagonal block",
                    expected: slot.nrows(),
                    got: b.nrows(),
                });
            }
            slot.copy_from(b);
        }
        Ok(m)
    }

    pub fn from_contributions(c: &InfoContributions) -> Self {
        let topo = c.topology.clone();
        let d = topo.state_dim();
        let mut m = Self::zeros(topo.clone());
        for (i, s) in c.local_s.iter().enumerate() {
            m.diag[i] += s;
        }
        for (e, &(a, b)) in topo.comm_edges().iter().enumerate() {
            let s = &c.edge_s[e];
            m.diag[a] += s.view((0, 0), (d, d));
            m.diag[b] += s.view((d, d), (d, d));
            m.off[e] += s.view((0, d), (d, d));
        }
        m
    }

    pub fn topology(&self) -> &Arc<SensingTopology> {
        &self.topology
    }

    pub fn diag_block(&self, i: usize) -> &DMatrix<f64> {
        &self.diag[i]
    }

    /// Stored block for edge id `e`, oriented `(min, max)`.
    pub fn edge_block(&self, e: usize) -> &DMatrix<f64> {
        &self.off[e]
    }

    /// Block `(i, j)`; `None` when `{i, j}` is not a communication edge.
    pub fn block(&self, i: usize, j: usize) -> Option<DMatrix<f64>> {
        if i == j {
            return Some(self.diag[i].clone());
        }
        let e = self.topology.edge_id(i, j)?;
        Some(if i < j {
            self.off[e].clone()
        } else {
            self.off[e].transpose()
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.topology.state_dim();
        let nd = self.topology.global_dim();
        let mut m = DMatrix::zeros(nd, nd);
        for (i, b) in self.diag.iter().enumerate() {
            m.view_mut((i * d, i * d), (d, d)).copy_from(b);
        }
        for (e, &(a, b)) in self.topology.comm_edges().iter().enumerate() {
            m.view_mut((a * d, b * d), (d, d)).copy_from(&self.off[e]);
            m.view_mut((b * d, a * d), (d, d)).copy_from(&self.off[e].transpose());
        }
        m
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("vector", self.topology.global_dim(), x.len())?;
        let d = self.topology.state_dim();
        let mut y = DVector::zeros(x.len());
        for (i, b) in self.diag.iter().enumerate() {
            let v = b * x.rows(i * d, d);
            let mut yi = y.rows_mut(i * d, d);
            yi += v;
        }
        for (e, &(a, b)) in self.topology.comm_edges().iter().enumerate() {
            let ya = &self.off[e] * x.rows(b * d, d);
            let yb = self.off[e].tr_mul(&x.rows(a * d, d));
            let mut y_a = y.rows_mut(a * d, d);
            y_a += ya;
            let mut y_b = y.rows_mut(b * d, d);
            y_b += yb;
        }
        Ok(y)
    }
}

/// Read access to the distributed information data. Every distributed
/// routine goes through this trait so tests can audit which agent reads what.
pub trait InfoSource {
    fn topology(&self) -> &SensingTopology;
    fn local(&self, agent: usize) -> (&DMatrix<f64>, &DVector<f64>);
    /// Contribution of communication edge `e`, ordered `[min; max]`.
    fn edge(&self, e: usize) -> (&DMatrix<f64>, &DVector<f64>);
}

/// Per-agent `(S^ℓ_i, b^ℓ_i)` and per-edge `(S^e, b^e)` information terms.
/// The prior is carried in the local terms.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoContributions {
    topology: Arc<SensingTopology>,
    pub local_s: Vec<DMatrix<f64>>,
    pub local_b: Vec<DVector<f64>>,
    pub edge_s: Vec<DMatrix<f64>>,
    pub edge_b: Vec<DVector<f64>>,
}

impl InfoSource for InfoContributions {
    fn topology(&self) -> &SensingTopology {
        &self.topology
    }

    fn local(&self, agent: usize) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.local_s[agent], &self.local_b[agent])
    }

    fn edge(&self, e: usize) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.edge_s[e], &self.edge_b[e])
    }
}

impl InfoContributions {
    pub fn zeros(topology: Arc<SensingTopology>) -> Self {
        let d = topology.state_dim();
        let n = topology.n_agents();
        let m = topology.n_comm_edges();
        Self {
            local_s: vec![DMatrix::zeros(d, d); n],
            local_b: vec![DVector::zeros(d); n],
            edge_s: vec![DMatrix::zeros(2 * d, 2 * d); m],
            edge_b: vec![DVector::zeros(2 * d); m],
            topology,
        }
    }

    /// Local terms initialised to `scale · P_i⁻¹`.
    pub fn from_prior_covariance(
        topology: Arc<SensingTopology>,
        p0: &[DMatrix<f64>],
        scale: f64,
    ) -> Result<Self> {
        check_len("prior blocks", topology.n_agents(), p0.len())?;
        let mut c = Self::zeros(topology);
        for (i, p) in p0.iter().enumerate() {
            let inv = p
                .clone()
                .cholesky()
                .ok_or_else(|| Error::NotSpd(format!("prior covariance of agent {i}")))?
                .inverse();
            check_len("prior block", c.local_s[i].nrows(), inv.nrows())?;
            c.local_s[i] = inv * scale;
        }
        Ok(c)
    }

    pub fn topology(&self) -> &Arc<SensingTopology> {
        &self.topology
    }

    pub fn clear_innovations(&mut self) {
        self.local_b.iter_mut().for_each(|b| b.fill(0.0));
        self.edge_b.iter_mut().for_each(|b| b.fill(0.0));
    }

    /// Adds `ε·HᵀRH` for every measurement present and sets the innovation
    /// terms from `y − H x̂`. Innovations of absent measurements are zero.
    pub fn measurement_update(
        &mut self,
        model: &NetworkModel,
        measurements: &Measurements,
        x_prior: &DVector<f64>,
        epsilon: f64,
        k: usize,
    ) -> Result<()> {
        let topo = self.topology.clone();
        let d = topo.state_dim();
        check_len("prior estimate", topo.global_dim(), x_prior.len())?;
        self.clear_innovations();
        for (&i, y) in &measurements.local {
            if i >= topo.n_agents() {
                return Err(Error::InvalidAgentIndex {
                    index: i,
                    n_agents: topo.n_agents(),
                });
            }
            let sensor = model.agent(i).local.as_ref().ok_or_else(|| {
                Error::TopologyMismatch(format!("local measurement for non-anchor agent {i}"))
            })?;
            let h = sensor.map.at(k);
            check_len("local measurement", h.nrows(), y.len())?;
            let hr = h.tr_mul(&sensor.weight);
            self.local_s[i] += &hr * &h * epsilon;
            let innov = y - &h * x_prior.rows(i * d, d);
            self.local_b[i] += &hr * innov;
        }
        for (&(i, j), y) in &measurements.relative {
            let sensor = model.relative_sensor(i, j).ok_or_else(|| {
                Error::TopologyMismatch(format!("relative measurement on unknown edge ({i}, {j})"))
            })?;
            let e = topo.edge_id(i, j).expect("sensing edge has a communication edge");
            let (hi, hj) = (sensor.own_map.at(k), sensor.other_map.at(k));
            check_len("relative measurement", hi.nrows(), y.len())?;
            let rows = hi.nrows();
            let (lo, hi_map, hi_agent, lo_map) = if i < j {
                (i, &hj, j, &hi)
            } else {
                (j, &hi, i, &hj)
            };
            let mut g = DMatrix::zeros(rows, 2 * d);
            g.view_mut((0, 0), (rows, d)).copy_from(lo_map);
            g.view_mut((0, d), (rows, d)).copy_from(hi_map);
            let mut x_pair = DVector::zeros(2 * d);
            x_pair.rows_mut(0, d).copy_from(&x_prior.rows(lo * d, d));
            x_pair.rows_mut(d, d).copy_from(&x_prior.rows(hi_agent * d, d));
            let gr = g.tr_mul(&sensor.weight);
            self.edge_s[e] += &gr * &g * epsilon;
            self.edge_b[e] += &gr * (y - &g * x_pair);
        }
        Ok(())
    }

    /// Applies `S_ab ← γ A_a⁻ᵀ S_ab A_b⁻¹` or `S_ab ← A_a⁻ᵀ Γ_a S_ab Γ_b A_b⁻¹`
    /// to every stored term.
    pub fn forget(&mut self, dynamics: &[DMatrix<f64>], forgetting: &Forgetting, k: usize) -> Result<()> {
        let topo = self.topology.clone();
        check_len("dynamics blocks", topo.n_agents(), dynamics.len())?;
        let d = topo.state_dim();
        let mut t = Vec::with_capacity(dynamics.len());
        for (i, a) in dynamics.iter().enumerate() {
            let inv = a
                .clone()
                .try_inverse()
                .ok_or(Error::SingularDynamics { agent: i, k })?;
            t.push(match forgetting {
                Forgetting::Scalar(_) => inv,
                Forgetting::Diagonal(_) => forgetting.left_factor(i, d)? * inv,
            });
        }
        let scale = forgetting.scalar().unwrap_or(1.0);
        for (i, s) in self.local_s.iter_mut().enumerate() {
            *s = t[i].tr_mul(s) * &t[i] * scale;
        }
        for (e, &(a, b)) in topo.comm_edges().iter().enumerate() {
            let mut te = DMatrix::zeros(2 * d, 2 * d);
            te.view_mut((0, 0), (d, d)).copy_from(&t[a]);
            te.view_mut((d, d), (d, d)).copy_from(&t[b]);
            self.edge_s[e] = te.tr_mul(&self.edge_s[e]) * &te * scale;
        }
        self.clear_innovations();
        Ok(())
    }

    /// Global innovation block of agent `i` from its own and incident-edge terms.
    pub fn innovation_block<I: InfoSource + ?Sized>(src: &I, i: usize) -> DVector<f64> {
        let topo = src.topology();
        let d = topo.state_dim();
        let mut out = src.local(i).1.clone();
        for &j in topo.neighbors(i) {
            let e = topo.edge_id(i, j).expect("neighbor edge");
            let off = if i < j { 0 } else { d };
            out += src.edge(e).1.rows(off, d);
        }
        out
    }

    pub fn innovation_vector(&self) -> DVector<f64> {
        let d = self.topology.state_dim();
        let mut b = DVector::zeros(self.topology.global_dim());
        for i in 0..self.topology.n_agents() {
            b.rows_mut(i * d, d).copy_from(&Self::innovation_block(self, i));
        }
        b
    }

    /// Row block `i` of `S x`, reading only agent `i`'s terms, its incident
    /// edges and the neighbour blocks of `x` supplied by `x_block`.
    pub fn product_block<I, F>(src: &I, i: usize, x_block: F) -> DVector<f64>
    where
        I: InfoSource + ?Sized,
        F: Fn(usize) -> DVector<f64>,
    {
        let topo = src.topology();
        let d = topo.state_dim();
        let xi = x_block(i);
        let mut out = src.local(i).0 * &xi;
        for &j in topo.neighbors(i) {
            let e = topo.edge_id(i, j).expect("neighbor edge");
            let s = src.edge(e).0;
            let (own, other) = if i < j { (0, d) } else { (d, 0) };
            out += s.view((own, own), (d, d)) * &xi;
            out += s.view((own, other), (d, d)) * x_block(j);
        }
        out
    }

    /// Dense `(S, b)` including an optional extra prior term.
    pub fn assemble_dense(&self, prior: Option<&BlockSparseInfoMatrix>) -> (DMatrix<f64>, DVector<f64>) {
        let mut s = BlockSparseInfoMatrix::from_contributions(self).to_dense();
        if let Some(p) = prior {
            s += p.to_dense();
        }
        (s, self.innovation_vector())
    }

    pub fn to_block_sparse(&self) -> BlockSparseInfoMatrix {
        BlockSparseInfoMatrix::from_contributions(self)
    }

    /// Multiplies every information matrix and innovation term by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut c = self.clone();
        c.local_s.iter_mut().for_each(|s| *s *= factor);
        c.edge_s.iter_mut().for_each(|s| *s *= factor);
        c
    }
}

/// Forgetting factor: scalar `γ` or per-agent diagonal `Γ_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum Forgetting {
    Scalar(f64),
    Diagonal(Vec<DVector<f64>>),
}

impl Forgetting {
    pub fn uniform_diagonal(gamma: DVector<f64>, n_agents: usize) -> Self {
        Forgetting::Diagonal(vec![gamma; n_agents])
    }

    pub fn validate(&self, n_agents: usize, state_dim: usize) -> Result<()> {
        let in_unit = |g: f64| g > 0.0 && g < 1.0;
        match self {
            Forgetting::Scalar(g) if in_unit(*g) => Ok(()),
            Forgetting::Scalar(g) => Err(Error::InvalidParameter(format!(
                "forgetting factor must lie in (0, 1), got {g}"
            ))),
            Forgetting::Diagonal(gs) => {
                check_len("forgetting blocks", n_agents, gs.len())?;
                for g in gs {
                    check_len("forgetting diagonal", state_dim, g.len())?;
                    if let Some(bad) = g.iter().find(|&&v| !in_unit(v)) {
                        return Err(Error::InvalidParameter(format!(
                            "forgetting diagonal entries must lie in (0, 1), got {bad}"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    fn left_factor(&self, i: usize, d: usize) -> Result<DMatrix<f64>> {
        match self {
            Forgetting::Scalar(g) => Ok(DMatrix::identity(d, d) * g.sqrt()),
            Forgetting::Diagonal(gs) => {
                let g = gs.get(i).ok_or_else(|| {
                    Error::InvalidParameter(format!("no forgetting diagonal for agent {i}"))
                })?;
                check_len("forgetting diagonal", d, g.len())?;
                Ok(DMatrix::from_diagonal(g))
            }
        }
    }

    /// Dense global `Γ` (or `√γ I`).
    pub fn dense(&self, n_agents: usize, d: usize) -> Result<DMatrix<f64>> {
        let blocks = (0..n_agents)
            .map(|i| self.left_factor(i, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(crate::linalg::block_diag(&blocks))
    }

    /// Scalar `γ`, if any.
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Forgetting::Scalar(g) => Some(*g),
            Forgetting::Diagonal(_) => None,
        }
    }
}

/// Per-run observer state: prior estimate and information contributions.
#[derive(Debug, Clone)]
pub struct ObserverState {
    pub x_prior: DVector<f64>,
    pub x_post: Option<DVector<f64>>,
    pub contributions: InfoContributions,
    pub epsilon: f64,
    pub forgetting: Forgetting,
    pub k: usize,
}

impl ObserverState {
    /// Starts from estimate `x̂₀` with prior information `ε·P₀⁻¹`.
    pub fn new(
        topology: Arc<SensingTopology>,
        x0: DVector<f64>,
        p0: &[DMatrix<f64>],
        epsilon: f64,
        forgetting: Forgetting,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must lie in (0, 1], got {epsilon}"
            )));
        }
        forgetting.validate(topology.n_agents(), topology.state_dim())?;
        check_len("initial estimate", topology.global_dim(), x0.len())?;
        let contributions = InfoContributions::from_prior_covariance(topology, p0, epsilon)?;
        Ok(Self {
            x_prior: x0,
            x_post: None,
            contributions,
            epsilon,
            forgetting,
            k: 0,
        })
    }

    pub fn topology(&self) -> &Arc<SensingTopology> {
        self.contributions.topology()
    }

    pub fn measurement_update(&mut self, model: &NetworkModel, measurements: &Measurements) -> Result<()> {
        self.contributions
            .measurement_update(model, measurements, &self.x_prior, self.epsilon, self.k)
    }

    pub fn innovation_vector(&self) -> DVector<f64> {
        self.contributions.innovation_vector()
    }

    /// `x̂_{k|k} = x̂_{k|k-1} + ε ξ̂`.
    pub fn apply_correction(&mut self, xi: &DVector<f64>) -> Result<&DVector<f64>> {
        check_len("correction", self.x_prior.len(), xi.len())?;
        self.x_post = Some(&self.x_prior + xi * self.epsilon);
        Ok(self.x_post.as_ref().expect("just set"))
    }

    /// Propagates the corrected estimate and the information terms to `k+1`.
    pub fn predict(&mut self, model: &NetworkModel) -> Result<()> {
        let k = self.k;
        let post = self
            .x_post
            .take()
            .ok_or_else(|| Error::ProtocolError("predict called before apply_correction".into()))?;
        self.x_prior = model.step_truth(&post, k)?;
        let dynamics: Vec<_> = model.agents().iter().map(|a| a.dynamics_at(k)).collect();
        self.contributions.forget(&dynamics, &self.forgetting, k)?;
        self.k += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs_diff, sym_eig_range};
    use crate::model::{AgentModel, InputSignal, LocalSensor, RelativeSensor};

    pub(crate) fn t2_model() -> NetworkModel {
        let topo = Arc::new(SensingTopology::new(2, &[(0, 1)], &[0], 1).unwrap());
        let one = DMatrix::from_element(1, 1, 1.0);
        let agents = (0..2)
            .map(|i| AgentModel {
                dynamics: one.clone().into(),
                input_map: one.clone().into(),
                input: InputSignal::Zero,
                local: (i == 0).then(|| LocalSensor {
                    map: one.clone().into(),
                    weight: one.clone(),
                }),
            })
            .collect();
        let rel = vec![RelativeSensor {
            own_map: one.clone().into(),
            other_map: (-&one).into(),
            weight: one.clone(),
        }];
        NetworkModel::new(topo, agents, rel).unwrap()
    }

    fn t2_measurements(yl: f64, yr: f64) -> Measurements {
        let mut m = Measurements::default();
        m.local.insert(0, DVector::from_element(1, yl));
        m.relative.insert((0, 1), DVector::from_element(1, yr));
        m
    }

    fn t2_state(eps: f64) -> ObserverState {
        let model = t2_model();
        let p0 = vec![DMatrix::identity(1, 1); 2];
        ObserverState::new(
            model.topology().clone(),
            DVector::zeros(2),
            &p0,
            eps,
            Forgetting::Scalar(0.5),
        )
        .unwrap()
    }

    #[test]
    fn t2_assembly_and_innovation() {
        let model = t2_model();
        let mut st = t2_state(1.0);
        st.measurement_update(&model, &t2_measurements(1.0, 1.0)).unwrap();
        let (s, b) = st.contributions.assemble_dense(None);
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[3.0, -1.0, -1.0, 2.0]));
        assert_eq!(b.as_slice(), &[2.0, -1.0]);

        let (h, r) = model.measurement_matrices(0);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        let oracle = h.transpose() * &r * (y - &h * &st.x_prior);
        assert!((oracle - &b).amax() < 1e-15);
    }

    #[test]
    fn empty_measurements_leave_information_unchanged() {
        let model = t2_model();
        let mut st = t2_state(1.0);
        let before = st.contributions.clone();
        st.measurement_update(&model, &Measurements::default()).unwrap();
        assert_eq!(st.contributions, before);
    }

    #[test]
    fn increments_are_linear_in_epsilon() {
        let model = t2_model();
        let y = t2_measurements(1.0, 1.0);
        let mut a = t2_state(1.0);
        a.measurement_update(&model, &y).unwrap();
        let mut c = InfoContributions::from_prior_covariance(
            model.topology().clone(),
            &[DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
            1.0,
        )
        .unwrap();
        c.measurement_update(&model, &y, &DVector::zeros(2), 0.5, 0).unwrap();
        let (s1, _) = a.contributions.assemble_dense(None);
        let (s05, _) = c.assemble_dense(None);
        let prior = DMatrix::identity(2, 2);
        assert!(max_abs_diff(&(s05 - &prior), &((s1 - &prior) * 0.5)) < 1e-15);
    }

    #[test]
    fn innovation_zero_and_linear_in_weight() {
        let model = t2_model();
        let mut st = t2_state(1.0);
        st.x_prior = DVector::from_vec(vec![0.7, 0.2]);
        st.measurement_update(&model, &t2_measurements(0.7, 0.5)).unwrap();
        assert!(st.innovation_vector().amax() < 1e-15);

        st.measurement_update(&model, &t2_measurements(1.7, 0.0)).unwrap();
        let b1 = st.innovation_vector();
        let mut heavy = model.clone();
        let topo = heavy.topology().clone();
        let mut agents = heavy.agents().to_vec();
        let mut rel = heavy.relative_sensors().to_vec();
        agents[0].local.as_mut().unwrap().weight *= 2.0;
        rel[0].weight *= 2.0;
        heavy = NetworkModel::new(topo, agents, rel).unwrap();
        st.measurement_update(&heavy, &t2_measurements(1.7, 0.0)).unwrap();
        assert!((st.innovation_vector() - b1 * 2.0).amax() < 1e-14);
    }

    #[test]
    fn unknown_edge_measurement_rejected() {
        let model = t2_model();
        let mut st = t2_state(1.0);
        let mut m = Measurements::default();
        m.relative.insert((1, 0), DVector::from_element(1, 0.0));
        assert!(matches!(
            st.measurement_update(&model, &m),
            Err(Error::TopologyMismatch(_))
        ));
        let mut m = Measurements::default();
        m.local.insert(1, DVector::from_element(1, 0.0));
        assert!(matches!(
            st.measurement_update(&model, &m),
            Err(Error::TopologyMismatch(_))
        ));
    }

    #[test]
    fn scalar_forgetting_examples() {
        let topo = Arc::new(SensingTopology::new(2, &[(0, 1)], &[], 1).unwrap());
        let mut c = InfoContributions::zeros(topo.clone());
        c.local_s = vec![DMatrix::identity(1, 1); 2];
        let id = DMatrix::identity(1, 1);
        c.forget(&[id.clone(), id.clone()], &Forgetting::Scalar(0.5), 0).unwrap();
        assert_eq!(c.assemble_dense(None).0, DMatrix::identity(2, 2) * 0.5);

        let mut c = InfoContributions::zeros(topo);
        c.edge_s[0] = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let a = [DMatrix::from_element(1, 1, 2.0), id];
        c.forget(&a, &Forgetting::Scalar(0.5), 0).unwrap();
        assert!((c.to_block_sparse().block(0, 1).unwrap()[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn singular_dynamics_in_prediction() {
        let topo = Arc::new(SensingTopology::new(2, &[], &[], 1).unwrap());
        let mut c = InfoContributions::zeros(topo);
        let a = [DMatrix::identity(1, 1), DMatrix::zeros(1, 1)];
        assert_eq!(
            c.forget(&a, &Forgetting::Scalar(0.5), 7).unwrap_err(),
            Error::SingularDynamics { agent: 1, k: 7 }
        );
    }

    #[test]
    fn matrix_forgetting_matches_dense_congruence() {
        let topo = Arc::new(SensingTopology::new(3, &[(0, 1), (2, 1)], &[0], 4).unwrap());
        let (a, _) = crate::model::double_integrator(0.05).unwrap();
        let ts: f64 = 0.05;
        let g = DVector::from_vec(vec![
            (-5.0 * ts).exp(),
            (-5.0 * ts).exp(),
            (-50.0 * ts).exp(),
            (-50.0 * ts).exp(),
        ]);
        assert!((g[0] - 0.779).abs() < 1e-3 && (g[2] - 0.082).abs() < 1e-3);
        let mut c = InfoContributions::zeros(topo.clone());
        for (i, s) in c.local_s.iter_mut().enumerate() {
            let m = DMatrix::from_fn(4, 4, |r, q| ((r * 4 + q + i) as f64 * 0.31).cos());
            *s = &m * m.transpose();
        }
        for (e, s) in c.edge_s.iter_mut().enumerate() {
            let m = DMatrix::from_fn(8, 8, |r, q| ((r * 8 + q + 3 * e) as f64 * 0.17).sin());
            *s = &m * m.transpose();
        }
        let dense = c.assemble_dense(None).0;
        let f = Forgetting::uniform_diagonal(g, 3);
        c.forget(&vec![a.clone(); 3], &f, 0).unwrap();
        let gam = f.dense(3, 4).unwrap();
        let a_inv = crate::linalg::block_diag(&vec![a.try_inverse().unwrap(); 3]);
        let oracle = a_inv.transpose() * &gam * dense * &gam * &a_inv;
        assert!(max_abs_diff(&c.assemble_dense(None).0, &oracle) < 1e-12);
    }

    #[test]
    fn forgetting_parameter_validation() {
        assert!(Forgetting::Scalar(1.0).validate(1, 1).is_err());
        assert!(Forgetting::Scalar(0.0).validate(1, 1).is_err());
        assert!(Forgetting::Scalar(0.9).validate(1, 1).is_ok());
        let bad = Forgetting::uniform_diagonal(DVector::from_vec(vec![0.5, 1.2]), 2);
        assert!(bad.validate(2, 2).is_err());
    }

    #[test]
    fn correction_equals_information_filter_posterior() {
        let model = t2_model();
        for eps in [1.0, 0.5] {
            let mut st = t2_state(eps);
            st.x_prior = DVector::from_vec(vec![0.3, -0.4]);
            let s_prior = st.contributions.assemble_dense(None).0;
            let z_prior = &s_prior * &st.x_prior;
            let y = t2_measurements(1.0, 2.0);
            st.measurement_update(&model, &y).unwrap();
            let (s, b) = st.contributions.assemble_dense(None);
            let xi = s.clone().cholesky().unwrap().solve(&b);
            let post = st.apply_correction(&xi).unwrap().clone();
            let (h, r) = model.measurement_matrices(0);
            let z = z_prior + h.transpose() * r * model.stack_measurements(&y).unwrap() * eps;
            let oracle = s.cholesky().unwrap().solve(&z);
            assert!((&post - &oracle).amax() < 1e-12);
            // Same posterior for either ε since the prior scales with ε.
            let expected = {
                let s1 = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, -1.0, 2.0]);
                let b1 = DVector::from_vec(vec![1.0 - 0.3 + 2.0 - 0.7, -(2.0 - 0.7)]);
                DVector::from_vec(vec![0.3, -0.4]) + s1.cholesky().unwrap().solve(&b1)
            };
            assert!((post - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_correction_keeps_prior_and_prediction_advances() {
        let model = t2_model();
        let mut st = t2_state(1.0);
        st.x_prior = DVector::from_vec(vec![1.0, 2.0]);
        let post = st.apply_correction(&DVector::zeros(2)).unwrap().clone();
        assert_eq!(post, st.x_prior);
        assert!(matches!(
            st.apply_correction(&DVector::zeros(3)),
            Err(Error::DimensionError { .. })
        ));
        st.predict(&model).unwrap();
        assert_eq!(st.k, 1);
        assert_eq!(st.x_prior.as_slice(), &[1.0, 2.0]);
        assert!(st.predict(&model).is_err());
    }

    #[test]
    fn block_sparse_product_and_symmetry() {
        let topo = Arc::new(SensingTopology::new(4, &[(0, 1), (2, 1), (3, 2)], &[0], 2).unwrap());
        let mut c = InfoContributions::zeros(topo.clone());
        for (i, s) in c.local_s.iter_mut().enumerate() {
            *s = DMatrix::identity(2, 2) * (1.0 + i as f64);
        }
        for (e, s) in c.edge_s.iter_mut().enumerate() {
            let m = DMatrix::from_fn(4, 4, |r, q| ((r + 2 * q + e) as f64).sin());
            *s = &m * m.transpose();
        }
        let sparse = c.to_block_sparse();
        let dense = sparse.to_dense();
        assert!(max_abs_diff(&dense, &dense.transpose()) < 1e-15);
        assert_eq!(dense.view((0, 4), (2, 2)).amax(), 0.0);
        assert_eq!(dense.view((0, 6), (2, 2)).amax(), 0.0);
        assert!(sparse.block(0, 2).is_none());
        assert_eq!(sparse.block(1, 0).unwrap(), sparse.block(0, 1).unwrap().transpose());
        let x = DVector::from_fn(8, |r, _| r as f64 - 3.5);
        let y = sparse.mul_vec(&x).unwrap();
        assert!((&dense * &x - &y).amax() < 1e-12);
        for i in 0..4 {
            let blk = InfoContributions::product_block(&c, i, |j| x.rows(2 * j, 2).into_owned());
            assert!((blk - y.rows(2 * i, 2)).amax() < 1e-12);
        }
        let (lo, _) = sym_eig_range(&dense);
        assert!(lo > 0.0);
    }
}
