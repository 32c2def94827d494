//! Sensing and communication graphs plus the index bookkeeping that stands in
//! for the block selection matrices of the observer.
//!
//! Agents are indexed `0..n_agents`. Undirected communication edges are stored
//! as `(min, max)` pairs in lexicographic order, and every stacked vector in the
//! crate uses that ordering. Selection matrices are never materialized: agent
//! blocks are ranges, the dual pairing is an index permutation, and the
//! `A_qi` action is implemented by [`DualLayout::aq_transpose`] /
//! [`DualLayout::aq_apply`].

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use nalgebra::DVector;

use crate::error::{check_len, Error, Result};

/// Directed sensing graph, its undirected communication counterpart and the
/// set of agents carrying local (absolute) sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingTopology {
    n_agents: usize,
    state_dim: usize,
    sensing_edges: Vec<(usize, usize)>,
    comm_edges: Vec<(usize, usize)>,
    anchors: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
    edge_ids: BTreeMap<(usize, usize), usize>,
}

impl SensingTopology {
    /// Builds the topology. Duplicate directed edges collapse; the
    /// communication graph is the symmetrization of the sensing graph.
    pub fn new(
        n_agents: usize,
        sensing_edges: &[(usize, usize)],
        anchors: &[usize],
        state_dim: usize,
    ) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::InvalidParameter("n_agents must be positive".into()));
        }
        if state_dim == 0 {
            return Err(Error::InvalidParameter("state_dim must be positive".into()));
        }
        let check = |index: usize| {
            if index < n_agents {
                Ok(())
            } else {
                Err(Error::InvalidAgentIndex { index, n_agents })
            }
        };

        let mut directed = BTreeSet::new();
        for &(i, j) in sensing_edges {
            check(i)?;
            check(j)?;
            if i == j {
                return Err(Error::InvalidEdge(i, j));
            }
            directed.insert((i, j));
        }
        let undirected: BTreeSet<(usize, usize)> =
            directed.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();

        let mut anchor_flags = vec![false; n_agents];
        for &a in anchors {
            check(a)?;
            anchor_flags[a] = true;
        }

        let comm_edges: Vec<_> = undirected.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n_agents];
        let mut edge_ids = BTreeMap::new();
        for (e, &(i, j)) in comm_edges.iter().enumerate() {
            neighbors[i].push(j);
            neighbors[j].push(i);
            edge_ids.insert((i, j), e);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        Ok(Self {
            n_agents,
            state_dim,
            sensing_edges: directed.into_iter().collect(),
            comm_edges,
            anchors: anchor_flags,
            neighbors,
            edge_ids,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Total stacked state dimension `N·d`.
    pub fn global_dim(&self) -> usize {
        self.n_agents * self.state_dim
    }

    /// Directed sensing edges in lexicographic order.
    pub fn sensing_edges(&self) -> &[(usize, usize)] {
        &self.sensing_edges
    }

    /// Undirected communication edges as `(min, max)` in lexicographic order.
    pub fn comm_edges(&self) -> &[(usize, usize)] {
        &self.comm_edges
    }

    pub fn n_comm_edges(&self) -> usize {
        self.comm_edges.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn is_anchor(&self, i: usize) -> bool {
        self.anchors[i]
    }

    pub fn anchors(&self) -> impl Iterator<Item = usize> + '_ {
        self.anchors
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
    }

    pub fn has_sensing_edge(&self, i: usize, j: usize) -> bool {
        self.sensing_edges.binary_search(&(i, j)).is_ok()
    }

    /// Index of the undirected edge `{i, j}` (order-insensitive).
    pub fn edge_id(&self, i: usize, j: usize) -> Option<usize> {
        self.edge_ids.get(&(i.min(j), i.max(j))).copied()
    }

    /// Position of `j` inside `neighbors(i)`.
    pub fn neighbor_position(&self, i: usize, j: usize) -> Option<usize> {
        self.neighbors[i].binary_search(&j).ok()
    }

    /// Range of agent `i`'s block inside a stacked state vector (`E_iᵀ x`).
    pub fn agent_range(&self, i: usize) -> Range<usize> {
        i * self.state_dim..(i + 1) * self.state_dim
    }

    /// Whether the off-diagonal block `(i, j)` is allowed to be nonzero.
    pub fn in_pattern(&self, i: usize, j: usize) -> bool {
        i == j || self.edge_id(i, j).is_some()
    }

    /// Connected components of the communication graph, each sorted.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n_agents];
        let mut out = Vec::new();
        for start in 0..self.n_agents {
            if seen[start] {
                continue;
            }
            let mut stack = vec![start];
            let mut comp = Vec::new();
            seen[start] = true;
            while let Some(v) = stack.pop() {
                comp.push(v);
                for &w in &self.neighbors[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Which variable a dual slot refers to, from the point of view of its owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// `q_{ij,i}`: owner `i`'s dual on its own copy, for edge towards `j`.
    Own,
    /// `q_{ij,j}`: owner `i`'s dual on its copy of neighbor `j`.
    Copy,
}

/// A d-dimensional block of the stacked dual vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualSlot {
    pub owner: usize,
    pub neighbor: usize,
    pub kind: SlotKind,
}

impl DualSlot {
    /// The agent whose correction this dual block prices.
    pub fn variable(&self) -> usize {
        match self.kind {
            SlotKind::Own => self.owner,
            SlotKind::Copy => self.neighbor,
        }
    }
}

/// Layout of the stacked dual vector `q`.
///
/// For each agent `i` in index order the slice is
/// `[col(q_{ij,i})_{j∈N_i}; col(q_{ij,j})_{j∈N_i}]`, neighbors in ascending
/// order. The pairing exchanges `q_{ij,x}` with `q_{ji,x}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualLayout {
    state_dim: usize,
    offsets: Vec<usize>,
    degrees: Vec<usize>,
    slots: Vec<DualSlot>,
    block_pairing: Vec<usize>,
}

impl DualLayout {
    pub fn new(topology: &SensingTopology) -> Self {
        let d = topology.state_dim();
        let n = topology.n_agents();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut slots = Vec::new();
        let mut acc = 0;
        for i in 0..n {
            offsets.push(acc);
            let nbrs = topology.neighbors(i);
            for &j in nbrs {
                slots.push(DualSlot {
                    owner: i,
                    neighbor: j,
                    kind: SlotKind::Own,
                });
            }
            for &j in nbrs {
                slots.push(DualSlot {
                    owner: i,
                    neighbor: j,
                    kind: SlotKind::Copy,
                });
            }
            acc += 2 * nbrs.len() * d;
        }
        offsets.push(acc);
        let degrees: Vec<usize> = (0..n).map(|i| topology.degree(i)).collect();

        let block_index = |owner: usize, pos: usize, kind: SlotKind| -> usize {
            let base = offsets[owner] / d;
            match kind {
                SlotKind::Own => base + pos,
                SlotKind::Copy => base + degrees[owner] + pos,
            }
        };
        let block_pairing = slots
            .iter()
            .map(|s| {
                let pos_in_neighbor = topology
                    .neighbor_position(s.neighbor, s.owner)
                    .expect("neighbor sets are symmetric");
                let partner_kind = match s.kind {
                    SlotKind::Own => SlotKind::Copy,
                    SlotKind::Copy => SlotKind::Own,
                };
                block_index(s.neighbor, pos_in_neighbor, partner_kind)
            })
            .collect();

        Self {
            state_dim: d,
            offsets,
            degrees,
            slots,
            block_pairing,
        }
    }

    /// Total length `4|E_c|d`.
    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn n_agents(&self) -> usize {
        self.degrees.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.degrees[i]
    }

    /// Range of agent `i`'s dual slice `q_i`.
    pub fn agent_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Scalar range of `q_{ij,i}` where `j` is the `pos`-th neighbor of `i`.
    pub fn own_range(&self, i: usize, pos: usize) -> Range<usize> {
        let start = self.offsets[i] + pos * self.state_dim;
        start..start + self.state_dim
    }

    /// Scalar range of `q_{ij,j}` where `j` is the `pos`-th neighbor of `i`.
    pub fn copy_range(&self, i: usize, pos: usize) -> Range<usize> {
        let start = self.offsets[i] + (self.degrees[i] + pos) * self.state_dim;
        start..start + self.state_dim
    }

    /// Length of agent `i`'s extended local vector `[ξ_i^(i); col(ξ_j^(i))]`.
    pub fn extended_len(&self, i: usize) -> usize {
        (1 + self.degrees[i]) * self.state_dim
    }

    /// Block descriptors in stacking order.
    pub fn slots(&self) -> &[DualSlot] {
        &self.slots
    }

    /// Pairing as a permutation of d-blocks.
    pub fn block_pairing(&self) -> &[usize] {
        &self.block_pairing
    }

    /// Pairing as a permutation of scalar entries.
    pub fn scalar_pairing(&self) -> Vec<usize> {
        let d = self.state_dim;
        (0..self.len())
            .map(|s| self.block_pairing[s / d] * d + s % d)
            .collect()
    }

    /// Returns `P q`.
    pub fn apply_pairing(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("dual vector", self.len(), q.len())?;
        let d = self.state_dim;
        let mut out = DVector::zeros(q.len());
        for (b, &p) in self.block_pairing.iter().enumerate() {
            out.rows_mut(p * d, d).copy_from(&q.rows(b * d, d));
        }
        Ok(out)
    }

    /// `A_qiᵀ q_i = [Σ_j q_{ij,i}; col(q_{ij,j})]`, from agent `i`'s slice only.
    pub fn aq_transpose(&self, i: usize, q_i: &[f64]) -> DVector<f64> {
        let d = self.state_dim;
        let deg = self.degrees[i];
        debug_assert_eq!(q_i.len(), 2 * deg * d);
        let mut out = DVector::zeros((1 + deg) * d);
        for pos in 0..deg {
            for r in 0..d {
                out[r] += q_i[pos * d + r];
            }
        }
        out.rows_mut(d, deg * d)
            .copy_from_slice(&q_i[deg * d..2 * deg * d]);
        out
    }

    /// `A_qi x` for an extended local vector `x = [x_own; col(x_j)]`.
    pub fn aq_apply(&self, i: usize, ext: &DVector<f64>) -> DVector<f64> {
        let d = self.state_dim;
        let deg = self.degrees[i];
        debug_assert_eq!(ext.len(), (1 + deg) * d);
        let mut out = DVector::zeros(2 * deg * d);
        for pos in 0..deg {
            out.rows_mut(pos * d, d).copy_from(&ext.rows(0, d));
        }
        out.rows_mut(deg * d, deg * d)
            .copy_from(&ext.rows(d, deg * d));
        out
    }

    /// `Σ_i`: agent `i`'s own copy, the first block of its extended vector.
    pub fn select_own(&self, ext: &DVector<f64>) -> DVector<f64> {
        ext.rows(0, self.state_dim).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_directed_edge_symmetrizes() {
        let t = SensingTopology::new(3, &[(0, 1)], &[], 1).unwrap();
        assert_eq!(t.comm_edges(), &[(0, 1)]);
        assert_eq!(t.neighbors(0), &[1]);
        assert_eq!(t.neighbors(1), &[0]);
        assert!(t.neighbors(2).is_empty());
    }

    #[test]
    fn empty_sensing_graph() {
        let t = SensingTopology::new(2, &[], &[], 1).unwrap();
        assert!(t.comm_edges().is_empty());
        assert!(DualLayout::new(&t).is_empty());
    }

    #[test]
    fn duplicate_directed_edges_collapse() {
        let t = SensingTopology::new(3, &[(0, 1), (1, 0), (1, 2)], &[], 1).unwrap();
        assert_eq!(t.comm_edges(), &[(0, 1), (1, 2)]);
        assert_eq!(t.neighbors(1), &[0, 2]);
        assert_eq!(t.sensing_edges().len(), 3);
    }

    #[test]
    fn rejects_self_loops_and_bad_indices() {
        assert_eq!(
            SensingTopology::new(3, &[(1, 1)], &[], 1),
            Err(Error::InvalidEdge(1, 1))
        );
        assert_eq!(
            SensingTopology::new(3, &[(0, 3)], &[], 1),
            Err(Error::InvalidAgentIndex {
                index: 3,
                n_agents: 3
            })
        );
        assert!(matches!(
            SensingTopology::new(3, &[], &[5], 1),
            Err(Error::InvalidAgentIndex { index: 5, .. })
        ));
    }

    #[test]
    fn single_edge_layout_matches_hand_enumeration() {
        // Slots: [q_{12,1}, q_{12,2}, q_{21,2}, q_{21,1}]; q_{ij,x} <-> q_{ji,x}.
        let t = SensingTopology::new(2, &[(0, 1)], &[], 1).unwrap();
        let layout = DualLayout::new(&t);
        assert_eq!(layout.len(), 4);
        let expected = [
            (0, 1, SlotKind::Own),
            (0, 1, SlotKind::Copy),
            (1, 0, SlotKind::Own),
            (1, 0, SlotKind::Copy),
        ];
        for (slot, (o, n, k)) in layout.slots().iter().zip(expected) {
            assert_eq!((slot.owner, slot.neighbor, slot.kind), (o, n, k));
        }
        assert_eq!(layout.block_pairing(), &[3, 2, 1, 0]);

        let q = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let pq = layout.apply_pairing(&q).unwrap();
        assert_eq!(pq.as_slice(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(layout.apply_pairing(&pq).unwrap(), q);
        let zero = DVector::zeros(4);
        assert_eq!(layout.apply_pairing(&zero).unwrap(), zero);
    }

    #[test]
    fn path_graph_layout() {
        let t = SensingTopology::new(3, &[(0, 1), (1, 2)], &[], 1).unwrap();
        let layout = DualLayout::new(&t);
        assert_eq!(layout.len(), 8);
        let pairing = layout.block_pairing();
        for (b, slot) in layout.slots().iter().enumerate() {
            let partner = layout.slots()[pairing[b]];
            assert_eq!(pairing[pairing[b]], b);
            assert_ne!(pairing[b], b);
            // The partner is owned by the other endpoint of the same edge and
            // prices the same variable.
            assert_eq!(partner.owner, slot.neighbor);
            assert_eq!(partner.neighbor, slot.owner);
            assert_eq!(partner.variable(), slot.variable());
        }
    }

    #[test]
    fn pairing_length_mismatch_is_reported() {
        let t = SensingTopology::new(2, &[(0, 1)], &[], 2).unwrap();
        let layout = DualLayout::new(&t);
        assert!(matches!(
            layout.apply_pairing(&DVector::zeros(3)),
            Err(Error::DimensionError { expected: 8, got: 3, .. })
        ));
    }

    #[test]
    fn aq_structure_matches_definition() {
        let t = SensingTopology::new(4, &[(0, 1), (0, 2), (3, 0)], &[], 2).unwrap();
        let layout = DualLayout::new(&t);
        let q_i: Vec<f64> = (0..layout.agent_range(0).len()).map(|v| v as f64).collect();
        let got = layout.aq_transpose(0, &q_i);
        // Agent 0 has neighbors [1, 2, 3]: own blocks at 0..6, copies at 6..12.
        assert_eq!(got.as_slice(), &[0. + 2. + 4., 1. + 3. + 5., 6., 7., 8., 9., 10., 11.]);
    }

    fn arb_topology() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, usize)> {
        (2usize..7, 1usize..3).prop_flat_map(|(n, d)| {
            let edge = (0..n, 0..n).prop_filter("no self loops", |(i, j)| i != j);
            (Just(n), proptest::collection::vec(edge, 0..12), Just(d))
        })
    }

    proptest! {
        #[test]
        fn pairing_is_fixed_point_free_involution((n, edges, d) in arb_topology()) {
            let t = SensingTopology::new(n, &edges, &[], d).unwrap();
            let layout = DualLayout::new(&t);
            prop_assert_eq!(layout.len(), 4 * t.n_comm_edges() * d);
            let p = layout.scalar_pairing();
            for (s, &ps) in p.iter().enumerate() {
                prop_assert_eq!(p[ps], s);
                prop_assert_ne!(ps, s);
            }
        }

        #[test]
        fn neighbor_sets_symmetric_and_edges_exact((n, edges, d) in arb_topology()) {
            let t = SensingTopology::new(n, &edges, &[], d).unwrap();
            for i in 0..n {
                for &j in t.neighbors(i) {
                    prop_assert!(t.neighbors(j).contains(&i));
                }
            }
            let expected: BTreeSet<_> = edges.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
            let got: BTreeSet<_> = t.comm_edges().iter().copied().collect();
            prop_assert_eq!(expected, got);
            // Rebuilding from the communication edges is pattern-stable.
            let again = SensingTopology::new(n, t.comm_edges(), &[], d).unwrap();
            prop_assert_eq!(again.comm_edges(), t.comm_edges());
        }

        #[test]
        fn aq_transpose_matches_bracketed_sum(
            (n, edges, d) in arb_topology(),
            seed in any::<u64>(),
        ) {
            let t = SensingTopology::new(n, &edges, &[], d).unwrap();
            let layout = DualLayout::new(&t);
            let q: Vec<f64> = (0..layout.len())
                .map(|s| ((s as u64).wrapping_mul(2654435761) ^ seed) as f64 / u64::MAX as f64)
                .collect();
            for i in 0..n {
                let r = layout.agent_range(i);
                let got = layout.aq_transpose(i, &q[r]);
                let mut sum = DVector::zeros(d);
                for pos in 0..t.degree(i) {
                    sum += DVector::from_row_slice(&q[layout.own_range(i, pos)]);
                }
                prop_assert_eq!(got.rows(0, d).into_owned(), sum);
                for pos in 0..t.degree(i) {
                    let expected = DVector::from_row_slice(&q[layout.copy_range(i, pos)]);
                    prop_assert_eq!(got.rows(d * (1 + pos), d).into_owned(), expected);
                }
                // Adjointness: <A x, q_i> = <x, Aᵀ q_i>.
                let ext = DVector::from_fn(layout.extended_len(i), |r, _| (r as f64 + 1.0).sqrt());
                let qi = DVector::from_row_slice(&q[layout.agent_range(i)]);
                let lhs = layout.aq_apply(i, &ext).dot(&qi);
                let rhs = ext.dot(&got);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            }
        }
    }
}
