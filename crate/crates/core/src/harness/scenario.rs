//! Cooperative-localization scenario: planar double integrators on a
//! proximity sensing graph with a few anchors.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ScenarioConfig, STATE_DIM};
use crate::error::{Error, Result};
use crate::model::{
    double_integrator, position_selector, AgentModel, InputSignal, LocalSensor, NetworkModel,
    RelativeSensor,
};
use crate::observer::Forgetting;
use crate::topology::SensingTopology;

/// Independent random streams, so that e.g. the solver choice or the noise
/// level never changes the generated graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Graph = 1,
    Truth = 2,
    Estimate = 3,
    Noise = 4,
    Input = 5,
}

pub fn rng_for(seed: u64, stream: Stream, sub: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | sub as u64);
    rng
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub model: Arc<NetworkModel>,
    pub positions: Vec<[f64; 2]>,
    pub x0: DVector<f64>,
    pub xhat0: DVector<f64>,
    pub p0: Vec<DMatrix<f64>>,
    pub forgetting: Forgetting,
    /// Graph draws needed to reach an observable network.
    pub attempts: usize,
    pub observable_window: usize,
}

impl Scenario {
    pub fn topology(&self) -> &Arc<SensingTopology> {
        self.model.topology()
    }
}

fn proximity_edges(positions: &[[f64; 2]], radius: f64, bidirectional: bool) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            let dx = positions[i][0] - positions[j][0];
            let dy = positions[i][1] - positions[j][1];
            if (dx * dx + dy * dy).sqrt() <= radius {
                edges.push((i, j));
                if bidirectional {
                    edges.push((j, i));
                }
            }
        }
    }
    edges
}

fn build_model(
    cfg: &ScenarioConfig,
    edges: &[(usize, usize)],
    anchors: &[usize],
    inputs: Option<Arc<Vec<Vec<[f64; 2]>>>>,
) -> Result<NetworkModel> {
    let topo = Arc::new(SensingTopology::new(cfg.n_agents, edges, anchors, STATE_DIM)?);
    let (a, b) = double_integrator(cfg.ts)?;
    let h = position_selector();
    let (w_local, w_rel) = cfg.weights();
    let agents = (0..cfg.n_agents)
        .map(|i| AgentModel {
            dynamics: a.clone().into(),
            input_map: b.clone().into(),
            input: match &inputs {
                Some(u) => {
                    let u = u.clone();
                    InputSignal::varying(move |k| match u.get(k) {
                        Some(row) => DVector::from_column_slice(&row[i]),
                        None => DVector::zeros(2),
                    })
                }
                None => InputSignal::Zero,
            },
            local: topo.is_anchor(i).then(|| LocalSensor {
                map: h.clone().into(),
                weight: DMatrix::identity(2, 2) * w_local,
            }),
        })
        .collect();
    let relative = topo
        .sensing_edges()
        .iter()
        .map(|_| RelativeSensor {
            own_map: h.clone().into(),
            other_map: (-&h).into(),
            weight: DMatrix::identity(2, 2) * w_rel,
        })
        .collect();
    NetworkModel::new(topo, agents, relative)
}

/// Deterministic in `config.seed`. Proximity graphs are redrawn with the
/// next sub-seed until the network is observable.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let n = cfg.n_agents;
    let inputs = (cfg.input_std > 0.0).then(|| {
        let mut rng = rng_for(cfg.seed, Stream::Input, 0);
        let dist = Normal::new(0.0, cfg.input_std).expect("validated std");
        Arc::new(
            (0..cfg.steps)
                .map(|_| {
                    (0..n)
                        .map(|_| [dist.sample(&mut rng), dist.sample(&mut rng)])
                        .collect()
                })
                .collect::<Vec<Vec<[f64; 2]>>>(),
        )
    });

    let attempts_allowed = if cfg.edges.is_some() { 1 } else { cfg.max_retries.max(1) };
    let mut found = None;
    for attempt in 0..attempts_allowed {
        let mut rng = rng_for(cfg.seed, Stream::Graph, attempt as u32);
        let positions: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(0.0..cfg.workspace),
                    rng.random_range(0.0..cfg.workspace),
                ]
            })
            .collect();
        let edges: Vec<(usize, usize)> = match &cfg.edges {
            Some(list) => list.iter().map(|&[i, j]| (i, j)).collect(),
            None => proximity_edges(&positions, cfg.radius, cfg.bidirectional),
        };
        let anchors: Vec<usize> = match &cfg.anchors {
            Some(a) => a.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
            None => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                order.truncate(cfg.n_anchors);
                order.sort_unstable();
                order
            }
        };
        let model = build_model(cfg, &edges, &anchors, inputs.clone())?;
        if let Some(window) = model.smallest_observable_window(3, 1e-9) {
            found = Some((attempt + 1, positions, model, window));
            break;
        }
    }
    let (attempts, positions, model, observable_window) =
        found.ok_or(Error::UnobservableScenario {
            attempts: attempts_allowed,
        })?;

    let mut truth_rng = rng_for(cfg.seed, Stream::Truth, 0);
    let mut x0 = DVector::zeros(n * STATE_DIM);
    for (i, p) in positions.iter().enumerate() {
        x0[i * STATE_DIM] = p[0];
        x0[i * STATE_DIM + 1] = p[1];
        if cfg.velocity_scale > 0.0 {
            x0[i * STATE_DIM + 2] = truth_rng.random_range(-cfg.velocity_scale..=cfg.velocity_scale);
            x0[i * STATE_DIM + 3] = truth_rng.random_range(-cfg.velocity_scale..=cfg.velocity_scale);
        }
    }

    let p0_block = DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.p0_diag));
    let p0 = vec![p0_block; n];
    let mut xhat0 = x0.clone();
    if cfg.perturb_initial {
        let mut rng = rng_for(cfg.seed, Stream::Estimate, 0);
        for i in 0..n {
            for (c, &var) in cfg.p0_diag.iter().enumerate() {
                let nu = Normal::new(0.0, var.sqrt()).expect("positive variance");
                xhat0[i * STATE_DIM + c] += nu.sample(&mut rng);
            }
        }
    }

    let forgetting = match (cfg.gamma, &cfg.gamma_diag) {
        (Some(g), _) => Forgetting::Scalar(g),
        (None, Some(diag)) => Forgetting::uniform_diagonal(DVector::from_column_slice(diag), n),
        (None, None) => Forgetting::uniform_diagonal(
            DVector::from_vec(ScenarioConfig::default_gamma_diag(cfg.ts)),
            n,
        ),
    };

    Ok(Scenario {
        config: cfg.clone(),
        model: Arc::new(model),
        positions,
        x0,
        xhat0,
        p0,
        forgetting,
        attempts,
        observable_window,
    })
}
