//! Scenario configuration, read from a flat TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::solvers::{SolverKind, SolverParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_agents: usize,
    pub n_anchors: usize,
    pub ts: f64,
    pub steps: usize,
    pub seed: u64,
    /// Side length of the square workspace.
    pub workspace: f64,
    /// Proximity radius for relative sensing.
    pub radius: f64,
    /// Explicit directed sensing edges; replaces the proximity graph.
    pub edges: Option<Vec<[usize; 2]>>,
    /// Explicit anchors; replaces the seeded shuffle.
    pub anchors: Option<Vec<usize>>,
    /// Sense proximity pairs in both directions.
    pub bidirectional: bool,
    /// Scalar forgetting factor; overrides `gamma_diag`.
    pub gamma: Option<f64>,
    /// Per-component forgetting diagonal; defaults to `e^{-5 Ts}` on
    /// positions and `e^{-50 Ts}` on velocities.
    pub gamma_diag: Option<Vec<f64>>,
    pub epsilon: f64,
    pub local_weight: f64,
    pub relative_weight: f64,
    /// Read the two weights above as covariances and invert them.
    pub r_as_inverse: bool,
    pub solver: SolverKind,
    pub alpha_r: f64,
    pub rho: f64,
    pub alpha: f64,
    pub h_iters: usize,
    pub p0_diag: Vec<f64>,
    /// Initial velocities are uniform in `[-velocity_scale, velocity_scale]`.
    pub velocity_scale: f64,
    /// Perturb the initial estimate with `ν ~ N(0, P₀)`.
    pub perturb_initial: bool,
    /// Standard deviation of random accelerations; zero disables the input.
    pub input_std: f64,
    /// Standard deviation of additive measurement noise.
    pub noise_std: f64,
    /// Also run a centralized observer on the same data as a baseline.
    pub baseline: bool,
    pub max_retries: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_agents: 10,
            n_anchors: 3,
            ts: 0.05,
            steps: 6000,
            seed: 1,
            workspace: 10.0,
            radius: 4.0,
            edges: None,
            anchors: None,
            bidirectional: true,
            gamma: None,
            gamma_diag: None,
            epsilon: 1.0,
            local_weight: 0.2,
            relative_weight: 2.0,
            r_as_inverse: false,
            solver: SolverKind::Admm,
            alpha_r: 0.05,
            rho: 1.0,
            alpha: 0.95,
            h_iters: 1,
            p0_diag: vec![1.0, 1.0, 0.1, 0.1],
            velocity_scale: 1.0,
            perturb_initial: true,
            input_std: 0.0,
            noise_std: 0.0,
            baseline: false,
            max_retries: 50,
        }
    }
}

pub const STATE_DIM: usize = 4;

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical TOML echo.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn solver_params(&self) -> SolverParams {
        SolverParams {
            alpha_r: self.alpha_r,
            rho: self.rho,
            alpha: self.alpha,
            h_iters: self.h_iters,
        }
    }

    /// Information weights actually applied to local and relative measurements.
    pub fn weights(&self) -> (f64, f64) {
        if self.r_as_inverse {
            (1.0 / self.local_weight, 1.0 / self.relative_weight)
        } else {
            (self.local_weight, self.relative_weight)
        }
    }

    pub fn default_gamma_diag(ts: f64) -> Vec<f64> {
        let p = (-5.0 * ts).exp();
        let v = (-50.0 * ts).exp();
        vec![p, p, v, v]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_agents == 0 {
            return bad("n_agents must be positive".into());
        }
        if self.n_anchors > self.n_agents {
            return bad(format!(
                "n_anchors ({}) exceeds n_agents ({})",
                self.n_anchors, self.n_agents
            ));
        }
        for (name, v) in [
            ("ts", self.ts),
            ("workspace", self.workspace),
            ("local_weight", self.local_weight),
            ("relative_weight", self.relative_weight),
            ("rho", self.rho),
            ("alpha_r", self.alpha_r),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("radius", self.radius),
            ("velocity_scale", self.velocity_scale),
            ("input_std", self.input_std),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.h_iters == 0 {
            return bad("h_iters must be at least 1".into());
        }
        if self.p0_diag.len() != STATE_DIM || self.p0_diag.iter().any(|&v| !(v > 0.0)) {
            return bad(format!("p0_diag must hold {STATE_DIM} positive entries"));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return bad(format!("gamma must lie in (0, 1), got {g}"));
            }
            if self.gamma_diag.is_some() {
                return bad("set at most one of gamma and gamma_diag".into());
            }
        }
        if let Some(g) = &self.gamma_diag {
            if g.len() != STATE_DIM || g.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return bad(format!(
                    "gamma_diag must hold {STATE_DIM} entries in (0, 1)"
                ));
            }
        }
        if let Some(edges) = &self.edges {
            for &[i, j] in edges {
                if i >= self.n_agents || j >= self.n_agents || i == j {
                    return bad(format!("invalid edge [{i}, {j}]"));
                }
            }
        }
        if let Some(anchors) = &self.anchors {
            if let Some(&a) = anchors.iter().find(|&&a| a >= self.n_agents) {
                return bad(format!("anchor {a} out of range"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ScenarioConfig::default();
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.weights(), (0.2, 2.0));
        let g = ScenarioConfig::default_gamma_diag(0.05);
        assert!((g[0] - 0.779).abs() < 1e-3 && (g[3] - 0.082).abs() < 1e-3);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ScenarioConfig::from_toml_str("steps = 10\nsolver = \"richardson\"\n").unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.solver, SolverKind::Richardson);
        assert_eq!(cfg.n_agents, 10);
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        assert!(matches!(
            ScenarioConfig::from_toml_str("stepz = 3"),
            Err(Error::Config(_))
        ));
        assert!(ScenarioConfig::from_toml_str("n_anchors = 11").is_err());
        assert!(ScenarioConfig::from_toml_str("alpha = 1.0").is_err());
        assert!(ScenarioConfig::from_toml_str("gamma = 0.5\ngamma_diag = [0.5, 0.5, 0.5, 0.5]").is_err());
        assert!(ScenarioConfig::from_toml_str("solver = \"newton\"").is_err());
    }

    #[test]
    fn inverse_weight_reading() {
        let cfg = ScenarioConfig::from_toml_str(
            "local_weight = 5.0\nrelative_weight = 0.5\nr_as_inverse = true",
        )
        .unwrap();
        assert_eq!(cfg.weights(), (0.2, 2.0));
    }

    #[test]
    fn missing_file_names_path() {
        let err = ScenarioConfig::load(Path::new("/nonexistent/cfg.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.toml"));
    }
}
