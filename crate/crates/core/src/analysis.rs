//! Dense diagnostics for the stability analysis: frozen ADMM operators,
//! equilibrium geometry, contraction, Lyapunov decay, the small-gain
//! certificate and the matrix-forgetting sufficient conditions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{
    block_diag, max_principal_angle_sin, null_space, pseudo_inverse, spd_function, spectral_norm,
    sym_eig_range,
};
use crate::observer::InfoSource;
use crate::solvers::LocalProblem;
use crate::topology::DualLayout;

/// Relative singular-value cutoff for pseudoinverses and kernels.
pub const RANK_TOL: f64 = 1e-10;

/// Dense `A_q = blkdiag(A_qi)`, mapping stacked extended vectors to dual slots.
pub fn dense_aq(layout: &DualLayout) -> DMatrix<f64> {
    let blocks: Vec<DMatrix<f64>> = (0..layout.n_agents())
        .map(|i| {
            let n = layout.extended_len(i);
            let mut a = DMatrix::zeros(layout.agent_range(i).len(), n);
            for c in 0..n {
                let mut e = DVector::zeros(n);
                e[c] = 1.0;
                a.set_column(c, &layout.aq_apply(i, &e));
            }
            a
        })
        .collect();
    block_diag(&blocks)
}

/// Dense permutation `P` with `(P q)` exchanging paired slots.
pub fn dense_pairing(layout: &DualLayout) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(layout.len(), layout.len());
    for (s, t) in layout.scalar_pairing().into_iter().enumerate() {
        p[(t, s)] = 1.0;
    }
    p
}

/// Basis of `ker(I + P) ∩ ker(A_qᵀ)`.
pub fn structural_kernel(layout: &DualLayout) -> DMatrix<f64> {
    let n = layout.len();
    let p = dense_pairing(layout);
    let aq = dense_aq(layout);
    let mut stacked = DMatrix::zeros(n + aq.ncols(), n);
    stacked
        .view_mut((0, 0), (n, n))
        .copy_from(&(DMatrix::identity(n, n) + p));
    stacked
        .view_mut((n, 0), (aq.ncols(), n))
        .copy_from(&aq.transpose());
    null_space(&stacked, RANK_TOL)
}

/// Inner ADMM dynamics of one observer step with `(S, b)` frozen:
/// `q_{h+1} = T q_h + α c` with `T = I − αF`.
///
/// `f` and `c` are the iteration form `I + P − 2ρ P A_q H⁻¹ A_qᵀ` and
/// `2ρ P A_q H⁻¹ b̄`; [`Self::equilibrium_form`] returns `(P F, P c)`,
/// which defines the same equilibrium set.
#[derive(Debug, Clone)]
pub struct FrozenAdmmOperator {
    pub f: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub c: DVector<f64>,
    pub f_pinv: DMatrix<f64>,
    pub rank: usize,
    /// Smallest nonzero singular value of `F`.
    pub sigma_min_plus: f64,
    pub pairing: DMatrix<f64>,
    pub rho: f64,
    pub alpha: f64,
}

impl FrozenAdmmOperator {
    pub fn build<I: InfoSource + ?Sized>(
        src: &I,
        layout: &DualLayout,
        rho: f64,
        alpha: f64,
    ) -> Result<Self> {
        let topo = src.topology();
        check_len("dual layout agents", topo.n_agents(), layout.n_agents())?;
        let problems = (0..topo.n_agents())
            .map(|i| LocalProblem::assemble(src, i, rho))
            .collect::<Result<Vec<_>>>()?;
        Self::from_problems(&problems, layout, rho, alpha)
    }

    pub fn from_problems(
        problems: &[LocalProblem],
        layout: &DualLayout,
        rho: f64,
        alpha: f64,
    ) -> Result<Self> {
        let hinv = block_diag(&problems.iter().map(|p| p.hessian_inverse()).collect::<Vec<_>>());
        let b_bar = DVector::from_iterator(
            hinv.nrows(),
            problems.iter().flat_map(|p| p.b_bar.iter().copied()),
        );
        let aq = dense_aq(layout);
        check_len("stacked extended length", aq.ncols(), hinv.nrows())?;
        let p = dense_pairing(layout);
        let n = layout.len();
        let pa = &p * &aq * (2.0 * rho);
        let f = DMatrix::identity(n, n) + &p - &pa * &hinv * aq.transpose();
        let c = &pa * &hinv * b_bar;
        let t = DMatrix::identity(n, n) - &f * alpha;
        let (f_pinv, rank, sigma_min_plus) = pseudo_inverse(&f, RANK_TOL);
        Ok(Self {
            f,
            t,
            c,
            f_pinv,
            rank,
            sigma_min_plus,
            pairing: p,
            rho,
            alpha,
        })
    }

    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    /// `(P F, P c)`.
    pub fn equilibrium_form(&self) -> (DMatrix<f64>, DVector<f64>) {
        (&self.pairing * &self.f, &self.pairing * &self.c)
    }

    pub fn iterate(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.t * q + &self.c * self.alpha
    }

    pub fn kernel(&self) -> DMatrix<f64> {
        null_space(&self.f, RANK_TOL)
    }

    /// `q_eq = q − F†(F q − c)` and `‖q_eq − q‖`.
    pub fn equilibrium_projection(&self, q: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        check_len("dual vector", self.dim(), q.len())?;
        let q_eq = q - &self.f_pinv * (&self.f * q - &self.c);
        let resid = (&self.f * &q_eq - &self.c).norm();
        let scale = 1.0 + self.c.norm() + spectral_norm(&self.f) * q_eq.norm();
        if resid > 1e-9 * scale {
            return Err(Error::InternalInvariantViolation(format!(
                "equilibrium system inconsistent (residual {resid:e})"
            )));
        }
        let dist = (&q_eq - q).norm();
        Ok((q_eq, dist))
    }

    pub fn distance(&self, q: &DVector<f64>) -> Result<f64> {
        Ok(self.equilibrium_projection(q)?.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub steps: usize,
    pub structural_dim: usize,
    pub kernel_dims: Vec<usize>,
    /// Largest principal-angle sine between any `ker(F_k)` and the structural kernel.
    pub max_angle_sin: f64,
    pub min_sigma_plus: f64,
    pub max_pinv_norm: f64,
    pub invariant: bool,
}

pub fn verify_kernel_invariance(ops: &[FrozenAdmmOperator], layout: &DualLayout) -> Result<KernelReport> {
    if ops.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "kernel invariance needs at least 2 operators, got {}",
            ops.len()
        )));
    }
    let structural = structural_kernel(layout);
    let mut rep = KernelReport {
        steps: ops.len(),
        structural_dim: structural.ncols(),
        kernel_dims: Vec::with_capacity(ops.len()),
        max_angle_sin: 0.0,
        min_sigma_plus: f64::INFINITY,
        max_pinv_norm: 0.0,
        invariant: true,
    };
    for op in ops {
        check_len("operator dimension", layout.len(), op.dim())?;
        let ker = op.kernel();
        rep.kernel_dims.push(ker.ncols());
        rep.max_angle_sin = rep.max_angle_sin.max(max_principal_angle_sin(&structural, &ker));
        rep.min_sigma_plus = rep.min_sigma_plus.min(op.sigma_min_plus);
        rep.max_pinv_norm = rep.max_pinv_norm.max(spectral_norm(&op.f_pinv));
    }
    rep.invariant = rep.max_angle_sin < 1e-8;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub mu_hat: f64,
    pub distances: Vec<f64>,
    pub monotone: bool,
}

/// Iterates the frozen operator from `q0` and reports the worst one-step
/// ratio of distances to the equilibrium set.
pub fn measure_contraction(
    op: &FrozenAdmmOperator,
    q0: &DVector<f64>,
    n_iters: usize,
) -> Result<ContractionReport> {
    let (q_eq, d0) = op.equilibrium_projection(q0)?;
    let unique = op.rank == op.dim();
    let mut q = q0.clone();
    let mut distances = vec![d0];
    for _ in 0..n_iters {
        q = op.iterate(&q);
        let d = if unique {
            (&q - &q_eq).norm()
        } else {
            op.distance(&q)?
        };
        distances.push(d);
    }
    let mut mu_hat: f64 = 0.0;
    let mut monotone = true;
    for w in distances.windows(2) {
        if w[0] < 1e-12 {
            continue;
        }
        mu_hat = mu_hat.max(w[1] / w[0]);
        if w[1] > w[0] * (1.0 + 1e-9) + 1e-15 {
            monotone = false;
        }
    }
    Ok(ContractionReport {
        mu_hat,
        distances,
        monotone,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub gamma: f64,
    pub max_ratio: f64,
    pub worst_k: Option<usize>,
    /// Largest violation `V_{k+1} − γ V_k` (negative when the decay holds).
    pub max_excess: f64,
    pub holds: bool,
}

/// Checks `V_{k+1} ≤ γ V_k + tol` along a trace, starting from `k_start`.
pub fn lyapunov_decay_check(v: &[f64], gamma: f64, k_start: usize, tol: f64) -> LyapunovReport {
    let mut rep = LyapunovReport {
        gamma,
        max_ratio: 0.0,
        worst_k: None,
        max_excess: f64::NEG_INFINITY,
        holds: true,
    };
    for k in k_start..v.len().saturating_sub(1) {
        let excess = v[k + 1] - gamma * v[k];
        if excess > rep.max_excess {
            rep.max_excess = excess;
        }
        if excess > tol {
            rep.holds = false;
        }
        if v[k] > 1e-300 {
            let r = v[k + 1] / v[k];
            if r > rep.max_ratio {
                rep.max_ratio = r;
                rep.worst_k = Some(k);
            }
        }
    }
    if !rep.max_excess.is_finite() {
        rep.max_excess = 0.0;
    }
    rep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    pub k_start: usize,
    pub k_end: usize,
    pub slope: f64,
    pub intercept: f64,
    /// `λ = e^slope`.
    pub rate: f64,
    pub max_residual: f64,
}

/// Least-squares line through `log(series_k)` over `k ∈ [k_start, k_end]`.
pub fn fit_log_envelope(series: &[f64], k_start: usize, k_end: usize) -> Result<EnvelopeFit> {
    let end = k_end.min(series.len().saturating_sub(1));
    let pts: Vec<(f64, f64)> = (k_start..=end)
        .filter(|&k| series[k] > 0.0 && series[k].is_finite())
        .map(|k| (k as f64, series[k].ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::InsufficientData("envelope fit needs two positive samples".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let max_residual = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).abs())
        .fold(0.0, f64::max);
    Ok(EnvelopeFit {
        k_start,
        k_end: end,
        slope,
        intercept,
        rate: slope.exp(),
        max_residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub gamma: f64,
    pub epsilon: f64,
    pub mu: f64,
    pub h_iters: usize,
    pub c12: f64,
    pub c21: f64,
    pub c22: f64,
    pub comparison: [[f64; 2]; 2],
    pub spectral_radius: f64,
    pub schur: bool,
    /// Right-hand side of the small-gain bound on `ε` with the fitted constants.
    pub epsilon_bound: f64,
    pub envelope: Option<EnvelopeFit>,
}

fn spectral_radius_2x2(a: &[[f64; 2]; 2]) -> f64 {
    let tr = a[0][0] + a[1][1];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (tr / 2.0 + s).abs().max((tr / 2.0 - s).abs())
    } else {
        det.abs().sqrt()
    }
}

/// Fits the gains of the coupled recursions
/// `w_{k+1} ≤ √γ w_k + ε c12 d_k` and `d_{k+1} ≤ c21 w_k + (μ^H + ε c22) d_k`
/// to a trace and evaluates the comparison matrix.
pub fn small_gain_certificate(
    w: &[f64],
    d: &[f64],
    epsilon: f64,
    gamma: f64,
    mu: f64,
    h_iters: usize,
) -> Result<StabilityCertificate> {
    check_len("dual distance trace", w.len(), d.len())?;
    if w.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "certificate needs at least 10 steps, got {}",
            w.len()
        )));
    }
    let sg = gamma.sqrt();
    let mu_h = mu.powi(h_iters as i32);
    const TINY: f64 = 1e-300;
    let rel = |x: f64| 1e-12 * (1.0 + x.abs());

    let mut c12: f64 = 0.0;
    for k in 0..w.len() - 1 {
        let excess = w[k + 1] - sg * w[k];
        if excess <= rel(w[k]) {
            continue;
        }
        if d[k] > TINY {
            c12 = c12.max(excess / (epsilon * d[k]));
        } else {
            c12 = f64::INFINITY;
        }
    }

    // For a given c21 the smallest admissible c22, or ∞ if infeasible.
    let c22_for = |c21: f64| -> f64 {
        let mut c22: f64 = 0.0;
        for k in 0..d.len() - 1 {
            let excess = d[k + 1] - c21 * w[k] - mu_h * d[k];
            if excess <= rel(d[k + 1]) {
                continue;
            }
            if d[k] > TINY {
                c22 = c22.max(excess / (epsilon * d[k]));
            } else {
                return f64::INFINITY;
            }
        }
        c22
    };
    let comparison = |c21: f64, c22: f64| [[sg, epsilon * c12], [c21, mu_h + epsilon * c22]];

    let c21_max = (0..d.len() - 1)
        .filter(|&k| w[k] > TINY)
        .map(|k| (d[k + 1] - mu_h * d[k]).max(0.0) / w[k])
        .fold(0.0, f64::max);
    let mut candidates = vec![0.0, c21_max];
    if c21_max > 0.0 {
        for s in 0..=200 {
            candidates.push(c21_max * 10f64.powf(-8.0 + 8.0 * s as f64 / 200.0));
        }
    }
    let mut best = (f64::INFINITY, 0.0, f64::INFINITY);
    for c21 in candidates {
        let c22 = c22_for(c21);
        if !c22.is_finite() {
            continue;
        }
        let r = spectral_radius_2x2(&comparison(c21, c22));
        if r < best.0 {
            best = (r, c21, c22);
        }
    }
    let (spectral_radius, c21, c22) = best;
    let a = comparison(c21, c22);
    let denom = c12 * c21 + (1.0 - sg) * c22;
    let epsilon_bound = if denom > 0.0 {
        (1.0 - sg) * (1.0 - mu_h) / denom
    } else {
        f64::INFINITY
    };
    let total: Vec<f64> = w.iter().zip(d).map(|(a, b)| a + b).collect();
    let envelope = fit_log_envelope(&total, 0, total.len() - 1).ok();
    Ok(StabilityCertificate {
        gamma,
        epsilon,
        mu,
        h_iters,
        c12,
        c21,
        c22,
        comparison: a,
        spectral_radius,
        schur: spectral_radius < 1.0,
        epsilon_bound,
        envelope,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixBReport {
    /// Per-step `‖S^{1/2} Γ S^{-1/2}‖²`.
    pub congruence: Vec<f64>,
    /// Per-step `‖Γ‖² κ(S)`.
    pub condition: Vec<f64>,
    /// Per-step `‖Γ‖² s̄/s̲` with run-level eigenvalue bounds.
    pub uniform: Vec<f64>,
    pub max_congruence: f64,
    pub max_condition: f64,
    pub max_uniform: f64,
    pub ordered: bool,
    pub s_min: f64,
    pub s_max: f64,
}

/// Evaluates the three sufficient conditions for matrix forgetting on a
/// trace of posterior information matrices.
pub fn matrix_ff_conditions(s_trace: &[DMatrix<f64>], gamma: &DMatrix<f64>) -> Result<AppendixBReport> {
    let g2 = spectral_norm(gamma).powi(2);
    let mut eig = Vec::with_capacity(s_trace.len());
    for (k, s) in s_trace.iter().enumerate() {
        check_len("forgetting matrix", s.nrows(), gamma.nrows())?;
        let (lo, hi) = sym_eig_range(s);
        if !(lo > 0.0) {
            return Err(Error::NotSpd(format!("posterior information at step {k}")));
        }
        eig.push((lo, hi));
    }
    let s_min = eig.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
    let s_max = eig.iter().map(|e| e.1).fold(0.0, f64::max);
    let mut rep = AppendixBReport {
        congruence: Vec::with_capacity(s_trace.len()),
        condition: Vec::with_capacity(s_trace.len()),
        uniform: Vec::with_capacity(s_trace.len()),
        max_congruence: 0.0,
        max_condition: 0.0,
        max_uniform: 0.0,
        ordered: true,
        s_min,
        s_max,
    };
    for (k, s) in s_trace.iter().enumerate() {
        let half = spd_function(s, f64::sqrt).map_err(|_| Error::NotSpd(format!("step {k}")))?;
        let inv_half =
            spd_function(s, |l| 1.0 / l.sqrt()).map_err(|_| Error::NotSpd(format!("step {k}")))?;
        let c1 = spectral_norm(&(half * gamma * inv_half)).powi(2);
        let c2 = g2 * eig[k].1 / eig[k].0;
        let c3 = g2 * s_max / s_min;
        let slack = 1e-9 * (1.0 + c3);
        if c1 > c2 + slack || c2 > c3 + slack {
            rep.ordered = false;
        }
        rep.max_congruence = rep.max_congruence.max(c1);
        rep.max_condition = rep.max_condition.max(c2);
        rep.max_uniform = rep.max_uniform.max(c3);
        rep.congruence.push(c1);
        rep.condition.push(c2);
        rep.uniform.push(c3);
    }
    Ok(rep)
}

/// Quantities recorded at one step for the error-dynamics identity
/// `x̃_{k+1} = A_k S_{k|k}⁻¹ S_{k|k-1} x̃_k + ε A_k ξ̃_k`.
#[derive(Debug, Clone)]
pub struct ErrorDynamicsSample {
    pub x_err: DVector<f64>,
    pub x_err_next: DVector<f64>,
    pub dynamics: DMatrix<f64>,
    pub s_post: DMatrix<f64>,
    pub s_prior: DMatrix<f64>,
    pub xi_err: DVector<f64>,
    pub epsilon: f64,
    /// Smallest error norm used to scale the residual. Errors are
    /// differences of full states, so their round-off floor is set by the
    /// state magnitude, not by the error itself.
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDynamicsReport {
    pub steps: usize,
    pub max_relative_residual: f64,
    pub holds: bool,
}

pub fn error_dynamics_check(samples: &[ErrorDynamicsSample], tol: f64) -> Result<ErrorDynamicsReport> {
    let mut worst: f64 = 0.0;
    for (k, s) in samples.iter().enumerate() {
        let chol = s
            .s_post
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd(format!("posterior information at step {k}")))?;
        let phi_x = &s.dynamics * chol.solve(&(&s.s_prior * &s.x_err));
        let rhs = phi_x + &s.dynamics * &s.xi_err * s.epsilon;
        let scale = s.x_err_next.norm().max(s.x_err.norm()).max(s.floor);
        worst = worst.max((&s.x_err_next - rhs).norm() / scale);
    }
    Ok(ErrorDynamicsReport {
        steps: samples.len(),
        max_relative_residual: worst,
        holds: worst <= tol,
    })
}
