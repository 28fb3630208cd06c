//! Steady-state analysis of the partial-diffusion filter.
//!
//! With converged covariances the stacked network error evolves as
//!
//! ```text
//! X̃_i = ℬ_i·𝓕·X̃_{i−1} + ℬ_i·(𝓖·(𝟙 ⊗ n_{i−1}) − 𝓓·v_i)
//! ```
//!
//! where `𝓕 = (I − 𝓚𝓗)(I_N ⊗ F)`, `𝓖 = (I − 𝓚𝓗)(I_N ⊗ G)`, `𝓓 = 𝓚` and
//! `𝓚 = diag(K_k)` collects the steady-state gains. Averaging over the
//! selection patterns gives a linear recursion for the error covariance
//! whose fixed point yields the per-node and network MSD.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filters::covariance_update;
use crate::linalg::{block_diag, kron, positive_map_spectral_radius, spectral_radius, symmetrize, vec_of};
use crate::network::{CombinationWeights, Topology};
use crate::selection::{Partition, Scheme, SelectionMask};
use crate::statespace::{SensorModel, StateSpaceModel};

/// Largest `M·N` for which the variance relation is solved by dense
/// factorization of the `(MN)²` system; larger networks use the series.
pub const DIRECT_SOLVE_MAX_DIM: usize = 64;

const SERIES_TOL: f64 = 1e-15;
const SERIES_MAX_ITER: usize = 1_000_000;
const RADIUS_TOL: f64 = 1e-12;
const RADIUS_MAX_RESTARTS: usize = 200;

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// Limit of `P_{k,i|i−1}`.
    pub p_pred: DMatrix<f64>,
    /// Limit of `P_{k,i|i}`.
    pub p_filt: DMatrix<f64>,
    pub iterations: usize,
    pub last_delta: f64,
}

/// Iterate the covariance recursion from `Π₀` until successive predicted
/// covariances differ by less than `tol` in Frobenius norm.
///
/// Each iteration applies one measurement update per sensor in `sensors`
/// (one sensor for own-data adaptation, the whole neighborhood for the
/// diffusion KF) followed by the time update.
pub fn solve_riccati(
    model: &StateSpaceModel,
    sensors: &[&SensorModel],
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("Riccati tolerance must be positive, got {tol}")));
    }
    if let Some(s) = sensors.iter().find(|s| s.state_dim() != model.dim()) {
        return Err(Error::dimension("Riccati sensor H columns", model.dim(), s.state_dim()));
    }
    let measurement = |p_pred: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let mut p = p_pred.clone();
        for s in sensors {
            p = covariance_update(&p, s)
                .ok_or_else(|| Error::Numeric("singular innovation covariance in Riccati recursion".into()))?
                .1;
        }
        Ok(p)
    };
    let f = model.f();
    let mut p_pred = model.pi0().clone();
    let mut delta = f64::INFINITY;
    for iter in 1..=max_iter {
        let p_filt = measurement(&p_pred)?;
        let mut next = f * &p_filt * f.transpose() + model.process_covariance();
        symmetrize(&mut next);
        delta = (&next - &p_pred).norm();
        p_pred = next;
        if !delta.is_finite() {
            break;
        }
        if delta < tol {
            let p_filt = measurement(&p_pred)?;
            return Ok(RiccatiSolution {
                p_pred,
                p_filt,
                iterations: iter,
                last_delta: delta,
            });
        }
    }
    Err(Error::RiccatiNonConvergence {
        node: None,
        iterations: max_iter,
        last_delta: delta,
    })
}

/// Steady-state matrices of the partial-diffusion error recursion, built
/// from each node's own-data Riccati limit.
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub p_pred: Vec<DMatrix<f64>>,
    pub p_filt: Vec<DMatrix<f64>>,
    /// `K_k = P_k⁻·H_kᵀ·R_{e,k}⁻¹`.
    pub gains: Vec<DMatrix<f64>>,
    /// `S_k = H_kᵀ·R_{e,k}⁻¹·H_k`.
    pub s: Vec<DMatrix<f64>>,
    pub pcal: DMatrix<f64>,
    pub pcal_pred: DMatrix<f64>,
    pub scal: DMatrix<f64>,
    pub fcal: DMatrix<f64>,
    pub gcal: DMatrix<f64>,
    pub dcal: DMatrix<f64>,
    /// Block-diagonal measurement-noise covariance.
    pub rcal: DMatrix<f64>,
    state_dim: usize,
}

impl SteadyState {
    pub fn own_data(model: &StateSpaceModel, sensors: &[SensorModel], tol: f64, max_iter: usize) -> Result<Self> {
        let solutions = sensors
            .iter()
            .enumerate()
            .map(|(k, s)| {
                solve_riccati(model, &[s], tol, max_iter).map_err(|e| match e {
                    Error::RiccatiNonConvergence {
                        iterations, last_delta, ..
                    } => Error::RiccatiNonConvergence {
                        node: Some(k),
                        iterations,
                        last_delta,
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_solutions(model, sensors, solutions)
    }

    pub fn from_solutions(
        model: &StateSpaceModel,
        sensors: &[SensorModel],
        solutions: Vec<RiccatiSolution>,
    ) -> Result<Self> {
        if solutions.len() != sensors.len() || sensors.is_empty() {
            return Err(Error::dimension("Riccati solutions", sensors.len(), solutions.len()));
        }
        let m = model.dim();
        let n = sensors.len();
        let mut gains = Vec::with_capacity(n);
        let mut s_blocks = Vec::with_capacity(n);
        for (sensor, sol) in sensors.iter().zip(&solutions) {
            let h = sensor.h();
            let re = sensor.r() + h * &sol.p_pred * h.transpose();
            let chol = re
                .cholesky()
                .ok_or_else(|| Error::Numeric("singular steady-state innovation covariance".into()))?;
            let re_inv_h = chol.solve(h);
            gains.push(&sol.p_pred * re_inv_h.transpose());
            s_blocks.push(h.transpose() * re_inv_h);
        }
        let p_pred: Vec<_> = solutions.iter().map(|s| s.p_pred.clone()).collect();
        let p_filt: Vec<_> = solutions.iter().map(|s| s.p_filt.clone()).collect();
        let pcal = block_diag(&p_filt);
        let pcal_pred = block_diag(&p_pred);
        let scal = block_diag(&s_blocks);
        // I − 𝓚𝓗, written through the prior: P_k⁻·S_k = K_k·H_k.
        let contraction = DMatrix::identity(m * n, m * n) - &pcal_pred * &scal;
        let eye_n = DMatrix::identity(n, n);
        let fcal = &contraction * kron(&eye_n, model.f());
        let gcal = &contraction * kron(&eye_n, model.g());
        let dcal = block_diag(&gains);
        let rcal = block_diag(&sensors.iter().map(|s| s.r().clone()).collect::<Vec<_>>());
        Ok(Self {
            p_pred,
            p_filt,
            gains,
            s: s_blocks,
            pcal,
            pcal_pred,
            scal,
            fcal,
            gcal,
            dcal,
            rcal,
            state_dim: m,
        })
    }

    pub fn node_count(&self) -> usize {
        self.p_pred.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// `𝒦 = 𝓓·R·𝓓ᵀ`.
    pub fn measurement_term(&self) -> DMatrix<f64> {
        &self.dcal * &self.rcal * self.dcal.transpose()
    }

    /// `ℒ = 𝓖·(𝟙𝟙ᵀ ⊗ Q)·𝓖ᵀ`: every node sees the same process noise.
    pub fn process_term(&self, model: &StateSpaceModel) -> DMatrix<f64> {
        let n = self.node_count();
        let ones = DMatrix::from_element(n, n, 1.0);
        &self.gcal * kron(&ones, model.q()) * self.gcal.transpose()
    }
}

/// Network combination matrix `ℬ` for arbitrary per-node masks:
/// diagonal blocks `I − Σ_{l∈𝒩_p\{p}} c_lp·T_l`, off-diagonal blocks
/// `c_qp·T_q` for `q ∈ 𝒩_p\{p}`.
pub fn combination_matrix(topology: &Topology, weights: &CombinationWeights, masks: &[SelectionMask]) -> DMatrix<f64> {
    let n = topology.node_count();
    let m = masks[0].bits().len();
    let mut b = DMatrix::identity(m * n, m * n);
    for p in 0..n {
        for q in topology.neighbors(p) {
            let c = weights.get(q, p);
            for (j, &sel) in masks[q].bits().iter().enumerate() {
                if sel {
                    b[(p * m + j, q * m + j)] += c;
                    b[(p * m + j, p * m + j)] -= c;
                }
            }
        }
    }
    b
}

/// One `ℬ(τ)` per subset of the partition, all nodes sharing subset `τ`.
/// `L = 0` yields the single pattern `I_MN`.
pub fn build_b_patterns(topology: &Topology, weights: &CombinationWeights, partition: &Partition) -> Vec<DMatrix<f64>> {
    let n = topology.node_count();
    (0..partition.omega())
        .map(|tau| combination_matrix(topology, weights, &vec![partition.mask(tau); n]))
        .collect()
}

/// `𝔅 = E[ℬᵀ ⊗ ℬᵀ]` over the selection patterns.
///
/// Acting on `vec(X)` it is `vec(E[ℬᵀ·X·ℬ])`, which is how it is applied
/// when the dense `(MN)²` form is not materialized.
#[derive(Debug, Clone)]
pub struct BfrakOperator {
    patterns: Vec<DMatrix<f64>>,
    dense: Option<DMatrix<f64>>,
    scheme: Scheme,
}

impl BfrakOperator {
    pub fn patterns(&self) -> &[DMatrix<f64>] {
        &self.patterns
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Dense `(MN)² × (MN)²` matrix, present when `MN ≤ DIRECT_SOLVE_MAX_DIM`.
    pub fn dense(&self) -> Option<&DMatrix<f64>> {
        self.dense.as_ref()
    }

    pub fn block_dim(&self) -> usize {
        self.patterns[0].nrows()
    }

    /// `E[ℬᵀ·X·ℬ]`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for b in &self.patterns {
            out += b.transpose() * x * b;
        }
        out / self.patterns.len() as f64
    }

    /// `E[ℬ·X·ℬᵀ]`, the adjoint action.
    pub fn apply_adjoint(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for b in &self.patterns {
            out += b * x * b.transpose();
        }
        out / self.patterns.len() as f64
    }
}

/// Average of `ℬ(τ)ᵀ ⊗ ℬ(τ)ᵀ` over the patterns.
///
/// The sequential scheme cycles deterministically through all `Ω̄`
/// patterns and the stochastic scheme draws them uniformly, so both share
/// the same average.
pub fn expected_b_kron(patterns: Vec<DMatrix<f64>>, scheme: Scheme) -> Result<BfrakOperator> {
    let Some(first) = patterns.first() else {
        return Err(Error::Config("at least one combination pattern is required".into()));
    };
    let dim = first.nrows();
    if patterns.iter().any(|b| b.shape() != (dim, dim)) {
        return Err(Error::Config("combination patterns differ in shape".into()));
    }
    let dense = (dim <= DIRECT_SOLVE_MAX_DIM).then(|| {
        let mut acc = DMatrix::zeros(dim * dim, dim * dim);
        for b in &patterns {
            let bt = b.transpose();
            acc += kron(&bt, &bt);
        }
        acc / patterns.len() as f64
    });
    Ok(BfrakOperator {
        patterns,
        dense,
        scheme,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveRoute {
    /// Dense factorization of `I − (𝓕ᵀ⊗𝓕ᵀ)𝔅`.
    Direct,
    /// Fixed-point iteration of the covariance recursion.
    Series,
}

#[derive(Debug, Clone)]
pub struct MsdTheory {
    /// `𝒦 = 𝓓·R·𝓓ᵀ`.
    pub k_mat: DMatrix<f64>,
    /// `ℒ = 𝓖·(𝟙𝟙ᵀ ⊗ Q)·𝓖ᵀ`.
    pub l_mat: DMatrix<f64>,
    pub msd_network: f64,
    pub msd_per_node: Vec<f64>,
    /// Spectral radius of `𝔅(𝓕ᵀ ⊗ 𝓕ᵀ)`.
    pub spectral_radius: f64,
    pub route: SolveRoute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub rho_f: f64,
    pub rho_loop: f64,
    pub stable: bool,
}

/// Spectral radius of the mean-square loop operator `X ↦ 𝓕ᵀ·E[ℬᵀ·X·ℬ]·𝓕`.
pub fn loop_spectral_radius(steady: &SteadyState, bfrak: &BfrakOperator) -> f64 {
    let f = &steady.fcal;
    let ft = f.transpose();
    positive_map_spectral_radius(f.nrows(), |x| &ft * bfrak.apply(x) * f, RADIUS_TOL, RADIUS_MAX_RESTARTS)
}

pub fn stability_report(model: &StateSpaceModel, steady: &SteadyState, bfrak: &BfrakOperator) -> StabilityReport {
    let rho_f = spectral_radius(model.f());
    let rho_loop = loop_spectral_radius(steady, bfrak);
    StabilityReport {
        rho_f,
        rho_loop,
        stable: rho_f < 1.0 && rho_loop < 1.0,
    }
}

/// Steady-state MSD per node and averaged over the network, choosing the
/// dense route when `MN ≤ DIRECT_SOLVE_MAX_DIM`.
pub fn theoretical_network_msd(
    steady: &SteadyState,
    bfrak: &BfrakOperator,
    model: &StateSpaceModel,
) -> Result<MsdTheory> {
    let route = if bfrak.dense().is_some() {
        SolveRoute::Direct
    } else {
        SolveRoute::Series
    };
    theoretical_network_msd_via(steady, bfrak, model, route)
}

pub fn theoretical_network_msd_via(
    steady: &SteadyState,
    bfrak: &BfrakOperator,
    model: &StateSpaceModel,
    route: SolveRoute,
) -> Result<MsdTheory> {
    let mn = steady.fcal.nrows();
    if bfrak.block_dim() != mn {
        return Err(Error::dimension("combination pattern size", mn, bfrak.block_dim()));
    }
    let rho = loop_spectral_radius(steady, bfrak);
    if !(rho < 1.0) {
        return Err(Error::Unstable { rho });
    }
    let k_mat = steady.measurement_term();
    let l_mat = steady.process_term(model);
    let noise = &k_mat + &l_mat;
    let n = steady.node_count();
    let m = steady.state_dim();

    let msd_per_node = match route {
        SolveRoute::Direct => direct_msd(steady, bfrak, &noise, n, m)?,
        SolveRoute::Series => series_msd(steady, bfrak, &noise, n, m)?,
    };
    let msd_network = msd_per_node.iter().sum::<f64>() / n as f64;
    Ok(MsdTheory {
        k_mat,
        l_mat,
        msd_network,
        msd_per_node,
        spectral_radius: rho,
        route,
    })
}

/// `MSD_k = vecᵀ(𝒦+ℒ)·𝔅·(I − (𝓕ᵀ⊗𝓕ᵀ)𝔅)⁻¹·vec(E_k)` where `E_k` selects
/// node `k`'s diagonal block; the network value is their mean.
fn direct_msd(
    steady: &SteadyState,
    bfrak: &BfrakOperator,
    noise: &DMatrix<f64>,
    n: usize,
    m: usize,
) -> Result<Vec<f64>> {
    let mn = n * m;
    let dim = mn * mn;
    // (𝓕ᵀ⊗𝓕ᵀ)(ℬᵀ⊗ℬᵀ) = (ℬ𝓕)ᵀ ⊗ (ℬ𝓕)ᵀ, averaged over patterns.
    let mut system = DMatrix::<f64>::identity(dim, dim);
    let weight = 1.0 / bfrak.patterns().len() as f64;
    for b in bfrak.patterns() {
        let bf_t = (b * &steady.fcal).transpose();
        system -= kron(&bf_t, &bf_t) * weight;
    }
    let mut rhs = DMatrix::<f64>::zeros(dim, n);
    for k in 0..n {
        let mut selector = DMatrix::<f64>::zeros(mn, mn);
        for j in 0..m {
            selector[(k * m + j, k * m + j)] = 1.0;
        }
        rhs.set_column(k, &vec_of(&selector));
    }
    let z = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("variance relation is singular".into()))?;
    // vecᵀ(W)·𝔅 = (𝔅ᵀ·vec W)ᵀ = vecᵀ(E[ℬ·W·ℬᵀ]).
    let weighted: DVector<f64> = match bfrak.dense() {
        Some(bd) => bd.tr_mul(&vec_of(noise)),
        None => vec_of(&bfrak.apply_adjoint(noise)),
    };
    Ok((0..n).map(|k| weighted.dot(&z.column(k))).collect())
}

/// Iterate `C ← E[ℬ·(𝓕·C·𝓕ᵀ + 𝒦 + ℒ)·ℬᵀ]` to its fixed point and read
/// each node's MSD off the trace of its diagonal block.
fn series_msd(
    steady: &SteadyState,
    bfrak: &BfrakOperator,
    noise: &DMatrix<f64>,
    n: usize,
    m: usize,
) -> Result<Vec<f64>> {
    let f = &steady.fcal;
    let ft = f.transpose();
    let mut c = bfrak.apply_adjoint(noise);
    let mut converged = false;
    for _ in 0..SERIES_MAX_ITER {
        let next = bfrak.apply_adjoint(&(f * &c * &ft + noise));
        let delta = (&next - &c).norm();
        c = next;
        if delta <= SERIES_TOL * c.norm().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric("covariance series did not converge".into()));
    }
    Ok((0..n)
        .map(|k| (0..m).map(|j| c[(k * m + j, k * m + j)]).sum())
        .collect())
}
