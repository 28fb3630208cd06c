//! Linear state-space model, per-node sensors and trajectory generation.
//!
//! The state evolves as `x_{i+1} = F·x_i + G·n_i` and node `k` observes
//! `y_{k,i} = H_k·x_i + v_{k,i}`. All noises are zero-mean Gaussian; their
//! covariance square roots are factored once at construction.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, psd_factor, symmetric_eigenvalues};

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    f: DMatrix<f64>,
    g: DMatrix<f64>,
    q: DMatrix<f64>,
    pi0: DMatrix<f64>,
    /// `G·Q^{1/2}`, so that `G·n = noise_factor·z` with `z` standard normal.
    noise_factor: DMatrix<f64>,
    pi0_factor: DMatrix<f64>,
    process_cov: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn new(f: DMatrix<f64>, g: DMatrix<f64>, q: DMatrix<f64>, pi0: DMatrix<f64>) -> Result<Self> {
        let m = f.nrows();
        if m == 0 {
            return Err(Error::dimension("state dimension", "M >= 1", 0));
        }
        for (name, mat) in [("F", &f), ("G", &g), ("Q", &q), ("Pi0", &pi0)] {
            if mat.shape() != (m, m) {
                return Err(Error::dimension(
                    name_context(name),
                    format!("{m}x{m}"),
                    format!("{}x{}", mat.nrows(), mat.ncols()),
                ));
            }
        }
        check_symmetric_psd("Q", &q, false)?;
        check_symmetric_psd("Pi0", &pi0, true)?;

        let noise_factor = &g * psd_factor(&q);
        let pi0_factor = psd_factor(&pi0);
        let process_cov = &g * &q * g.transpose();
        Ok(Self {
            f,
            g,
            q,
            pi0,
            noise_factor,
            pi0_factor,
            process_cov,
        })
    }

    /// The constant-velocity model used in the reference simulation, with
    /// `Π₀ = I`.
    pub fn paper_sec4() -> Self {
        #[rustfmt::skip]
        let f = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.0, 0.1, 0.0,
            0.0, 1.0, 0.0, 0.1,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ]);
        let g = DMatrix::identity(4, 4) * 0.625;
        let q = DMatrix::identity(4, 4) * 0.001;
        let pi0 = DMatrix::identity(4, 4);
        Self::new(f, g, q, pi0).expect("reference model is valid")
    }

    /// Same model with `F` replaced by `factor·F`.
    pub fn with_scaled_dynamics(&self, factor: f64) -> Self {
        Self {
            f: &self.f * factor,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn pi0(&self) -> &DMatrix<f64> {
        &self.pi0
    }

    /// `G·Q·Gᵀ`.
    pub fn process_covariance(&self) -> &DMatrix<f64> {
        &self.process_cov
    }

    /// One step of the state recursion. Always consumes exactly `M` normal
    /// draws, even when `Q = 0`.
    pub fn simulate_step<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dimension("simulate_step state", self.dim(), x.len()));
        }
        let z = standard_normal_vector(self.dim(), rng);
        Ok(&self.f * x + &self.noise_factor * z)
    }

    /// Draw `x_0 ~ N(0, Π₀)`.
    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        &self.pi0_factor * standard_normal_vector(self.dim(), rng)
    }
}

fn name_context(name: &str) -> &'static str {
    match name {
        "F" => "model matrix F",
        "G" => "model matrix G",
        "Q" => "model matrix Q",
        _ => "model matrix Pi0",
    }
}

fn check_symmetric_psd(name: &'static str, a: &DMatrix<f64>, strict: bool) -> Result<()> {
    if !is_symmetric(a, SYMMETRY_TOL) {
        return Err(Error::InvalidMatrix {
            name,
            reason: "not symmetric".into(),
        });
    }
    let min = symmetric_eigenvalues(a).first().copied().unwrap_or(0.0);
    let floor = -1e-12 * a.amax().max(1.0);
    if (strict && min <= 0.0) || (!strict && min < floor) {
        let kind = if strict {
            "positive definite"
        } else {
            "positive semidefinite"
        };
        return Err(Error::InvalidMatrix {
            name,
            reason: format!("not {kind} (smallest eigenvalue {min:e})"),
        });
    }
    Ok(())
}

fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Observation model of a single node.
#[derive(Debug, Clone)]
pub struct SensorModel {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    r_factor: DMatrix<f64>,
}

impl SensorModel {
    /// `R` must be symmetric PSD here; the filter additionally needs the
    /// innovation covariance `R + H·P·Hᵀ` to be invertible.
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let p = h.nrows();
        if p == 0 {
            return Err(Error::dimension("observation dimension", "P >= 1", 0));
        }
        if r.shape() != (p, p) {
            return Err(Error::dimension(
                "sensor matrix R",
                format!("{p}x{p}"),
                format!("{}x{}", r.nrows(), r.ncols()),
            ));
        }
        check_symmetric_psd("R", &r, false)?;
        let r_factor = psd_factor(&r);
        Ok(Self { h, r, r_factor })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    /// `H·x + v` with `v ~ N(0, R)`; consumes exactly `P` normal draws.
    pub fn observe<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::dimension("observe state", self.state_dim(), x.len()));
        }
        let v = &self.r_factor * standard_normal_vector(self.obs_dim(), rng);
        Ok(&self.h * x + v)
    }
}

/// Ground-truth states `x_0..x_T` and every node's observation of each.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    /// Time-major: `observations[i][k]` is `y_{k,i}`.
    pub observations: Vec<Vec<DVector<f64>>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn observation(&self, node: usize, i: usize) -> &DVector<f64> {
        &self.observations[i][node]
    }

    /// Number of recorded state transitions `T`.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Generate `steps + 1` states with observations at every node.
///
/// Draw order is fixed (initial state, then per time step every node's
/// measurement noise followed by the state noise), so the result is a pure
/// function of the inputs and `seed`. `x0` replaces the random initial
/// state when given.
pub fn sample_trajectory(
    model: &StateSpaceModel,
    sensors: &[SensorModel],
    steps: usize,
    seed: u64,
    x0: Option<&DVector<f64>>,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Config("trajectory needs at least one step".into()));
    }
    let m = model.dim();
    for s in sensors {
        if s.state_dim() != m {
            return Err(Error::dimension("sensor H columns", m, s.state_dim()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = model.sample_initial_state(&mut rng);
    if let Some(x0) = x0 {
        if x0.len() != m {
            return Err(Error::dimension("initial state override", m, x0.len()));
        }
        x = x0.clone();
    }

    let mut states = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let ys = sensors
            .iter()
            .map(|s| s.observe(&x, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        observations.push(ys);
        let next = if i < steps {
            Some(model.simulate_step(&x, &mut rng)?)
        } else {
            None
        };
        states.push(x);
        match next {
            Some(n) => x = n,
            None => break,
        }
    }
    Ok(Trajectory {
        states,
        observations,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(m: usize) -> StateSpaceModel {
        StateSpaceModel::new(
            DMatrix::identity(m, m),
            DMatrix::identity(m, m),
            DMatrix::zeros(m, m),
            DMatrix::identity(m, m),
        )
        .unwrap()
    }

    fn sec4_h_first() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 4, &[0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0.])
    }

    #[test]
    fn noiseless_identity_dynamics() {
        let model = identity_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(model.simulate_step(&x, &mut rng).unwrap(), x);
    }

    #[test]
    fn sec4_dynamics_without_noise() {
        let m = StateSpaceModel::paper_sec4();
        let model = StateSpaceModel::new(
            m.f().clone(),
            m.g().clone(),
            DMatrix::zeros(4, 4),
            DMatrix::identity(4, 4),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = model.simulate_step(&DVector::from_element(4, 1.0), &mut rng).unwrap();
        let expected = DVector::from_vec(vec![1.1, 1.1, 1.0, 1.0]);
        assert!((out - expected).amax() < 1e-15);
    }

    #[test]
    fn simulate_step_is_deterministic_per_seed() {
        let model = StateSpaceModel::paper_sec4();
        let x = DVector::from_element(4, 0.3);
        let a = model.simulate_step(&x, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = model.simulate_step(&x, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulate_step_rejects_wrong_length() {
        let model = StateSpaceModel::paper_sec4();
        let err = model
            .simulate_step(&DVector::zeros(3), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn noiseless_identity_sensor() {
        let s = SensorModel::new(DMatrix::identity(3, 3), DMatrix::zeros(3, 3)).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let y = s.observe(&x, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn sec4_sensor_selects_entries() {
        let s = SensorModel::new(sec4_h_first(), DMatrix::zeros(3, 3)).unwrap();
        let x = DVector::from_vec(vec![4.0, 5.0, 6.0, 7.0]);
        let y = s.observe(&x, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(y.as_slice(), &[5.0, 6.0, 0.0]);
    }

    #[test]
    fn measurement_noise_covariance_matches_r() {
        let r = DMatrix::from_row_slice(3, 3, &[0.4, 0.1, 0.0, 0.1, 0.3, -0.05, 0.0, -0.05, 0.2]);
        let s = SensorModel::new(DMatrix::zeros(3, 2), r.clone()).unwrap();
        let x = DVector::zeros(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        // Sample covariance oracle.
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let v = s.observe(&x, &mut rng).unwrap();
            acc += &v * v.transpose();
        }
        acc /= n as f64;
        let rel = (&acc - &r).norm() / r.norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn rejects_asymmetric_q_and_singular_pi0() {
        let m = DMatrix::identity(2, 2);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            StateSpaceModel::new(m.clone(), m.clone(), q, m.clone()),
            Err(Error::InvalidMatrix { name: "Q", .. })
        ));
        assert!(matches!(
            StateSpaceModel::new(m.clone(), m.clone(), m.clone(), DMatrix::zeros(2, 2)),
            Err(Error::InvalidMatrix { name: "Pi0", .. })
        ));
    }

    #[test]
    fn trajectory_with_known_initial_state() {
        let m = StateSpaceModel::paper_sec4();
        let model = StateSpaceModel::new(
            m.f().clone(),
            m.g().clone(),
            DMatrix::zeros(4, 4),
            DMatrix::identity(4, 4),
        )
        .unwrap();
        let sensors = vec![SensorModel::new(sec4_h_first(), DMatrix::zeros(3, 3)).unwrap()];
        let x0 = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let traj = sample_trajectory(&model, &sensors, 1, 9, Some(&x0)).unwrap();
        assert_eq!(traj.states.len(), 2);
        assert_eq!(traj.states[0], x0);
        assert_eq!(traj.states[1], model.f() * &x0);
        assert_eq!(
            traj.observation(0, 1).as_slice(),
            &[traj.states[1][1], traj.states[1][2], 0.0]
        );
    }

    #[test]
    fn trajectory_is_reproducible() {
        let model = StateSpaceModel::paper_sec4();
        let sensors = vec![
            SensorModel::new(sec4_h_first(), DMatrix::identity(3, 3) * 0.2).unwrap(),
            SensorModel::new(sec4_h_first(), DMatrix::identity(3, 3) * 0.1).unwrap(),
        ];
        let a = sample_trajectory(&model, &sensors, 50, 77, None).unwrap();
        let b = sample_trajectory(&model, &sensors, 50, 77, None).unwrap();
        let c = sample_trajectory(&model, &sensors, 50, 78, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn initial_state_is_zero_mean() {
        let pi0 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 0.25]));
        let model = StateSpaceModel::new(
            DMatrix::identity(3, 3),
            DMatrix::identity(3, 3),
            DMatrix::zeros(3, 3),
            pi0.clone(),
        )
        .unwrap();
        let runs = 10_000;
        let mut mean = DVector::<f64>::zeros(3);
        for seed in 0..runs {
            mean += model.sample_initial_state(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        mean /= runs as f64;
        for j in 0..3 {
            let bound = 4.0 * (pi0[(j, j)] / runs as f64).sqrt();
            assert!(mean[j].abs() < bound, "component {j}: {} >= {bound}", mean[j]);
        }
    }

    #[test]
    fn recorded_state_noise_is_white() {
        let model = StateSpaceModel::new(
            DMatrix::identity(1, 1) * 0.5,
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let sensors = vec![SensorModel::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap()];
        let t = 20_000;
        let traj = sample_trajectory(&model, &sensors, t, 5, None).unwrap();
        // Recover n_i = x_{i+1} - F x_i and v_i = y_i - x_i.
        let n: Vec<f64> = (0..t)
            .map(|i| traj.states[i + 1][0] - 0.5 * traj.states[i][0])
            .collect();
        let v: Vec<f64> = (0..t).map(|i| traj.observation(0, i)[0] - traj.states[i][0]).collect();
        let corr = |a: &[f64], b: &[f64]| {
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        let bound = 4.0 / (t as f64).sqrt();
        for lag in 1..4 {
            let r = corr(&n[lag..], &n[..t - lag]);
            assert!(r.abs() < bound, "lag {lag}: {r}");
        }
        let cross = corr(&n, &v);
        assert!(cross.abs() < bound, "cross {cross}");
    }
}
