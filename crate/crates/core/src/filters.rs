//! Per-node Kalman recursions and one synchronized network step of the
//! diffusion (DKF) and partial-diffusion (PDKF) filters.
//!
//! A step runs in three phases for every node: the local update producing
//! the intermediate estimate ψ_k, the combination of neighbor estimates into
//! x̂_{k,i|i}, and the time update. All ψ values are produced before any
//! combination reads them.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::network::{CombinationWeights, Topology};
use crate::selection::{SelectionMask, SelectionSchedule};
use crate::statespace::{SensorModel, StateSpaceModel};

/// Covariance half of a measurement update: the gain
/// `K = P·Hᵀ·R_e⁻¹` and the posterior `P − K·H·P` (symmetrized).
/// `None` when `R_e = R + H·P·Hᵀ` is not positive definite.
pub(crate) fn covariance_update(p: &DMatrix<f64>, sensor: &SensorModel) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let h = sensor.h();
    let hp = h * p;
    let re = sensor.r() + &hp * h.transpose();
    let chol = re.cholesky()?;
    // R_e⁻¹·H·P; its transpose is the gain because P is symmetric.
    let re_inv_hp = chol.solve(&hp);
    let gain = re_inv_hp.transpose();
    let mut post = p - hp.transpose() * re_inv_hp;
    symmetrize(&mut post);
    Some((gain, post))
}

fn singular_innovation() -> Error {
    Error::Numeric("innovation covariance R + H·P·Hᵀ is not positive definite".into())
}

/// `psi += K·(y − H·psi)` without temporaries beyond the innovation.
fn apply_gain(psi: &mut DVector<f64>, gain: &DMatrix<f64>, y: &DVector<f64>, h: &DMatrix<f64>) {
    let mut innovation = y.clone();
    innovation.gemv(-1.0, h, psi, 1.0);
    psi.gemv(1.0, gain, &innovation, 1.0);
}

/// One Kalman measurement update of `(psi, P)` with observation `y`.
pub fn measurement_update(
    psi: &DVector<f64>,
    p: &DMatrix<f64>,
    y: &DVector<f64>,
    sensor: &SensorModel,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_update_dims(psi, p, y, sensor)?;
    let (gain, post) = covariance_update(p, sensor).ok_or_else(singular_innovation)?;
    let mut out = psi.clone();
    apply_gain(&mut out, &gain, y, sensor.h());
    Ok((out, post))
}

fn check_update_dims(psi: &DVector<f64>, p: &DMatrix<f64>, y: &DVector<f64>, sensor: &SensorModel) -> Result<()> {
    let m = sensor.state_dim();
    if psi.len() != m {
        return Err(Error::dimension("measurement update estimate", m, psi.len()));
    }
    if p.shape() != (m, m) {
        return Err(Error::dimension(
            "measurement update covariance",
            format!("{m}x{m}"),
            format!("{}x{}", p.nrows(), p.ncols()),
        ));
    }
    if y.len() != sensor.obs_dim() {
        return Err(Error::dimension(
            "measurement update observation",
            sensor.obs_dim(),
            y.len(),
        ));
    }
    Ok(())
}

/// Incremental update over a neighborhood: `measurement_update` applied for
/// each `(y_ℓ, sensor_ℓ)` in the order given, starting from the prediction.
pub fn dkf_incremental(
    x_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    data: &[(&DVector<f64>, &SensorModel)],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mut psi = x_pred.clone();
    let mut p = p_pred.clone();
    for (y, sensor) in data {
        (psi, p) = measurement_update(&psi, &p, y, sensor)?;
    }
    Ok((psi, p))
}

/// Adaptation phase of the partial-diffusion filter: only the node's own
/// data enters the update.
pub fn pdkf_adaptation(
    x_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    y: &DVector<f64>,
    sensor: &SensorModel,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    measurement_update(x_pred, p_pred, y, sensor)
}

/// `x̂ = Σ_{l∈𝒩_k} c_lk·ψ_l`.
pub fn combine_dkf(k: usize, psis: &[DVector<f64>], weights: &CombinationWeights, topology: &Topology) -> DVector<f64> {
    let mut out = DVector::zeros(psis[k].len());
    for l in topology.neighborhood(k) {
        out.axpy(weights.get(l, k), &psis[l], 1.0);
    }
    out
}

/// `x̂ = ψ_k + Σ_{l∈𝒩_k\{k}} c_lk·T_l·(ψ_l − ψ_k)`, where `masks[l]` is the
/// selection node `l` used at this iteration. Entries node `l` did not
/// transmit fall back to node `k`'s own values.
pub fn combine_pdkf(
    k: usize,
    psis: &[DVector<f64>],
    masks: &[SelectionMask],
    weights: &CombinationWeights,
    topology: &Topology,
) -> Result<DVector<f64>> {
    let m = psis[k].len();
    if masks.len() != psis.len() {
        return Err(Error::dimension("combination masks", psis.len(), masks.len()));
    }
    if let Some(bad) = masks.iter().find(|t| t.bits().len() != m) {
        return Err(Error::dimension("selection mask length", m, bad.bits().len()));
    }
    let mut out = psis[k].clone();
    for l in topology.neighbors(k) {
        accumulate_partial(&mut out, &psis[k], &psis[l], weights.get(l, k), &masks[l]);
    }
    Ok(out)
}

fn accumulate_partial(
    out: &mut DVector<f64>,
    own: &DVector<f64>,
    other: &DVector<f64>,
    weight: f64,
    mask: &SelectionMask,
) {
    for (j, &selected) in mask.bits().iter().enumerate() {
        if selected {
            out[j] += weight * (other[j] - own[j]);
        }
    }
}

/// `x_pred = F·x_filt`, `P_pred = F·P_filt·Fᵀ + G·Q·Gᵀ`.
pub fn time_update(
    x_filt: &DVector<f64>,
    p_filt: &DMatrix<f64>,
    model: &StateSpaceModel,
) -> (DVector<f64>, DMatrix<f64>) {
    (model.f() * x_filt, predict_covariance(p_filt, model))
}

fn predict_covariance(p_filt: &DMatrix<f64>, model: &StateSpaceModel) -> DMatrix<f64> {
    let f = model.f();
    let mut p = f * p_filt * f.transpose() + model.process_covariance();
    symmetrize(&mut p);
    p
}

/// Which data the local update uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Adaptation {
    /// Own observation only (partial diffusion / non-cooperative).
    OwnData,
    /// Every neighbor's observation, ascending node index (diffusion KF).
    Neighborhood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Combination {
    None,
    /// Full convex combination of all neighbor estimates.
    Convex,
    /// Masked combination driven by the selection schedule.
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FilterVariant {
    pub adaptation: Adaptation,
    pub combination: Combination,
}

impl FilterVariant {
    pub const DKF: Self = Self {
        adaptation: Adaptation::Neighborhood,
        combination: Combination::Convex,
    };
    pub const PDKF: Self = Self {
        adaptation: Adaptation::OwnData,
        combination: Combination::Partial,
    };
    pub const NONCOOPERATIVE: Self = Self {
        adaptation: Adaptation::OwnData,
        combination: Combination::None,
    };
    /// Own-data adaptation followed by the full convex combination.
    pub const OWN_DATA_CONVEX: Self = Self {
        adaptation: Adaptation::OwnData,
        combination: Combination::Convex,
    };
}

/// Nodes whose observations node `k` processes, in processing order.
fn update_sources(topology: &Topology, adaptation: Adaptation, k: usize) -> Vec<usize> {
    match adaptation {
        Adaptation::OwnData => vec![k],
        Adaptation::Neighborhood => topology.neighborhood(k).collect(),
    }
}

/// Gains of the covariance recursion, recorded once and replayed.
///
/// The covariance recursion never looks at observations, so every
/// Monte-Carlo run of a configuration sees the same gain sequence.
#[derive(Debug, Clone)]
pub struct GainTrack {
    adaptation: Adaptation,
    nodes: usize,
    /// `gains[i][k][j]`: gain of node `k`'s `j`-th update at iteration `i`.
    gains: Vec<Vec<Vec<DMatrix<f64>>>>,
}

impl GainTrack {
    pub fn record(
        model: &StateSpaceModel,
        sensors: &[SensorModel],
        topology: &Topology,
        adaptation: Adaptation,
        iterations: usize,
    ) -> Result<Self> {
        let n = topology.node_count();
        check_network_dims(model, sensors, topology)?;
        let sources: Vec<Vec<usize>> = (0..n).map(|k| update_sources(topology, adaptation, k)).collect();
        let mut p_pred = vec![model.pi0().clone(); n];
        let mut gains = Vec::with_capacity(iterations);
        for i in 0..iterations {
            let mut step = Vec::with_capacity(n);
            for k in 0..n {
                let mut p = p_pred[k].clone();
                let mut node_gains = Vec::with_capacity(sources[k].len());
                for &l in &sources[k] {
                    let (gain, post) = covariance_update(&p, &sensors[l])
                        .ok_or(Error::SingularInnovation { node: k, iteration: i })?;
                    node_gains.push(gain);
                    p = post;
                }
                p_pred[k] = predict_covariance(&p, model);
                step.push(node_gains);
            }
            gains.push(step);
        }
        Ok(Self {
            adaptation,
            nodes: n,
            gains,
        })
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn adaptation(&self) -> Adaptation {
        self.adaptation
    }

    pub fn gains(&self, i: usize, k: usize) -> &[DMatrix<f64>] {
        &self.gains[i][k]
    }
}

fn check_network_dims(model: &StateSpaceModel, sensors: &[SensorModel], topology: &Topology) -> Result<()> {
    if sensors.len() != topology.node_count() {
        return Err(Error::dimension("sensor count", topology.node_count(), sensors.len()));
    }
    if let Some(s) = sensors.iter().find(|s| s.state_dim() != model.dim()) {
        return Err(Error::dimension("sensor H columns", model.dim(), s.state_dim()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFilterState {
    pub x_pred: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    pub psi: DVector<f64>,
    pub p_filt: DMatrix<f64>,
    pub x_filt: DVector<f64>,
}

impl NodeFilterState {
    /// `x̂_{k,0|−1} = 0`, `P_{k,0|−1} = Π₀`.
    pub fn initial(model: &StateSpaceModel) -> Self {
        let m = model.dim();
        Self {
            x_pred: DVector::zeros(m),
            p_pred: model.pi0().clone(),
            psi: DVector::zeros(m),
            p_filt: model.pi0().clone(),
            x_filt: DVector::zeros(m),
        }
    }
}

/// All nodes of a network advancing in lockstep.
///
/// In replay mode (see [`with_gain_track`](Self::with_gain_track)) gains come
/// from a recorded [`GainTrack`] and the per-node covariance fields are left
/// at their initial values.
#[derive(Debug, Clone)]
pub struct NetworkFilter<'a> {
    model: &'a StateSpaceModel,
    sensors: &'a [SensorModel],
    topology: &'a Topology,
    weights: &'a CombinationWeights,
    schedule: SelectionSchedule,
    variant: FilterVariant,
    track: Option<&'a GainTrack>,
    sources: Vec<Vec<usize>>,
    nodes: Vec<NodeFilterState>,
    masks: Vec<SelectionMask>,
    iteration: usize,
}

impl<'a> NetworkFilter<'a> {
    pub fn new(
        model: &'a StateSpaceModel,
        sensors: &'a [SensorModel],
        topology: &'a Topology,
        weights: &'a CombinationWeights,
        schedule: SelectionSchedule,
        variant: FilterVariant,
    ) -> Result<Self> {
        check_network_dims(model, sensors, topology)?;
        if let Err(v) = weights.validate(topology) {
            return Err(Error::Config(format!("invalid combination weights: {v}")));
        }
        if schedule.partition.state_dim() != model.dim() {
            return Err(Error::dimension(
                "selection partition",
                model.dim(),
                schedule.partition.state_dim(),
            ));
        }
        let n = topology.node_count();
        let sources = (0..n)
            .map(|k| update_sources(topology, variant.adaptation, k))
            .collect();
        Ok(Self {
            model,
            sensors,
            topology,
            weights,
            schedule,
            variant,
            track: None,
            sources,
            nodes: vec![NodeFilterState::initial(model); n],
            masks: vec![SelectionMask::all(model.dim(), false); n],
            iteration: 0,
        })
    }

    /// Replay gains from `track` instead of running the covariance
    /// recursion. The track must use this filter's adaptation rule.
    pub fn with_gain_track(mut self, track: &'a GainTrack) -> Result<Self> {
        if track.adaptation != self.variant.adaptation || track.nodes != self.nodes.len() {
            return Err(Error::Config(
                "gain track was recorded for a different adaptation rule or network".into(),
            ));
        }
        self.track = Some(track);
        Ok(self)
    }

    pub fn nodes(&self) -> &[NodeFilterState] {
        &self.nodes
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn variant(&self) -> FilterVariant {
        self.variant
    }

    pub fn schedule(&self) -> &SelectionSchedule {
        &self.schedule
    }

    /// Scalars transmitted per iteration for estimate exchange:
    /// `L·Σ_k |𝒩_k\{k}|` under partial diffusion, `M·Σ_k |𝒩_k\{k}|` for the
    /// full combination.
    pub fn scalars_per_iteration(&self) -> usize {
        let links = self.topology.directed_link_count();
        match self.variant.combination {
            Combination::None => 0,
            Combination::Convex => self.model.dim() * links,
            Combination::Partial => self.schedule.partition.shared_entries() * links,
        }
    }

    /// Advance every node by one iteration using `observations[k] = y_{k,i}`.
    pub fn step(&mut self, observations: &[DVector<f64>]) -> Result<()> {
        let n = self.nodes.len();
        let i = self.iteration;
        if observations.len() != n {
            return Err(Error::dimension("observations per step", n, observations.len()));
        }
        for (k, y) in observations.iter().enumerate() {
            if y.len() != self.sensors[k].obs_dim() {
                return Err(Error::dimension(
                    "observation length",
                    self.sensors[k].obs_dim(),
                    y.len(),
                ));
            }
        }
        if let Some(track) = self.track {
            if i >= track.len() {
                return Err(Error::Config(format!(
                    "gain track holds {} iterations, step {i} requested",
                    track.len()
                )));
            }
        }

        // Step 1: local update.
        for k in 0..n {
            let node = &mut self.nodes[k];
            node.psi.copy_from(&node.x_pred);
            match self.track {
                Some(track) => {
                    for (gain, &l) in track.gains(i, k).iter().zip(&self.sources[k]) {
                        apply_gain(&mut node.psi, gain, &observations[l], self.sensors[l].h());
                    }
                }
                None => {
                    let mut p = node.p_pred.clone();
                    for &l in &self.sources[k] {
                        let sensor = &self.sensors[l];
                        let (gain, post) =
                            covariance_update(&p, sensor).ok_or(Error::SingularInnovation { node: k, iteration: i })?;
                        apply_gain(&mut node.psi, &gain, &observations[l], sensor.h());
                        p = post;
                    }
                    node.p_filt = p;
                }
            }
        }

        // Step 2: combination, reading the ψ snapshot.
        match self.variant.combination {
            Combination::None => {
                for node in &mut self.nodes {
                    node.x_filt.copy_from(&node.psi);
                }
            }
            Combination::Convex => {
                for k in 0..n {
                    let mut acc = DVector::zeros(self.model.dim());
                    for l in self.topology.neighborhood(k) {
                        acc.axpy(self.weights.get(l, k), &self.nodes[l].psi, 1.0);
                    }
                    self.nodes[k].x_filt = acc;
                }
            }
            Combination::Partial => {
                if self.schedule.shared_across_nodes {
                    let mask = self.schedule.mask_at(0, i);
                    self.masks.iter_mut().for_each(|t| t.clone_from(&mask));
                } else {
                    for (l, t) in self.masks.iter_mut().enumerate() {
                        *t = self.schedule.mask_at(l, i);
                    }
                }
                for k in 0..n {
                    let mut acc = self.nodes[k].psi.clone();
                    for l in self.topology.neighbors(k) {
                        accumulate_partial(
                            &mut acc,
                            &self.nodes[k].psi,
                            &self.nodes[l].psi,
                            self.weights.get(l, k),
                            &self.masks[l],
                        );
                    }
                    self.nodes[k].x_filt = acc;
                }
            }
        }

        // Time update.
        let f = self.model.f();
        for node in &mut self.nodes {
            node.x_pred.gemv(1.0, f, &node.x_filt, 0.0);
            if self.track.is_none() {
                node.p_pred = predict_covariance(&node.p_filt, self.model);
            }
        }
        self.iteration += 1;
        Ok(())
    }

    /// `x_i − x̂_{k,i|i}` for every node, after the most recent step.
    pub fn errors(&self, truth: &DVector<f64>) -> Vec<DVector<f64>> {
        self.nodes.iter().map(|n| truth - &n.x_filt).collect()
    }

    /// `‖x_i − x̂_{k,i|i}‖²` for every node.
    pub fn squared_errors(&self, truth: &DVector<f64>) -> Vec<f64> {
        self.nodes
            .iter()
            .map(|n| truth.iter().zip(n.x_filt.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigenvalues;
    use crate::selection::{Partition, Scheme};
    use crate::statespace::sample_trajectory;
    use proptest::prelude::*;

    fn scalar_sensor(h: f64, r: f64) -> SensorModel {
        SensorModel::new(DMatrix::from_element(1, 1, h), DMatrix::from_element(1, 1, r)).unwrap()
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn sec4_sensor(kind: usize, var: f64) -> SensorModel {
        let h = if kind == 0 {
            DMatrix::from_row_slice(3, 4, &[0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0.])
        } else {
            DMatrix::from_row_slice(3, 4, &[0., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 1.])
        };
        SensorModel::new(h, DMatrix::identity(3, 3) * var).unwrap()
    }

    #[test]
    fn uninformative_measurement_changes_nothing() {
        let s = SensorModel::new(DMatrix::zeros(2, 3), DMatrix::identity(2, 2)).unwrap();
        let psi = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let p = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 3.0]);
        let (psi2, p2) = measurement_update(&psi, &p, &DVector::from_vec(vec![5.0, 5.0]), &s).unwrap();
        assert_eq!(psi2, psi);
        assert!((p2 - p).amax() < 1e-15);
    }

    #[test]
    fn scalar_measurement_update_by_hand() {
        // R_e = 1 + 1 = 2, gain 1/2, ψ' = 0 + 0.5·2 = 1, P' = 1 − 0.5 = 0.5.
        let (psi, p) = measurement_update(
            &DVector::from_element(1, 0.0),
            &scalar(1.0),
            &DVector::from_element(1, 2.0),
            &scalar_sensor(1.0, 1.0),
        )
        .unwrap();
        assert!((psi[0] - 1.0).abs() < 1e-15);
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
        let (psi_a, p_a) = pdkf_adaptation(
            &DVector::from_element(1, 0.0),
            &scalar(1.0),
            &DVector::from_element(1, 2.0),
            &scalar_sensor(1.0, 1.0),
        )
        .unwrap();
        assert_eq!((psi_a, p_a), (psi, p));
    }

    #[test]
    fn singular_innovation_is_reported() {
        let s = SensorModel::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)).unwrap();
        let err = measurement_update(&DVector::zeros(1), &scalar(1.0), &DVector::zeros(1), &s).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = measurement_update(
            &DVector::zeros(2),
            &scalar(1.0),
            &DVector::zeros(1),
            &scalar_sensor(1.0, 1.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn covariance_update_ignores_observation() {
        let s = sec4_sensor(0, 0.3);
        let p = DMatrix::identity(4, 4);
        let x = DVector::from_element(4, 0.5);
        let (_, a) = pdkf_adaptation(&x, &p, &DVector::from_element(3, 1.0), &s).unwrap();
        let (_, b) = pdkf_adaptation(&x, &p, &DVector::from_element(3, -7.0), &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn incremental_with_self_only_is_single_update() {
        let s = sec4_sensor(1, 0.2);
        let y = DVector::from_vec(vec![1.0, 0.0, -1.0]);
        let x = DVector::from_element(4, 0.1);
        let p = DMatrix::identity(4, 4) * 2.0;
        let a = dkf_incremental(&x, &p, &[(&y, &s)]).unwrap();
        let b = measurement_update(&x, &p, &y, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn incremental_with_uninformative_neighbors() {
        let s = SensorModel::new(DMatrix::zeros(1, 2), DMatrix::identity(1, 1)).unwrap();
        let y = DVector::from_element(1, 3.0);
        let x = DVector::from_vec(vec![0.4, -0.2]);
        let (psi, _) = dkf_incremental(&x, &DMatrix::identity(2, 2), &[(&y, &s), (&y, &s)]).unwrap();
        assert_eq!(psi, x);
    }

    #[test]
    fn incremental_equals_batch_update() {
        // Sequential processing of independent measurements equals one
        // update with stacked H and block-diagonal R.
        let h1 = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, 1.0, -0.3]);
        let h2 = DMatrix::from_row_slice(1, 3, &[0.2, 0.0, 1.0]);
        let r1 = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
        let r2 = DMatrix::from_element(1, 1, 0.3);
        let s1 = SensorModel::new(h1.clone(), r1.clone()).unwrap();
        let s2 = SensorModel::new(h2.clone(), r2.clone()).unwrap();
        let y1 = DVector::from_vec(vec![0.7, -1.2]);
        let y2 = DVector::from_vec(vec![2.0]);
        let x = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let p = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
        let (psi_seq, p_seq) = dkf_incremental(&x, &p, &[(&y1, &s1), (&y2, &s2)]).unwrap();

        let mut h = DMatrix::zeros(3, 3);
        h.view_mut((0, 0), (2, 3)).copy_from(&h1);
        h.view_mut((2, 0), (1, 3)).copy_from(&h2);
        let r = crate::linalg::block_diag(&[r1, r2]);
        let y = DVector::from_vec(vec![0.7, -1.2, 2.0]);
        // Textbook batch update with an explicit inverse.
        let re = &r + &h * &p * h.transpose();
        let k = &p * h.transpose() * re.try_inverse().unwrap();
        let psi_batch = &x + &k * (&y - &h * &x);
        let p_batch = &p - &k * &h * &p;

        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        for j in 0..3 {
            assert!(rel(psi_seq[j], psi_batch[j]) < 1e-10);
            for c in 0..3 {
                assert!((p_seq[(j, c)] - p_batch[(j, c)]).abs() < 1e-10 * p_batch.amax());
            }
        }
    }

    #[test]
    fn scalar_time_update_by_hand() {
        let model = StateSpaceModel::new(scalar(0.5), scalar(1.0), scalar(1.0), scalar(1.0)).unwrap();
        let (x, p) = time_update(&DVector::from_element(1, 2.0), &scalar(1.0), &model);
        assert_eq!(x[0], 1.0);
        assert!((p[(0, 0)] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn identity_time_update() {
        let model = StateSpaceModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let x = DVector::from_vec(vec![1.0, -1.0]);
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(time_update(&x, &p, &model), (x.clone(), p.clone()));
    }

    #[test]
    fn combine_dkf_cases() {
        let single = Topology::isolated(1);
        let w1 = CombinationWeights::uniform(&single);
        let psi = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(combine_dkf(0, std::slice::from_ref(&psi), &w1, &single), psi);

        let t = Topology::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let w = CombinationWeights::uniform(&t);
        let same = vec![psi.clone(); 3];
        assert!((combine_dkf(1, &same, &w, &t) - &psi).amax() < 1e-15);

        let two = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let w2 = CombinationWeights::uniform(&two);
        let psis = vec![DVector::from_vec(vec![0.0, 4.0]), DVector::from_vec(vec![2.0, 0.0])];
        assert_eq!(combine_dkf(0, &psis, &w2, &two).as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn combine_pdkf_limits() {
        let t = Topology::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let w = CombinationWeights::uniform(&t);
        let psis: Vec<_> = (0..3).map(|k| DVector::from_fn(4, |j, _| (k * 4 + j) as f64)).collect();
        let none = vec![SelectionMask::all(4, false); 3];
        assert_eq!(combine_pdkf(1, &psis, &none, &w, &t).unwrap(), psis[1]);
        let all = vec![SelectionMask::all(4, true); 3];
        let full = combine_pdkf(1, &psis, &all, &w, &t).unwrap();
        assert!((full - combine_dkf(1, &psis, &w, &t)).amax() < 1e-12);
    }

    #[test]
    fn combine_pdkf_rejects_bad_masks() {
        let t = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let w = CombinationWeights::uniform(&t);
        let psis = vec![DVector::zeros(3), DVector::zeros(3)];
        assert!(combine_pdkf(0, &psis, &[SelectionMask::all(3, true)], &w, &t).is_err());
        let short = vec![SelectionMask::all(2, true); 2];
        assert!(combine_pdkf(0, &psis, &short, &w, &t).is_err());
    }

    fn sec4_network() -> (StateSpaceModel, Vec<SensorModel>, Topology, CombinationWeights) {
        let model = StateSpaceModel::paper_sec4().with_scaled_dynamics(0.95);
        let topology = Topology::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let sensors = vec![
            sec4_sensor(0, 0.1),
            sec4_sensor(1, 0.3),
            sec4_sensor(0, 0.2),
            sec4_sensor(1, 0.05),
        ];
        let weights = CombinationWeights::uniform(&topology);
        (model, sensors, topology, weights)
    }

    #[test]
    fn noncooperative_matches_isolated_kalman_filter() {
        let (model, sensors, topology, weights) = sec4_network();
        let traj = sample_trajectory(&model, &sensors, 60, 3, None).unwrap();
        let schedule = SelectionSchedule::new(Scheme::Sequential, Partition::contiguous(4, 2).unwrap(), 0);
        let mut net = NetworkFilter::new(
            &model,
            &sensors,
            &topology,
            &weights,
            schedule,
            FilterVariant::NONCOOPERATIVE,
        )
        .unwrap();
        // Isolated-KF oracle per node.
        let mut iso: Vec<_> = (0..4).map(|_| (DVector::zeros(4), model.pi0().clone())).collect();
        for i in 0..60 {
            net.step(&traj.observations[i]).unwrap();
            for k in 0..4 {
                let (x, p) = &iso[k];
                let (psi, pf) = measurement_update(x, p, traj.observation(k, i), &sensors[k]).unwrap();
                assert_eq!(net.nodes()[k].x_filt, psi);
                iso[k] = time_update(&psi, &pf, &model);
            }
        }
    }

    #[test]
    fn replayed_gains_reproduce_live_run() {
        let (model, sensors, topology, weights) = sec4_network();
        let traj = sample_trajectory(&model, &sensors, 40, 8, None).unwrap();
        for variant in [FilterVariant::PDKF, FilterVariant::DKF] {
            let track = GainTrack::record(&model, &sensors, &topology, variant.adaptation, 40).unwrap();
            let schedule = SelectionSchedule::new(Scheme::Stochastic, Partition::contiguous(4, 1).unwrap(), 12);
            let mut live =
                NetworkFilter::new(&model, &sensors, &topology, &weights, schedule.clone(), variant).unwrap();
            let mut replay = NetworkFilter::new(&model, &sensors, &topology, &weights, schedule, variant)
                .unwrap()
                .with_gain_track(&track)
                .unwrap();
            for i in 0..40 {
                live.step(&traj.observations[i]).unwrap();
                replay.step(&traj.observations[i]).unwrap();
                for k in 0..4 {
                    assert_eq!(live.nodes()[k].x_filt, replay.nodes()[k].x_filt);
                }
            }
            assert!(replay.step(&traj.observations[40]).is_err());
        }
    }

    #[test]
    fn gain_track_rejects_mismatched_variant() {
        let (model, sensors, topology, weights) = sec4_network();
        let track = GainTrack::record(&model, &sensors, &topology, Adaptation::Neighborhood, 5).unwrap();
        let schedule = SelectionSchedule::new(Scheme::Sequential, Partition::contiguous(4, 4).unwrap(), 0);
        let net = NetworkFilter::new(&model, &sensors, &topology, &weights, schedule, FilterVariant::PDKF).unwrap();
        assert!(net.with_gain_track(&track).is_err());
    }

    #[test]
    fn covariances_contract_and_ignore_data() {
        let (model, sensors, topology, weights) = sec4_network();
        let schedule = SelectionSchedule::new(Scheme::Sequential, Partition::contiguous(4, 2).unwrap(), 0);
        let run = |seed| {
            let traj = sample_trajectory(&model, &sensors, 30, seed, None).unwrap();
            let mut net = NetworkFilter::new(
                &model,
                &sensors,
                &topology,
                &weights,
                schedule.clone(),
                FilterVariant::DKF,
            )
            .unwrap();
            let mut ps = Vec::new();
            for i in 0..30 {
                let before: Vec<_> = net.nodes().iter().map(|n| n.p_pred.clone()).collect();
                net.step(&traj.observations[i]).unwrap();
                for (k, node) in net.nodes().iter().enumerate() {
                    // P_{i|i} ≼ P_{i|i-1}
                    let diff = &before[k] - &node.p_filt;
                    assert!(symmetric_eigenvalues(&diff)[0] > -1e-12);
                    ps.push(node.p_filt.clone());
                }
            }
            ps
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn full_partial_diffusion_collapses_to_convex_combination() {
        let (model, sensors, topology, weights) = sec4_network();
        let traj = sample_trajectory(&model, &sensors, 50, 4, None).unwrap();
        let schedule = SelectionSchedule::new(Scheme::Stochastic, Partition::contiguous(4, 4).unwrap(), 2);
        let mut partial = NetworkFilter::new(
            &model,
            &sensors,
            &topology,
            &weights,
            schedule.clone(),
            FilterVariant::PDKF,
        )
        .unwrap();
        let mut convex = NetworkFilter::new(
            &model,
            &sensors,
            &topology,
            &weights,
            schedule,
            FilterVariant::OWN_DATA_CONVEX,
        )
        .unwrap();
        for i in 0..50 {
            partial.step(&traj.observations[i]).unwrap();
            convex.step(&traj.observations[i]).unwrap();
            for k in 0..4 {
                let a = &partial.nodes()[k].x_filt;
                let b = &convex.nodes()[k].x_filt;
                assert!((a - b).norm() <= 1e-10 * b.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn message_counts() {
        let (model, sensors, topology, weights) = sec4_network();
        let links = topology.directed_link_count();
        assert_eq!(links, 8);
        for (l, expected) in [(0, 0), (1, 8), (2, 16), (4, 32)] {
            let schedule = SelectionSchedule::new(Scheme::Sequential, Partition::contiguous(4, l).unwrap(), 0);
            let net = NetworkFilter::new(&model, &sensors, &topology, &weights, schedule, FilterVariant::PDKF).unwrap();
            assert_eq!(net.scalars_per_iteration(), expected);
        }
    }

    #[test]
    fn step_rejects_wrong_observation_count() {
        let (model, sensors, topology, weights) = sec4_network();
        let schedule = SelectionSchedule::new(Scheme::Sequential, Partition::contiguous(4, 2).unwrap(), 0);
        let mut net = NetworkFilter::new(&model, &sensors, &topology, &weights, schedule, FilterVariant::PDKF).unwrap();
        assert!(net.step(&[DVector::zeros(3)]).is_err());
        assert_eq!(net.iteration(), 0);
    }

    #[test]
    fn singular_innovation_names_node_and_iteration() {
        let model = StateSpaceModel::paper_sec4();
        let mut sensors = vec![sec4_sensor(0, 0.1), sec4_sensor(1, 0.1)];
        sensors[1] = SensorModel::new(sensors[1].h().clone(), DMatrix::zeros(3, 3)).unwrap();
        let topology = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let weights = CombinationWeights::uniform(&topology);
        let schedule = SelectionSchedule::new(Scheme::Sequential, Partition::contiguous(4, 4).unwrap(), 0);
        let mut net = NetworkFilter::new(&model, &sensors, &topology, &weights, schedule, FilterVariant::PDKF).unwrap();
        let err = net.step(&[DVector::zeros(3), DVector::zeros(3)]).unwrap_err();
        assert!(
            matches!(err, Error::SingularInnovation { node: 1, iteration: 0 }),
            "{err}"
        );
    }

    proptest! {
        #[test]
        fn measurement_update_never_increases_covariance(
            entries in proptest::collection::vec(-1.0f64..1.0, 9),
            h_entries in proptest::collection::vec(-2.0f64..2.0, 6),
            r_diag in proptest::collection::vec(0.01f64..2.0, 2),
        ) {
            let a = DMatrix::from_row_slice(3, 3, &entries);
            let p = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
            let s = SensorModel::new(
                DMatrix::from_row_slice(2, 3, &h_entries),
                DMatrix::from_diagonal(&DVector::from_vec(r_diag)),
            ).unwrap();
            let (_, post) = measurement_update(&DVector::zeros(3), &p, &DVector::zeros(2), &s).unwrap();
            let diff = &p - &post;
            prop_assert!(symmetric_eigenvalues(&diff)[0] > -1e-10);
            prop_assert!(symmetric_eigenvalues(&post)[0] > -1e-10);
        }

        #[test]
        fn time_update_dominates_process_noise(entries in proptest::collection::vec(-1.0f64..1.0, 16)) {
            let model = StateSpaceModel::paper_sec4();
            let a = DMatrix::from_row_slice(4, 4, &entries);
            let p = &a * a.transpose();
            let (_, pred) = time_update(&DVector::zeros(4), &p, &model);
            let diff = pred - model.process_covariance();
            prop_assert!(symmetric_eigenvalues(&diff)[0] > -1e-12);
        }
    }
}
