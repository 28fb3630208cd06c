//! Monte-Carlo ensembles over a fixed network.
//!
//! Every run draws one trajectory and feeds the same observations to every
//! experiment arm, so differences between arms come from the algorithm
//! alone. Runs execute in parallel and are reduced in run order, which makes
//! the report independent of the thread count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{build_b_patterns, expected_b_kron, stability_report, theoretical_network_msd, SteadyState};
use crate::error::{Error, Result};
use crate::filters::{Adaptation, FilterVariant, GainTrack, NetworkFilter};
use crate::linalg::spectral_radius;
use crate::network::{CombinationWeights, Topology};
use crate::selection::{Partition, Scheme, SelectionSchedule};
use crate::statespace::{sample_trajectory, SensorModel, StateSpaceModel};

use super::config::{ExperimentConfig, PRESET_SEC4};
use super::report::{ArmReport, MsdReport, TheoryOutcome};

const SENSOR_ASSIGNMENT_ATTEMPTS: usize = 10_000;
const RUN_CHUNK: usize = 16;

/// Seed streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub topology: u64,
    pub sensors: u64,
    pub schedule: u64,
    pub runs: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Self {
            master,
            topology: derive_seed(master, 1),
            sensors: derive_seed(master, 2),
            schedule: derive_seed(master, 3),
            runs: derive_seed(master, 4),
        }
    }

    pub fn run(&self, r: usize) -> u64 {
        derive_seed(self.runs, r as u64)
    }
}

/// SplitMix64 finalizer applied to `seed + stream`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The two observation matrices of the reference setup. Both measure the
/// second coordinate; type 0 adds the third, type 1 the fourth. The last
/// row is zero.
pub fn reference_observation(kind: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(3, 4);
    h[(0, 1)] = 1.0;
    h[(1, if kind == 0 { 2 } else { 3 })] = 1.0;
    h
}

/// Per-node sensors of the reference setup.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensorAssignment {
    pub kinds: Vec<usize>,
    pub noise_variances: Vec<f64>,
}

impl SensorAssignment {
    pub fn sensors(&self) -> Vec<SensorModel> {
        self.kinds
            .iter()
            .zip(&self.noise_variances)
            .map(|(&kind, &var)| {
                SensorModel::new(reference_observation(kind), DMatrix::identity(3, 3) * var)
                    .expect("scaled identity is a valid covariance")
            })
            .collect()
    }
}

/// Draw an observation type per node until every neighborhood holds both
/// types, then a noise variance per node, uniform on `noise_variance`.
pub fn assign_sensors<R: Rng + ?Sized>(
    topology: &Topology,
    noise_variance: [f64; 2],
    rng: &mut R,
) -> Result<SensorAssignment> {
    let n = topology.node_count();
    if let Some(k) = (0..n).find(|&k| topology.degree(k) == 0) {
        return Err(Error::Config(format!(
            "node {k} has no neighbors, so its neighborhood cannot hold both sensor types"
        )));
    }
    let [lo, hi] = noise_variance;
    for _ in 0..SENSOR_ASSIGNMENT_ATTEMPTS {
        let kinds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let mixed = (0..n).all(|k| {
            let first = kinds[k];
            topology.neighborhood(k).any(|l| kinds[l] != first)
        });
        if mixed {
            let noise_variances = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
            return Ok(SensorAssignment { kinds, noise_variances });
        }
    }
    Err(Error::Config(format!(
        "no sensor assignment with both types in every neighborhood after {SENSOR_ASSIGNMENT_ATTEMPTS} draws"
    )))
}

/// One filter configuration compared in the experiment.
#[derive(Debug, Clone)]
pub struct Arm {
    /// `"sequential"`, `"stochastic"` or `"dkf"`.
    pub label: String,
    pub l: usize,
    pub variant: FilterVariant,
    pub schedule: SelectionSchedule,
}

/// Everything fixed across runs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub model: StateSpaceModel,
    pub topology: Topology,
    pub weights: CombinationWeights,
    pub sensors: Vec<SensorModel>,
    pub assignment: Option<SensorAssignment>,
    pub arms: Vec<Arm>,
    /// Replaces the random initial state of every run.
    pub initial_state: Option<DVector<f64>>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seeds = Seeds::from_master(config.seed);
        let model = config.build_model()?;
        let net = &config.network;
        let topology = match &net.edges {
            Some(edges) => {
                let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e[0], e[1])).collect();
                Topology::from_edges(net.nodes, &pairs)?
            }
            None => Topology::generate(net.nodes, net.avg_degree, net.require_connected, seeds.topology)?,
        };
        let weights = CombinationWeights::uniform(&topology);
        let (sensors, assignment) = if config.sensors.preset == PRESET_SEC4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds.sensors);
            let a = assign_sensors(&topology, config.sensors.noise_variance, &mut rng)?;
            (a.sensors(), Some(a))
        } else {
            (config.explicit_sensors(model.dim())?, None)
        };

        let m = model.dim();
        let mut arms = Vec::new();
        let partitions = config.partitions(m)?;
        for &scheme in &config.schemes {
            for partition in &partitions {
                let mut schedule = SelectionSchedule::new(scheme, partition.clone(), seeds.schedule);
                schedule.shared_across_nodes = config.selection.shared_across_nodes;
                arms.push(Arm {
                    label: scheme.name().to_string(),
                    l: partition.shared_entries(),
                    variant: FilterVariant::PDKF,
                    schedule,
                });
            }
        }
        if config.dkf_baseline {
            arms.push(Arm {
                label: "dkf".into(),
                l: m,
                variant: FilterVariant::DKF,
                schedule: SelectionSchedule::new(Scheme::Sequential, Partition::contiguous(m, m)?, seeds.schedule),
            });
        }
        Ok(Self {
            config,
            seeds,
            model,
            topology,
            weights,
            sensors,
            assignment,
            arms,
            initial_state: None,
        })
    }

    /// Scalars sent per iteration by each arm.
    pub fn message_counts(&self) -> Result<Vec<usize>> {
        self.arms
            .iter()
            .map(|arm| {
                NetworkFilter::new(
                    &self.model,
                    &self.sensors,
                    &self.topology,
                    &self.weights,
                    arm.schedule.clone(),
                    arm.variant,
                )
                .map(|f| f.scalars_per_iteration())
            })
            .collect()
    }

    /// Steady-state predictions per arm. Partial-diffusion arms with a
    /// shared schedule use the own-data Riccati limits; the rest are
    /// reported as inapplicable.
    pub fn theory(&self) -> Vec<TheoryOutcome> {
        let tcfg = &self.config.theory;
        let steady = SteadyState::own_data(&self.model, &self.sensors, tcfg.riccati_tol, tcfg.riccati_max_iter);
        let mut cache: Vec<(Vec<Vec<usize>>, TheoryOutcome)> = Vec::new();
        self.arms
            .iter()
            .map(|arm| {
                if arm.variant != FilterVariant::PDKF {
                    return TheoryOutcome::inapplicable(None, "the steady-state model covers partial diffusion only");
                }
                if !arm.schedule.shared_across_nodes {
                    return TheoryOutcome::inapplicable(
                        None,
                        "per-node selection streams are outside the steady-state model",
                    );
                }
                let steady = match &steady {
                    Ok(s) => s,
                    Err(e) => return TheoryOutcome::inapplicable(None, &e.to_string()),
                };
                let subsets = arm.schedule.partition.subsets().to_vec();
                if let Some((_, hit)) = cache.iter().find(|(s, _)| *s == subsets) {
                    return hit.clone();
                }
                let outcome = self.theory_for(steady, &arm.schedule);
                cache.push((subsets, outcome.clone()));
                outcome
            })
            .collect()
    }

    fn theory_for(&self, steady: &SteadyState, schedule: &SelectionSchedule) -> TheoryOutcome {
        let patterns = build_b_patterns(&self.topology, &self.weights, &schedule.partition);
        let bfrak = match expected_b_kron(patterns, schedule.scheme) {
            Ok(b) => b,
            Err(e) => return TheoryOutcome::inapplicable(None, &e.to_string()),
        };
        let report = stability_report(&self.model, steady, &bfrak);
        if report.rho_loop >= 1.0 {
            return TheoryOutcome::inapplicable(
                Some(report.rho_loop),
                &format!("loop spectral radius {:.6} is not below one", report.rho_loop),
            );
        }
        match theoretical_network_msd(steady, &bfrak, &self.model) {
            Ok(t) => TheoryOutcome::Available {
                per_node: t.msd_per_node,
                network: t.msd_network,
                rho_loop: t.spectral_radius,
            },
            Err(e) => TheoryOutcome::inapplicable(Some(report.rho_loop), &e.to_string()),
        }
    }

    /// Run the ensemble and attach the theory.
    pub fn run(&self) -> Result<MsdReport> {
        let cfg = &self.config;
        let iterations = cfg.horizon + 1;
        let n = self.topology.node_count();
        let mn = n * self.model.dim();

        let own = self.arms.iter().any(|a| a.variant.adaptation == Adaptation::OwnData);
        let neigh = self
            .arms
            .iter()
            .any(|a| a.variant.adaptation == Adaptation::Neighborhood);
        let record = |adaptation| GainTrack::record(&self.model, &self.sensors, &self.topology, adaptation, iterations);
        let own_track = own.then(|| record(Adaptation::OwnData)).transpose()?;
        let neigh_track = neigh.then(|| record(Adaptation::Neighborhood)).transpose()?;

        let mut acc: Vec<ArmAccumulator> = self
            .arms
            .iter()
            .map(|_| ArmAccumulator::new(iterations, n, mn, cfg.runs))
            .collect();

        let run_indices: Vec<usize> = (0..cfg.runs).collect();
        for chunk in run_indices.chunks(RUN_CHUNK) {
            let results = chunk
                .par_iter()
                .map(|&r| self.single_run(r, own_track.as_ref(), neigh_track.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            for run in results {
                for (a, arm_run) in acc.iter_mut().zip(run) {
                    a.add(arm_run);
                }
            }
        }

        let theory = self.theory();
        let counts = self.message_counts()?;
        let runs = cfg.runs as f64;
        let arms = self
            .arms
            .iter()
            .zip(acc)
            .zip(theory)
            .zip(counts)
            .map(|(((arm, a), theory), count)| {
                let curve: Vec<f64> = a.curve_sum.iter().map(|s| s / runs).collect();
                let steady_per_node: Vec<f64> = a.node_steady_sum.iter().map(|s| s / runs).collect();
                let steady_network = curve[iterations - cfg.window..].iter().sum::<f64>() / cfg.window as f64;
                ArmReport {
                    scheme: arm.label.clone(),
                    l: arm.l,
                    curve,
                    steady_per_node,
                    steady_network,
                    run_steady: a.run_steady,
                    final_mean_error: a.final_error_sum.iter().map(|s| s / runs).collect(),
                    theory,
                    scalars_per_iteration: count,
                }
            })
            .collect();

        Ok(MsdReport {
            config: cfg.clone(),
            seeds: self.seeds,
            edges: self.topology.edges(),
            sensors: self.assignment.clone(),
            rho_f: spectral_radius(self.model.f()),
            arms,
        })
    }

    fn single_run(&self, r: usize, own: Option<&GainTrack>, neigh: Option<&GainTrack>) -> Result<Vec<ArmRun>> {
        let cfg = &self.config;
        let n = self.topology.node_count();
        let m = self.model.dim();
        let traj = sample_trajectory(
            &self.model,
            &self.sensors,
            cfg.horizon,
            self.seeds.run(r),
            self.initial_state.as_ref(),
        )?;
        let window_start = cfg.horizon + 1 - cfg.window;
        self.arms
            .iter()
            .map(|arm| {
                let track = match arm.variant.adaptation {
                    Adaptation::OwnData => own,
                    Adaptation::Neighborhood => neigh,
                }
                .expect("gain track recorded for every adaptation in use");
                let mut filter = NetworkFilter::new(
                    &self.model,
                    &self.sensors,
                    &self.topology,
                    &self.weights,
                    arm.schedule.clone(),
                    arm.variant,
                )?
                .with_gain_track(track)?;
                let mut curve = Vec::with_capacity(cfg.horizon + 1);
                let mut node_steady = vec![0.0; n];
                for (i, (truth, ys)) in traj.states.iter().zip(&traj.observations).enumerate() {
                    filter.step(ys)?;
                    let sq = filter.squared_errors(truth);
                    curve.push(sq.iter().sum::<f64>() / n as f64);
                    if i >= window_start {
                        for (s, e) in node_steady.iter_mut().zip(&sq) {
                            *s += e;
                        }
                    }
                }
                node_steady.iter_mut().for_each(|s| *s /= cfg.window as f64);
                let truth = traj.states.last().expect("trajectory is non-empty");
                let mut final_error = Vec::with_capacity(n * m);
                for e in filter.errors(truth) {
                    final_error.extend(e.iter());
                }
                Ok(ArmRun {
                    curve,
                    node_steady,
                    final_error,
                })
            })
            .collect()
    }
}

struct ArmRun {
    curve: Vec<f64>,
    node_steady: Vec<f64>,
    final_error: Vec<f64>,
}

struct ArmAccumulator {
    curve_sum: Vec<f64>,
    node_steady_sum: Vec<f64>,
    run_steady: Vec<Vec<f64>>,
    final_error_sum: Vec<f64>,
}

impl ArmAccumulator {
    fn new(iterations: usize, n: usize, mn: usize, runs: usize) -> Self {
        Self {
            curve_sum: vec![0.0; iterations],
            node_steady_sum: vec![0.0; n],
            run_steady: Vec::with_capacity(runs),
            final_error_sum: vec![0.0; mn],
        }
    }

    fn add(&mut self, run: ArmRun) {
        for (s, v) in self.curve_sum.iter_mut().zip(&run.curve) {
            *s += v;
        }
        for (s, v) in self.node_steady_sum.iter_mut().zip(&run.node_steady) {
            *s += v;
        }
        for (s, v) in self.final_error_sum.iter_mut().zip(&run.final_error) {
            *s += v;
        }
        self.run_steady.push(run.node_steady);
    }
}

/// Validate `config`, build the experiment and run it.
pub fn run_experiment(config: ExperimentConfig) -> Result<MsdReport> {
    Experiment::new(config)?.run()
}
