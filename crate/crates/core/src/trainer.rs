//! PD surrogate expert, nearest-demonstration targeting, and DAgger training.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::integrator::{rk2_step, IntegratorConfig};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::policy::{Arch, Learner, Policy, PolicyArchitecture, ZNorm};
use crate::types::{Accel, EncodingMode, JointState, RunSeed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertGains {
    pub k_p: f64,
    pub k_d: f64,
}

impl Default for ExpertGains {
    fn default() -> Self {
        Self { k_p: 100.0, k_d: 20.0 }
    }
}

/// `k_p(q_next_d − q) − k_d·q̇`.
pub fn expert_accel(q_next_d: &DVector<f64>, state: &JointState, gains: &ExpertGains) -> Accel {
    Accel((q_next_d - &state.q) * gains.k_p - &state.qdot * gains.k_d)
}

/// Default velocity weight of the nearest-frame metric, s².
pub const VELOCITY_WEIGHT: f64 = 0.01;

/// Frame minimizing `‖q − q_i‖² + w_v‖q̇ − q̇_i‖²` over the candidate
/// demonstrations; ties go to the lowest (demo id, frame index).
pub fn nearest_trajectory(
    state: &JointState,
    ds: &TrajectoryDataset,
    candidates: &[usize],
    w_v: f64,
) -> Result<(usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    for &id in &sorted {
        let demo = ds
            .demos
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("candidate {id} is not in the dataset")))?;
        for (i, f) in demo.traj.states.iter().enumerate() {
            let d = (&state.q - &f.q).norm_squared() + w_v * (&state.qdot - &f.qdot).norm_squared();
            if best.is_none_or(|(b, _, _)| d < b) {
                best = Some((d, id, i));
            }
        }
    }
    best.map(|(_, id, i)| (id, i))
        .ok_or_else(|| Error::Lookup("no candidate demonstrations".into()))
}

/// Demonstration ids grouped by identical encoding, in first-seen order.
pub fn encoding_groups(ds: &TrajectoryDataset) -> Vec<Vec<usize>> {
    let mut index: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, d) in ds.demos.iter().enumerate() {
        let key: Vec<u64> = d.z.iter().map(|v| v.to_bits()).collect();
        let g = *index.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rounds: usize,
    /// Segments rolled (and labeled) per round; one update per round.
    pub rollouts_per_round: usize,
    pub segment_len: usize,
    /// Half-widths of the uniform start perturbation, rad and rad/s.
    pub noise_q: f64,
    pub noise_qd: f64,
    /// Probability that the expert instead of the learner drives a step,
    /// decayed linearly from this value to zero over the rounds.
    pub expert_mix: f64,
    pub optimizer: OptimizerConfig,
    /// Step size at the last round as a fraction of the configured one,
    /// reached by cosine decay; 1 keeps it constant.
    pub final_step_fraction: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub gains: ExpertGains,
    pub velocity_weight: f64,
    pub integrator: IntegratorConfig,
    pub validation_samples: usize,
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 400,
            rollouts_per_round: 16,
            segment_len: 30,
            noise_q: 0.05,
            noise_qd: 0.05,
            expert_mix: 0.5,
            optimizer: OptimizerConfig::default(),
            final_step_fraction: 1.0,
            grad_clip: 0.0,
            gains: ExpertGains::default(),
            velocity_weight: VELOCITY_WEIGHT,
            integrator: IntegratorConfig::default(),
            validation_samples: 256,
            validate_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.rollouts_per_round == 0 || self.segment_len == 0 {
            return Err(Error::invalid("train: rounds, rollouts and segment length must be positive"));
        }
        if !(self.final_step_fraction > 0.0 && self.final_step_fraction <= 1.0) {
            return Err(Error::invalid("train: final_step_fraction must be in (0, 1]"));
        }
        if !(self.noise_q >= 0.0 && self.noise_qd >= 0.0 && (0.0..=1.0).contains(&self.expert_mix)) {
            return Err(Error::invalid("train: noise must be non-negative and expert_mix in [0, 1]"));
        }
        if !(self.gains.k_p > 0.0 && self.gains.k_d > 0.0) {
            return Err(Error::invalid("train: expert gains must be positive"));
        }
        self.optimizer.validate()?;
        self.integrator.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub mean_loss: f64,
    pub labels: usize,
    pub truncated: usize,
}

/// Start state: a random dataset frame perturbed by uniform noise.
fn perturbed_frame<R: Rng + ?Sized>(ds: &TrajectoryDataset, cfg: &TrainConfig, rng: &mut R) -> (usize, JointState) {
    let id = rng.random_range(0..ds.demos.len());
    let traj = &ds.demos[id].traj;
    let frame = &traj.states[rng.random_range(0..traj.len())];
    let mut s = frame.clone();
    for v in s.q.iter_mut() {
        *v += rng.random_range(-1.0..=1.0) * cfg.noise_q;
    }
    for v in s.qdot.iter_mut() {
        *v += rng.random_range(-1.0..=1.0) * cfg.noise_qd;
    }
    (id, s)
}

/// Labeled segment: loss sum, gradient sum, label count, whether cut short.
struct Segment {
    loss: f64,
    grad: Vec<f64>,
    labels: usize,
    truncated: bool,
}

fn run_segment<L: Learner + ?Sized>(
    learner: &L,
    ds: &TrajectoryDataset,
    groups: &[Vec<usize>],
    group_of: &[usize],
    cfg: &TrainConfig,
    mix: f64,
    n_params: usize,
    rng: &mut impl Rng,
) -> Result<Segment> {
    let (seed_id, mut state) = perturbed_frame(ds, cfg, rng);
    let z = &ds.demos[seed_id].z;
    let (id, start) = nearest_trajectory(&state, ds, &groups[group_of[seed_id]], cfg.velocity_weight)?;
    let traj = &ds.demos[id].traj;
    let mut seg = Segment {
        loss: 0.0,
        grad: vec![0.0; n_params],
        labels: 0,
        truncated: false,
    };
    for k in 0..cfg.segment_len {
        let target = &traj.states[(start + k + 1).min(traj.len() - 1)].q;
        let label = expert_accel(target, &state, &cfg.gains);
        let (loss, g, own) = learner.loss_and_grad(&state, z, &label.0)?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            seg.truncated = true;
            break;
        }
        seg.loss += loss;
        for (a, b) in seg.grad.iter_mut().zip(&g) {
            *a += b;
        }
        seg.labels += 1;
        let drive = if mix > 0.0 && rng.random::<f64>() < mix { label } else { own };
        match rk2_step(&state, &drive, &cfg.integrator) {
            Ok(next) if next.is_finite() => state = next,
            _ => {
                seg.truncated = true;
                break;
            }
        }
    }
    Ok(seg)
}

/// Training state carried across rounds.
pub struct DaggerState {
    pub optimizer: Optimizer,
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
}

impl DaggerState {
    pub fn new<L: Learner + ?Sized>(learner: &L, ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ds.is_empty() {
            return Err(Error::invalid("training needs a nonempty dataset"));
        }
        let groups = encoding_groups(ds);
        let mut group_of = vec![0; ds.len()];
        for (g, ids) in groups.iter().enumerate() {
            for &i in ids {
                group_of[i] = g;
            }
        }
        Ok(Self {
            optimizer: Optimizer::new(cfg.optimizer.clone(), learner.params().len())?,
            groups,
            group_of,
        })
    }
}

/// Rolls `rollouts_per_round` learner segments from perturbed dataset frames,
/// labels every visited state with the expert toward successive frames of the
/// nearest demonstration, and applies one update on the mean squared error.
pub fn dagger_round<L: Learner + Sync + ?Sized>(
    learner: &mut L,
    ds: &TrajectoryDataset,
    cfg: &TrainConfig,
    st: &mut DaggerState,
    round: usize,
) -> Result<RoundStats> {
    let n_params = learner.params().len();
    let mix = if cfg.rounds > 1 {
        cfg.expert_mix * (1.0 - round as f64 / (cfg.rounds - 1) as f64)
    } else {
        cfg.expert_mix
    };
    let seed = RunSeed(cfg.seed);
    let frozen: &L = learner;
    let segments: Vec<Result<Segment>> = (0..cfg.rollouts_per_round)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed.substream("dagger-segment", &[round as u64, b as u64]);
            run_segment(frozen, ds, &st.groups, &st.group_of, cfg, mix, n_params, &mut rng)
        })
        .collect();
    let mut loss = 0.0;
    let mut labels = 0;
    let mut truncated = 0;
    let mut grad = vec![0.0; n_params];
    for s in segments {
        let s = s?;
        loss += s.loss;
        labels += s.labels;
        truncated += s.truncated as usize;
        for (a, b) in grad.iter_mut().zip(&s.grad) {
            *a += b;
        }
    }
    if labels == 0 {
        return Err(Error::TrainingAbort {
            round,
            reason: "no labels collected".into(),
        });
    }
    let mean = loss / labels as f64;
    if !mean.is_finite() {
        return Err(Error::TrainingAbort {
            round,
            reason: format!("non-finite loss ({labels} labels, {truncated} truncated segments)"),
        });
    }
    let inv = 1.0 / labels as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    if cfg.grad_clip > 0.0 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    let progress = if cfg.rounds > 1 { round as f64 / (cfg.rounds - 1) as f64 } else { 0.0 };
    let f = cfg.final_step_fraction;
    st.optimizer
        .set_step_scale(f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
    let mut params = learner.params();
    st.optimizer.step(&mut params, &grad)?;
    learner.set_params(&params)?;
    Ok(RoundStats {
        mean_loss: mean,
        labels,
        truncated,
    })
}

/// Fixed expert-labeled states for checkpoint selection.
pub struct ValidationSet {
    states: Vec<(JointState, Vec<f64>, DVector<f64>)>,
}

impl ValidationSet {
    pub fn sample(ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<Self> {
        let groups = encoding_groups(ds);
        let mut group_of = vec![0; ds.len()];
        for (g, ids) in groups.iter().enumerate() {
            for &i in ids {
                group_of[i] = g;
            }
        }
        let mut rng = RunSeed(cfg.seed).stream("validation");
        let mut states = Vec::with_capacity(cfg.validation_samples);
        for _ in 0..cfg.validation_samples {
            let (seed_id, s) = perturbed_frame(ds, cfg, &mut rng);
            let (id, i) = nearest_trajectory(&s, ds, &groups[group_of[seed_id]], cfg.velocity_weight)?;
            let traj = &ds.demos[id].traj;
            let label = expert_accel(&traj.states[(i + 1).min(traj.len() - 1)].q, &s, &cfg.gains);
            states.push((s, ds.demos[seed_id].z.clone(), label.0));
        }
        Ok(Self { states })
    }

    pub fn loss<L: Learner + Sync + ?Sized>(&self, learner: &L) -> Result<f64> {
        if self.states.is_empty() {
            return Ok(0.0);
        }
        let losses: Vec<Result<f64>> = self
            .states
            .par_iter()
            .map(|(s, z, t)| Ok((learner.accel(s, z)?.0 - t).norm_squared()))
            .collect();
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / self.states.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub report_version: u32,
    pub arch: Arch,
    pub encoding: EncodingMode,
    pub seed: u64,
    pub param_count: usize,
    pub round_losses: Vec<f64>,
    pub labels: usize,
    pub truncated_segments: usize,
    /// `(round, validation loss)` at every check.
    pub validation: Vec<(usize, f64)>,
    pub best_round: usize,
    pub best_validation_loss: f64,
    pub config: TrainConfig,
    pub architecture: PolicyArchitecture,
}

/// Trains a fresh policy of the given kind on `ds` and keeps the
/// parameters with the lowest validation loss.
pub fn train(
    arch: Arch,
    ds: &TrajectoryDataset,
    spec: &PolicyArchitecture,
    cfg: &TrainConfig,
) -> Result<(Policy, TrainReport)> {
    cfg.validate()?;
    let z_norm = ZNorm::fit(ds.demos.iter().map(|d| d.z.as_slice()), ds.z_dim);
    let mut init_rng = RunSeed(cfg.seed).stream(&format!("policy-init-{}", arch.as_str()));
    let mut policy = Policy::new(arch, ds.encoding, ds.dim, z_norm, spec, &mut init_rng)?;
    let mut st = DaggerState::new(&policy, ds, cfg)?;
    let val = ValidationSet::sample(ds, cfg)?;

    let mut best = (0, val.loss(&policy)?, policy.params());
    let mut report = TrainReport {
        report_version: 1,
        arch,
        encoding: ds.encoding,
        seed: cfg.seed,
        param_count: policy.param_count(),
        round_losses: Vec::with_capacity(cfg.rounds),
        labels: 0,
        truncated_segments: 0,
        validation: vec![(0, best.1)],
        best_round: 0,
        best_validation_loss: best.1,
        config: cfg.clone(),
        architecture: spec.clone(),
    };
    for round in 0..cfg.rounds {
        let stats = dagger_round(&mut policy, ds, cfg, &mut st, round)?;
        report.round_losses.push(stats.mean_loss);
        report.labels += stats.labels;
        report.truncated_segments += stats.truncated;
        let done = round + 1;
        if cfg.validate_every > 0 && (done % cfg.validate_every == 0 || done == cfg.rounds) {
            let v = val.loss(&policy)?;
            if !v.is_finite() {
                let pn = policy.params().iter().map(|p| p * p).sum::<f64>().sqrt();
                return Err(Error::TrainingAbort {
                    round,
                    reason: format!(
                        "non-finite validation loss (param norm {pn:.3e}, last round loss {:.3e})",
                        stats.mean_loss
                    ),
                });
            }
            report.validation.push((done, v));
            if v < best.1 {
                best = (done, v, policy.params());
            }
        }
    }
    policy.set_params(&best.2)?;
    report.best_round = best.0;
    report.best_validation_loss = best.1;
    Ok((policy, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Demo;
    use crate::env::Pose2;
    use crate::integrator::Trajectory;
    use crate::nn::{Activation, DiffNet, Layer, OutputActivation};
    use crate::policy::{MlpPolicy, PolicyNet};

    fn demo(qs: &[f64], qds: &[f64], z: f64) -> Demo {
        Demo {
            traj: Trajectory::new(
                1.0 / 30.0,
                qs.iter().zip(qds).map(|(q, qd)| JointState::from_slices(&[*q], &[*qd])).collect(),
            ),
            z: vec![z],
            shape_id: 0,
            pose: Pose2::new(0.5, 0.0, 0.0),
            grasp_index: 0,
        }
    }

    fn dataset(demos: Vec<Demo>) -> TrajectoryDataset {
        TrajectoryDataset {
            dim: 1,
            z_dim: 1,
            dt: 1.0 / 30.0,
            encoding: EncodingMode::Pos,
            demos,
            entries: 1,
            per_entry: 1,
            rejected: 0,
            seed: 0,
        }
    }

    #[test]
    fn expert_examples_and_superposition() {
        let g = ExpertGains::default();
        let s = JointState::from_slices(&[0.3, 0.1], &[0.0, 0.0]);
        assert_eq!(expert_accel(&s.q, &s, &g).0.amax(), 0.0);
        let target = DVector::from_vec(vec![0.4, 0.1]);
        let a = expert_accel(&target, &s, &g).0;
        assert!((a[0] - 10.0).abs() < 1e-12 && a[1] == 0.0);
        let s2 = JointState::from_slices(&[0.0, 0.0], &[0.5, -1.0]);
        let e1 = expert_accel(&target, &JointState::from_slices(&[0.3, 0.1], &[0.0, 0.0]), &g).0;
        let e2 = expert_accel(&DVector::zeros(2), &s2, &g).0;
        let both = expert_accel(&target, &JointState::from_slices(&[0.3, 0.1], &[0.5, -1.0]), &g).0;
        assert!((both - (e1 + e2)).amax() < 1e-12);
    }

    #[test]
    fn nearest_examples_and_ties() {
        let ds = dataset(vec![demo(&[0.0, 1.0], &[0.0, 0.0], 0.0), demo(&[1.0, 2.0], &[0.0, 0.0], 0.0)]);
        let all = [0, 1];
        let q = JointState::from_slices(&[2.0], &[0.0]);
        assert_eq!(nearest_trajectory(&q, &ds, &all, 0.01).unwrap(), (1, 1));
        let q = JointState::from_slices(&[1.0], &[0.0]);
        assert_eq!(nearest_trajectory(&q, &ds, &all, 0.01).unwrap(), (0, 1));
        assert_eq!(nearest_trajectory(&q, &ds, &[1, 0], 0.01).unwrap(), (0, 1));
        assert!(matches!(nearest_trajectory(&q, &ds, &[], 0.01), Err(Error::Lookup(_))));
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = RunSeed(3).stream("nearest");
        let demos: Vec<Demo> = (0..10)
            .map(|_| {
                let qs: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
                let qds: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
                demo(&qs, &qds, 0.0)
            })
            .collect();
        let ds = dataset(demos);
        let all: Vec<usize> = (0..10).collect();
        for _ in 0..100 {
            let s = JointState::from_slices(&[rng.random_range(-1.0..1.0)], &[rng.random_range(-1.0..1.0)]);
            let mut best = (f64::INFINITY, 0, 0);
            for (id, d) in ds.demos.iter().enumerate() {
                for (i, f) in d.traj.states.iter().enumerate() {
                    let dist = (s.q[0] - f.q[0]).powi(2) + 0.01 * (s.qdot[0] - f.qdot[0]).powi(2);
                    if dist < best.0 {
                        best = (dist, id, i);
                    }
                }
            }
            assert_eq!(nearest_trajectory(&s, &ds, &all, 0.01).unwrap(), (best.1, best.2));
        }
    }

    fn linear_mlp(w: [f64; 3]) -> Policy {
        let net = DiffNet::from_layers(
            3,
            None,
            vec![Layer::new(3, 1, w.to_vec(), vec![0.0]).unwrap()],
            Activation::Relu,
            OutputActivation::Linear,
        )
        .unwrap();
        Policy {
            net: PolicyNet::Mlp(MlpPolicy::from_net(1, 1, net).unwrap()),
            encoding: EncodingMode::Pos,
            z_norm: ZNorm::identity(1),
        }
    }

    fn resting_dataset() -> TrajectoryDataset {
        dataset(vec![demo(&[0.0; 30], &[0.0; 30], 0.0)])
    }

    #[test]
    fn expert_mimic_has_zero_loss() {
        let ds = resting_dataset();
        let mut p = linear_mlp([-100.0, -20.0, 0.0]);
        let cfg = TrainConfig {
            rounds: 3,
            expert_mix: 0.0,
            ..Default::default()
        };
        let mut st = DaggerState::new(&p, &ds, &cfg).unwrap();
        for r in 0..3 {
            let stats = dagger_round(&mut p, &ds, &cfg, &mut st, r).unwrap();
            assert!(stats.mean_loss <= 1e-20, "{}", stats.mean_loss);
            assert_eq!(stats.labels, cfg.rollouts_per_round * cfg.segment_len);
        }
        // Zero gradient from rest leaves the parameters untouched.
        assert_eq!(p.params(), vec![-100.0, -20.0, 0.0, 0.0]);
    }

    #[test]
    fn round_loss_halves_on_one_dof_fixture() {
        let ds = resting_dataset();
        let mut p = linear_mlp([0.0, 0.0, 0.0]);
        let cfg = TrainConfig {
            rounds: 20,
            segment_len: 10,
            noise_q: 0.5,
            noise_qd: 0.5,
            optimizer: OptimizerConfig::Momentum {
                step: 0.5,
                momentum: 0.9,
            },
            ..Default::default()
        };
        let mut st = DaggerState::new(&p, &ds, &cfg).unwrap();
        let losses: Vec<f64> = (0..20)
            .map(|r| dagger_round(&mut p, &ds, &cfg, &mut st, r).unwrap().mean_loss)
            .collect();
        assert!(losses[19] <= 0.5 * losses[0], "{losses:?}");
    }

    #[test]
    fn train_is_deterministic_and_reports_every_round() {
        let ds = resting_dataset();
        let spec = PolicyArchitecture {
            ngf_hidden: vec![4, 4],
            rff_features: 0,
            mlp_hidden: vec![4],
            ..PolicyArchitecture::full_scale()
        };
        let cfg = TrainConfig {
            rounds: 4,
            rollouts_per_round: 2,
            segment_len: 3,
            validation_samples: 8,
            validate_every: 2,
            ..Default::default()
        };
        for arch in [Arch::Ngf, Arch::Mlp] {
            let (p1, r1) = train(arch, &ds, &spec, &cfg).unwrap();
            let (p2, r2) = train(arch, &ds, &spec, &cfg).unwrap();
            assert_eq!(p1, p2);
            assert_eq!(r1, r2);
            assert_eq!(r1.round_losses.len(), 4);
        }
    }

    #[test]
    fn divergent_learner_aborts() {
        let ds = resting_dataset();
        let mut p = linear_mlp([f64::NAN, 0.0, 0.0]);
        let cfg = TrainConfig::default();
        let mut st = DaggerState::new(&p, &ds, &cfg).unwrap();
        assert!(matches!(
            dagger_round(&mut p, &ds, &cfg, &mut st, 0),
            Err(Error::TrainingAbort { round: 0, .. })
        ));
    }
}
