//! Planner-in-the-loop episodes and the evaluation protocol: approach by
//! spline to a looked-up start, grasp with a learned policy, lift with the
//! planner.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{build_dataset, build_grasp_table, pos_encoding, DatagenConfig, GraspTable, TrajectoryDataset};
use crate::encoder::{generate_corpus, EncoderTrainConfig, PointSet, SetEncoder};
use crate::env::{
    grasp_success, ik_solve, sample_above_region, ArmModel, GraspTolerance, IkConfig, Pose2, SceneConfig, SceneObject,
};
use crate::error::{Error, Result};
use crate::fabric::{planner_accel, PlannerFabricConfig};
use crate::integrator::{rk2_step, IntegratorConfig, Trajectory};
use crate::policy::{Learner, Policy, PolicyArchitecture};
use crate::trainer::{expert_accel, nearest_trajectory, ExpertGains, TrainConfig, VELOCITY_WEIGHT};
use crate::types::{Accel, EncodingMode, JointState, RunSeed};

/// Acceleration source for one grasp phase.
pub type Session<'a> = Box<dyn FnMut(&JointState) -> Result<Accel> + 'a>;

/// Anything that drives the arm from a state and an object encoding.
pub trait Controller: Sync {
    /// Starts a grasp phase at `start` for the object encoded by `z`.
    fn session<'a>(&'a self, start: &JointState, z: &'a [f64]) -> Result<Session<'a>>;
}

impl Controller for Policy {
    fn session<'a>(&'a self, _start: &JointState, z: &'a [f64]) -> Result<Session<'a>> {
        Ok(Box::new(move |s: &JointState| Learner::accel(self, s, z)))
    }
}

/// Always commands zero acceleration.
pub struct ZeroController;

impl Controller for ZeroController {
    fn session<'a>(&'a self, _start: &JointState, _z: &'a [f64]) -> Result<Session<'a>> {
        Ok(Box::new(|s: &JointState| Ok(Accel::zeros(s.dim()))))
    }
}

/// The training expert replayed as a policy: picks the nearest frame among
/// demonstrations with the closest encoding once, then tracks successive
/// frames of that demonstration.
pub struct SurrogateExpert<'a> {
    pub dataset: &'a TrajectoryDataset,
    pub gains: ExpertGains,
}

impl Controller for SurrogateExpert<'_> {
    fn session<'a>(&'a self, start: &JointState, z: &'a [f64]) -> Result<Session<'a>> {
        let group = closest_encoding_group(z, self.dataset)?;
        let (id, first) = nearest_trajectory(start, self.dataset, &group, VELOCITY_WEIGHT)?;
        let traj = &self.dataset.demos[id].traj;
        let mut k = 0;
        Ok(Box::new(move |s: &JointState| {
            k += 1;
            Ok(expert_accel(&traj.states[(first + k).min(traj.len() - 1)].q, s, &self.gains))
        }))
    }
}

/// Maps an observed object to the encoding a policy was trained with.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectEncoder {
    Pos,
    Pcd(SetEncoder),
}

impl ObjectEncoder {
    pub fn mode(&self) -> EncodingMode {
        match self {
            ObjectEncoder::Pos => EncodingMode::Pos,
            ObjectEncoder::Pcd(_) => EncodingMode::Pcd,
        }
    }

    pub fn encode(&self, object: &SceneObject) -> Result<Vec<f64>> {
        match self {
            ObjectEncoder::Pos => Ok(pos_encoding(object)),
            ObjectEncoder::Pcd(enc) => enc.encode(&object.points),
        }
    }
}

fn latent_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Ids of all demonstrations whose encoding minimizes `‖z − z_i‖₂`, ascending.
pub fn closest_encoding_group(z: &[f64], ds: &TrajectoryDataset) -> Result<Vec<usize>> {
    if ds.is_empty() {
        return Err(Error::Lookup("dataset is empty".into()));
    }
    if z.len() != ds.z_dim {
        return Err(Error::invalid(format!("query encoding has length {}, dataset uses {}", z.len(), ds.z_dim)));
    }
    let dist: Vec<f64> = ds.demos.iter().map(|d| latent_distance(z, &d.z)).collect();
    let best = dist.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((0..ds.len()).filter(|&i| dist[i] == best).collect())
}

/// Planar pose distance: position in m plus `0.1·|wrapped angle difference|`.
pub const LOOKUP_ANGLE_WEIGHT: f64 = 0.1;

/// Start configuration for deployment: within the closest-encoding group,
/// the first frame of the demonstration whose initial end-effector pose is
/// nearest to `x0`; ties go to the lowest id. Returns the id and the frame.
pub fn nearest_start_lookup(
    z: &[f64],
    x0: &Pose2,
    ds: &TrajectoryDataset,
    arm: &ArmModel,
) -> Result<(usize, DVector<f64>)> {
    let group = closest_encoding_group(z, ds)?;
    let mut best: Option<(f64, usize)> = None;
    for id in group {
        let first = ds.demos[id]
            .traj
            .first()
            .ok_or_else(|| Error::Lookup(format!("demonstration {id} is empty")))?;
        let d = arm.ee_pose(first.q.as_slice()).distance(x0, LOOKUP_ANGLE_WEIGHT);
        if best.is_none_or(|(b, _)| d < b) {
            best = Some((d, id));
        }
    }
    let (_, id) = best.ok_or_else(|| Error::Lookup("no candidate demonstrations".into()))?;
    Ok((id, ds.demos[id].traj.states[0].q.clone()))
}

/// Cubic joint-space spline from `q0` to `q1` with zero end velocities,
/// sampled at `steps + 1` frames spaced `dt` apart.
pub fn cubic_spline(q0: &DVector<f64>, q1: &DVector<f64>, steps: usize, dt: f64) -> Result<Vec<JointState>> {
    if q0.len() != q1.len() || steps == 0 || !(dt > 0.0) {
        return Err(Error::invalid("spline needs matching endpoints, at least one step and dt > 0"));
    }
    let duration = steps as f64 * dt;
    let delta = q1 - q0;
    Ok((0..=steps)
        .map(|k| {
            let s = k as f64 / steps as f64;
            let pos = 3.0 * s * s - 2.0 * s * s * s;
            let vel = (6.0 * s - 6.0 * s * s) / duration;
            JointState::new(q0 + &delta * pos, &delta * vel)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Grasp,
    Lift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub phase: Phase,
    /// Control steps since the episode began.
    pub step: usize,
    /// Simulated seconds since the episode began.
    pub time: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseSteps {
    pub approach: usize,
    pub grasp: usize,
    pub lift: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDiagnostics {
    pub x0: Option<Pose2>,
    pub lookup_id: Option<usize>,
    /// Smallest end-effector signed distance to the object during the
    /// approach transfer, which passes above the table and is not checked.
    pub approach_clearance: f64,
    /// Smallest end-effector signed distance to the object during the grasp.
    pub min_clearance: f64,
    pub failure: Option<String>,
    /// Joint-space distance to the raised configuration after the lift.
    pub lift_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub phase: Phase,
    pub success: bool,
    pub terminal: JointState,
    pub steps: PhaseSteps,
    pub events: Vec<PhaseEvent>,
    pub diagnostics: EpisodeDiagnostics,
    /// Every visited state, starting at home.
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub approach_steps: usize,
    pub grasp_steps: usize,
    pub lift_steps: usize,
    /// Solve IK for the sampled start pose instead of looking it up.
    pub ik_start: bool,
    pub tolerance: GraspTolerance,
    pub integrator: IntegratorConfig,
    pub planner: PlannerFabricConfig,
    pub ik: IkConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            approach_steps: 60,
            grasp_steps: 150,
            lift_steps: 60,
            ik_start: false,
            tolerance: GraspTolerance::default(),
            integrator: IntegratorConfig::default(),
            planner: PlannerFabricConfig::default(),
            ik: IkConfig::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.approach_steps == 0 {
            return Err(Error::invalid("episode: approach needs at least one step"));
        }
        self.integrator.validate()?;
        self.planner.validate()
    }
}

struct EpisodeLog {
    states: Vec<JointState>,
    events: Vec<PhaseEvent>,
    steps: PhaseSteps,
    x0: Option<Pose2>,
    lookup_id: Option<usize>,
    approach_clearance: f64,
    clearance: f64,
    dt: f64,
}

impl EpisodeLog {
    fn enter(&mut self, phase: Phase) {
        let step = self.states.len() - 1;
        self.events.push(PhaseEvent {
            phase,
            step,
            time: step as f64 * self.dt,
        });
    }

    fn state(&self) -> &JointState {
        self.states.last().expect("episode log starts with the home state")
    }

    fn finish(self, phase: Phase, success: bool, failure: Option<String>, lift_error: Option<f64>) -> EpisodeOutcome {
        EpisodeOutcome {
            phase,
            success,
            terminal: self.state().clone(),
            steps: self.steps,
            events: self.events,
            diagnostics: EpisodeDiagnostics {
                x0: self.x0,
                lookup_id: self.lookup_id,
                approach_clearance: self.approach_clearance,
                min_clearance: self.clearance,
                failure,
                lift_error,
            },
            trajectory: Trajectory::new(self.dt, self.states),
        }
    }
}

/// One approach, grasp, lift episode. Phase failures are recorded in the
/// outcome; only malformed inputs return an error.
pub fn run_episode<R: Rng + ?Sized>(
    scene: &SceneConfig,
    object: &SceneObject,
    controller: &dyn Controller,
    encoder: &ObjectEncoder,
    ds: &TrajectoryDataset,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<EpisodeOutcome> {
    cfg.validate()?;
    let arm = &scene.arm;
    if ds.dim != arm.dof() {
        return Err(Error::invalid("dataset and arm have different dimensions"));
    }
    let home = arm.home();
    let mut log = EpisodeLog {
        states: vec![JointState::at_rest(home.clone())],
        events: Vec::new(),
        steps: PhaseSteps::default(),
        x0: None,
        lookup_id: None,
        approach_clearance: f64::INFINITY,
        clearance: f64::INFINITY,
        dt: cfg.integrator.dt,
    };
    log.enter(Phase::Approach);
    let x0 = match sample_above_region(arm, object, scene.clearance, rng) {
        Ok(p) => p,
        Err(e) => return Ok(log.finish(Phase::Approach, false, Some(e.to_string()), None)),
    };
    log.x0 = Some(x0);
    let z = encoder.encode(object)?;
    let q_start = if cfg.ik_start {
        let mut init = home.clone();
        let n = arm.arm_dof();
        init[n] = arm.open_gripper;
        init[n + 1] = arm.open_gripper;
        match ik_solve(arm, &x0, init.as_slice(), &cfg.ik) {
            Ok(q) => q,
            Err(e) => return Ok(log.finish(Phase::Approach, false, Some(e.to_string()), None)),
        }
    } else {
        match nearest_start_lookup(&z, &x0, ds, arm) {
            Ok((id, q)) => {
                log.lookup_id = Some(id);
                q
            }
            Err(e) => return Ok(log.finish(Phase::Approach, false, Some(e.to_string()), None)),
        }
    };
    for s in cubic_spline(&home, &q_start, cfg.approach_steps, cfg.integrator.dt)?.into_iter().skip(1) {
        log.steps.approach += 1;
        log.approach_clearance = log
            .approach_clearance
            .min(object.signed_distance(arm.ee_pose(s.q.as_slice()).position()));
        log.states.push(s);
    }

    log.enter(Phase::Grasp);
    let mut drive = match controller.session(log.state(), &z) {
        Ok(d) => d,
        Err(e) => return Ok(log.finish(Phase::Grasp, false, Some(e.to_string()), None)),
    };
    let failure = loop {
        let state = log.state();
        if grasp_success(arm, state.q.as_slice(), object, &cfg.tolerance) {
            break None;
        }
        if log.steps.grasp >= cfg.grasp_steps {
            break Some("grasp not reached within the step budget".to_string());
        }
        let next = match drive(state).and_then(|a| rk2_step(state, &a, &cfg.integrator)) {
            Ok(n) if n.is_finite() => n,
            Ok(_) => break Some("non-finite state".to_string()),
            Err(e) => break Some(e.to_string()),
        };
        let d = object.signed_distance(arm.ee_pose(next.q.as_slice()).position());
        log.steps.grasp += 1;
        log.clearance = log.clearance.min(d);
        log.states.push(next);
        if d <= 0.0 {
            break Some("collision during grasp".to_string());
        }
    };
    drop(drive);
    if failure.is_some() {
        return Ok(log.finish(Phase::Grasp, false, failure, None));
    }

    log.enter(Phase::Lift);
    let mut raised = home;
    let n = arm.arm_dof();
    raised[n] = log.state().q[n];
    raised[n + 1] = log.state().q[n + 1];
    let mut lift_failure = None;
    for _ in 0..cfg.lift_steps {
        let state = log.state();
        match planner_accel(state, &raised, &[], &cfg.planner, arm).and_then(|a| rk2_step(state, &a, &cfg.integrator)) {
            Ok(s) => log.states.push(s),
            Err(e) => {
                lift_failure = Some(e.to_string());
                break;
            }
        }
        log.steps.lift += 1;
    }
    let lift_error = Some((&log.state().q - &raised).norm());
    Ok(log.finish(Phase::Lift, true, lift_failure, lift_error))
}

/// One policy under evaluation, with the encoder and dataset it was trained on.
pub struct EvalSubject<'a> {
    pub name: String,
    pub controller: &'a dyn Controller,
    pub encoder: &'a ObjectEncoder,
    pub dataset: &'a TrajectoryDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub trials: usize,
    pub seed: u64,
    pub episode: EpisodeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            episode: EpisodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub policy: String,
    pub encoding: EncodingMode,
    pub shape: String,
    pub shape_id: u32,
    pub trial: usize,
    pub pose: Pose2,
    pub phase: Phase,
    pub success: bool,
    pub steps: PhaseSteps,
    pub events: Vec<PhaseEvent>,
    pub lookup_id: Option<usize>,
    pub min_clearance: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub policy: String,
    pub encoding: EncodingMode,
    pub shape: String,
    pub shape_id: u32,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCell {
    pub shape: String,
    pub shape_id: u32,
    pub demonstrations: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub seed: u64,
    pub trials: usize,
    /// Lift runs without contact physics, so success is decided at grasp end.
    pub lift_is_kinematic: bool,
    pub cells: Vec<EvalCell>,
    pub dataset_baseline: Vec<BaselineCell>,
    pub config: EvalConfig,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    /// Success counts recomputed from the episode log, in cell order.
    pub fn recount(&self) -> Vec<usize> {
        self.cells
            .iter()
            .map(|c| {
                self.episodes
                    .iter()
                    .filter(|e| e.policy == c.policy && e.shape_id == c.shape_id && e.success)
                    .count()
            })
            .collect()
    }

    pub fn cell(&self, policy: &str, shape_id: u32) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.policy == policy && c.shape_id == shape_id)
    }

    /// One row per episode.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "policy,encoding,shape,shape_id,trial,x,y,theta,phase,success,approach_steps,grasp_steps,lift_steps,lookup_id,min_clearance,failure"
        )?;
        for e in &self.episodes {
            let phase = match e.phase {
                Phase::Approach => "approach",
                Phase::Grasp => "grasp",
                Phase::Lift => "lift",
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                e.policy,
                e.encoding.as_str(),
                e.shape,
                e.shape_id,
                e.trial,
                e.pose.x,
                e.pose.y,
                e.pose.theta,
                phase,
                e.success as u8,
                e.steps.approach,
                e.steps.grasp,
                e.steps.lift,
                e.lookup_id.map(|i| i.to_string()).unwrap_or_default(),
                e.min_clearance,
                e.failure.as_deref().unwrap_or("").replace(',', ";"),
            )?;
        }
        Ok(())
    }
}

/// Fraction of demonstrations whose final frame satisfies the grasp
/// predicate on their own object, per shape. Encodings do not matter here.
pub fn replay_baseline(
    scene: &SceneConfig,
    ds: &TrajectoryDataset,
    tol: &GraspTolerance,
) -> Result<Vec<BaselineCell>> {
    let mut shape_ids: Vec<u32> = ds.demos.iter().map(|d| d.shape_id).collect();
    shape_ids.sort_unstable();
    shape_ids.dedup();
    let mut cells = Vec::new();
    for sid in shape_ids {
        let mut n = 0;
        let mut ok = 0;
        for d in ds.demos.iter().filter(|d| d.shape_id == sid) {
            n += 1;
            let obj = scene.make_object(sid, d.pose)?;
            if let Some(last) = d.traj.last() {
                ok += grasp_success(&scene.arm, last.q.as_slice(), &obj, tol) as usize;
            }
        }
        cells.push(BaselineCell {
            shape: scene.shapes[sid as usize].name.clone(),
            shape_id: sid,
            demonstrations: n,
            successes: ok,
            success_rate: ok as f64 / n as f64,
        });
    }
    Ok(cells)
}

/// Evaluation pose for one trial; identical for every policy.
pub fn trial_pose(scene: &SceneConfig, seed: u64, shape_id: u32, trial: usize) -> Pose2 {
    let mut rng = RunSeed(seed).substream("eval-pose", &[shape_id as u64, trial as u64]);
    scene.sample_pose(&mut rng)
}

/// Runs `trials` episodes per (subject, shape). Trials share poses and
/// episode streams across subjects.
pub fn evaluate(
    scene: &SceneConfig,
    subjects: &[EvalSubject<'_>],
    shape_ids: &[u32],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    scene.validate()?;
    cfg.episode.validate()?;
    let mut cells = Vec::new();
    let mut episodes = Vec::new();
    for subject in subjects {
        for &sid in shape_ids {
            let shape = scene
                .shapes
                .get(sid as usize)
                .ok_or_else(|| Error::invalid(format!("unknown shape id {sid}")))?
                .name
                .clone();
            let records: Vec<Result<EpisodeRecord>> = (0..cfg.trials)
                .into_par_iter()
                .map(|t| {
                    let pose = trial_pose(scene, cfg.seed, sid, t);
                    let obj = scene.make_object(sid, pose)?;
                    let mut rng = RunSeed(cfg.seed).substream("eval-episode", &[sid as u64, t as u64]);
                    let out = run_episode(scene, &obj, subject.controller, subject.encoder, subject.dataset, &cfg.episode, &mut rng)?;
                    Ok(EpisodeRecord {
                        policy: subject.name.clone(),
                        encoding: subject.encoder.mode(),
                        shape: shape.clone(),
                        shape_id: sid,
                        trial: t,
                        pose,
                        phase: out.phase,
                        success: out.success,
                        steps: out.steps,
                        events: out.events,
                        lookup_id: out.diagnostics.lookup_id,
                        min_clearance: out.diagnostics.min_clearance,
                        failure: out.diagnostics.failure,
                    })
                })
                .collect();
            let mut successes = 0;
            for r in records {
                let r = r?;
                successes += r.success as usize;
                episodes.push(r);
            }
            cells.push(EvalCell {
                policy: subject.name.clone(),
                encoding: subject.encoder.mode(),
                shape,
                shape_id: sid,
                trials: cfg.trials,
                successes,
                success_rate: if cfg.trials == 0 { 0.0 } else { successes as f64 / cfg.trials as f64 },
            });
        }
    }
    let dataset_baseline = match subjects.first() {
        Some(s) => replay_baseline(scene, s.dataset, &cfg.episode.tolerance)?,
        None => Vec::new(),
    };
    Ok(EvalReport {
        report_version: 1,
        seed: cfg.seed,
        trials: cfg.trials,
        lift_is_kinematic: true,
        cells,
        dataset_baseline,
        config: cfg.clone(),
        episodes,
    })
}

/// Every setting of a full run: scene, data generation, encoder and policy
/// training, and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    /// Shapes that appear in the dataset and the encoder corpus.
    pub training_shapes: Vec<String>,
    /// Shapes evaluated without any training data.
    pub heldout_shapes: Vec<String>,
    pub datagen: DatagenConfig,
    pub corpus_size: usize,
    pub encoder: EncoderTrainConfig,
    pub policy: PolicyArchitecture,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            training_shapes: vec!["cylinder".into(), "box".into()],
            heldout_shapes: vec!["capsule".into()],
            datagen: DatagenConfig::default(),
            corpus_size: 2000,
            encoder: EncoderTrainConfig::default(),
            policy: PolicyArchitecture::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Propagates the run seed to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.scene.seed = seed;
        self.encoder.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.datagen.validate()?;
        self.train.validate()?;
        self.eval.episode.validate()?;
        if self.training_shapes.is_empty() {
            return Err(Error::invalid("at least one training shape is required"));
        }
        self.shape_ids(&self.training_shapes)?;
        self.shape_ids(&self.heldout_shapes)?;
        Ok(())
    }

    pub fn shape_ids(&self, names: &[String]) -> Result<Vec<u32>> {
        names.iter().map(|n| self.scene.shape_id(n)).collect()
    }

    pub fn training_ids(&self) -> Result<Vec<u32>> {
        self.shape_ids(&self.training_shapes)
    }

    /// Training shapes followed by held-out shapes.
    pub fn all_ids(&self) -> Result<Vec<u32>> {
        let mut ids = self.training_ids()?;
        ids.extend(self.shape_ids(&self.heldout_shapes)?);
        Ok(ids)
    }

    /// Grasp table and position-encoded dataset for the training shapes.
    pub fn generate_data(&self) -> Result<(GraspTable, TrajectoryDataset)> {
        let table = build_grasp_table(&self.scene, &self.training_ids()?, &self.datagen.ik)?;
        let ds = build_dataset(&self.scene, &table, &self.datagen, RunSeed(self.seed))?;
        Ok((table, ds))
    }

    /// Encoder corpus over the training shapes.
    pub fn generate_objects(&self) -> Result<Vec<PointSet>> {
        generate_corpus(&self.scene, &self.training_ids()?, self.corpus_size, RunSeed(self.seed))
    }
}

/// Re-encodes every demonstration by observing its object through `encoder`.
pub fn encode_dataset(scene: &SceneConfig, ds: &TrajectoryDataset, encoder: &ObjectEncoder) -> Result<TrajectoryDataset> {
    ds.reencode(encoder.mode(), |d| encoder.encode(&scene.make_object(d.shape_id, d.pose)?))
}
