//! Grasp table and demonstration dataset: planner paths from each grasp back
//! out to a sampled pre-grasp pose, reversed into approach demonstrations.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{
    approach_region, grasp_candidate, grasp_configuration, grasp_success, ik_solve, sample_in_region, ArmModel,
    GraspSpec, GraspTolerance, IkConfig, Pose2, SceneConfig, SceneObject, GRASP_VARIANTS,
};
use crate::error::{Error, Result};
use crate::fabric::{planner_accel, PlannerFabricConfig};
use crate::integrator::{rollout, IntegratorConfig, Trajectory};
use crate::nn::ByteReader;
use crate::types::{EncodingMode, JointState, RunSeed};

pub const NGFD_MAGIC: &[u8; 4] = b"NGFD";
pub const NGFD_VERSION: u32 = 1;

/// One reachable grasp: object, approach variant, and joint configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspEntry {
    pub shape_id: u32,
    pub pose: Pose2,
    pub grasp: GraspSpec,
    pub q_grasp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspTable {
    pub entries: Vec<GraspEntry>,
}

impl GraspTable {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// First approach variant whose grasp configuration solves and passes the
/// grasp predicate, or `None` when the object cannot be grasped.
pub fn find_grasp(arm: &ArmModel, object: &SceneObject, ik: &IkConfig) -> Option<(GraspSpec, DVector<f64>)> {
    let tol = GraspTolerance::default();
    (0..GRASP_VARIANTS).find_map(|v| {
        let g = grasp_candidate(arm, object, v).ok()?;
        let q = grasp_configuration(arm, &g, ik).ok()?;
        (tol.matches(arm, q.as_slice(), &g) && grasp_success(arm, q.as_slice(), object, &tol)).then_some((g, q))
    })
}

/// One entry per (shape, grid pose) that admits a grasp. Unreachable cells are skipped.
pub fn build_grasp_table(scene: &SceneConfig, shape_ids: &[u32], ik: &IkConfig) -> Result<GraspTable> {
    scene.validate()?;
    let mut entries = Vec::new();
    for &sid in shape_ids {
        for pose in scene.grid_poses() {
            let object = scene.make_object(sid, pose)?;
            if let Some((grasp, q)) = find_grasp(&scene.arm, &object, ik) {
                entries.push(GraspEntry {
                    shape_id: sid,
                    pose,
                    grasp,
                    q_grasp: q.as_slice().to_vec(),
                });
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::Datagen("no grid pose admits a grasp".into()));
    }
    Ok(GraspTable { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    /// Trajectories per grasp entry.
    pub per_entry: usize,
    pub max_attempts: usize,
    pub planner: PlannerFabricConfig,
    pub integrator: IntegratorConfig,
    pub ik: IkConfig,
    /// Planner convergence: joint error and speed.
    pub converge_position: f64,
    pub converge_velocity: f64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            per_entry: 32,
            max_attempts: 10,
            planner: PlannerFabricConfig::default(),
            integrator: IntegratorConfig::default(),
            ik: IkConfig::default(),
            converge_position: 1e-3,
            converge_velocity: 1e-2,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        self.integrator.validate()?;
        if self.max_attempts == 0 {
            return Err(Error::invalid("datagen: max_attempts must be positive"));
        }
        Ok(())
    }
}

/// Smallest signed distance of the end effector to the object along a trajectory.
pub fn min_clearance(arm: &ArmModel, object: &SceneObject, traj: &Trajectory) -> f64 {
    traj.states
        .iter()
        .map(|s| object.signed_distance(arm.ee_pose(s.q.as_slice()).position()))
        .fold(f64::INFINITY, f64::min)
}

/// Pre-grasp target sampled for `entry`: EE pose and open-gripper joint configuration.
fn sample_start<R: rand::Rng + ?Sized>(
    scene: &SceneConfig,
    entry: &GraspEntry,
    object: &SceneObject,
    ik: &IkConfig,
    rng: &mut R,
) -> Result<(Pose2, DVector<f64>)> {
    let region = approach_region(object, &entry.grasp, scene.clearance);
    let x0 = sample_in_region(&region, rng);
    let mut q = ik_solve(&scene.arm, &x0, &entry.q_grasp, ik)?;
    let n = scene.arm.arm_dof();
    q[n] = scene.arm.open_gripper;
    q[n + 1] = scene.arm.open_gripper;
    Ok((x0, q))
}

/// Planner path from rest at the grasp out to a sampled pre-grasp pose,
/// reversed (velocities negated) into an approach demonstration. Resamples
/// the pre-grasp pose up to `max_attempts` times.
pub fn generate_reverse_trajectory<R: rand::Rng + ?Sized>(
    scene: &SceneConfig,
    entry: &GraspEntry,
    cfg: &DatagenConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let object = scene.make_object(entry.shape_id, entry.pose)?;
    let q_g = DVector::from_column_slice(&entry.q_grasp);
    let mut reason = String::new();
    for _ in 0..cfg.max_attempts {
        let (_, target) = match sample_start(scene, entry, &object, &cfg.ik, rng) {
            Ok(v) => v,
            Err(e) => {
                reason = e.to_string();
                continue;
            }
        };
        let mut converged = false;
        let result = rollout(
            |s| planner_accel(s, &target, &object.points, &cfg.planner, &scene.arm),
            JointState::at_rest(q_g.clone()),
            &cfg.integrator,
            |s, _| {
                converged = (&s.q - &target).norm() <= cfg.converge_position && s.qdot.norm() <= cfg.converge_velocity;
                converged
            },
        );
        let forward = match result {
            Ok(t) => t,
            Err(e) => {
                reason = e.to_string();
                continue;
            }
        };
        if !converged {
            reason = format!("planner did not converge within {} steps", cfg.integrator.max_steps);
            continue;
        }
        if min_clearance(&scene.arm, &object, &forward) <= 0.0 {
            reason = "end effector penetrates the object".into();
            continue;
        }
        return Ok(forward.reversed());
    }
    Err(Error::TrajectoryRejected {
        attempts: cfg.max_attempts,
        reason,
    })
}

/// One demonstration with its object tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub traj: Trajectory,
    pub z: Vec<f64>,
    pub shape_id: u32,
    pub pose: Pose2,
    pub grasp_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub z_dim: usize,
    pub dt: f64,
    pub count: usize,
    pub encoding: EncodingMode,
    pub entries: usize,
    pub per_entry: usize,
    pub rejected: usize,
    pub seed: u64,
    pub grasp_index: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub dim: usize,
    pub z_dim: usize,
    pub dt: f64,
    pub encoding: EncodingMode,
    pub demos: Vec<Demo>,
    pub entries: usize,
    pub per_entry: usize,
    pub rejected: usize,
    pub seed: u64,
}

/// Centroid position of an object.
pub fn pos_encoding(object: &SceneObject) -> Vec<f64> {
    object.centroid().to_vec()
}

/// `per_entry` demonstrations for every table entry, tagged with the centroid
/// encoding. Each (entry, sample) pair has its own random stream, so results
/// do not depend on scheduling.
pub fn build_dataset(scene: &SceneConfig, table: &GraspTable, cfg: &DatagenConfig, seed: RunSeed) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    if table.entries.is_empty() {
        return Err(Error::Datagen("empty grasp table".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..table.entries.len())
        .flat_map(|e| (0..cfg.per_entry).map(move |m| (e, m)))
        .collect();
    let results: Vec<Result<Option<Demo>>> = jobs
        .par_iter()
        .map(|&(e, m)| {
            let entry = &table.entries[e];
            let mut rng = seed.substream("datagen-trajectory", &[e as u64, m as u64]);
            match generate_reverse_trajectory(scene, entry, cfg, &mut rng) {
                Ok(traj) => {
                    let object = scene.make_object(entry.shape_id, entry.pose)?;
                    Ok(Some(Demo {
                        traj,
                        z: pos_encoding(&object),
                        shape_id: entry.shape_id,
                        pose: entry.pose,
                        grasp_index: e as u32,
                    }))
                }
                Err(Error::TrajectoryRejected { .. }) => Ok(None),
                Err(other) => Err(other),
            }
        })
        .collect();
    let mut demos = Vec::with_capacity(jobs.len());
    let mut rejected = 0;
    for r in results {
        match r? {
            Some(d) => demos.push(d),
            None => rejected += 1,
        }
    }
    Ok(TrajectoryDataset {
        dim: scene.arm.dof(),
        z_dim: 2,
        dt: cfg.integrator.dt,
        encoding: EncodingMode::Pos,
        demos,
        entries: table.entries.len(),
        per_entry: cfg.per_entry,
        rejected,
        seed: seed.0,
    })
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    /// Replaces every encoding with `f(demo)`; all results must share one length.
    pub fn reencode<F>(&self, mode: EncodingMode, mut f: F) -> Result<TrajectoryDataset>
    where
        F: FnMut(&Demo) -> Result<Vec<f64>>,
    {
        let mut out = self.clone();
        out.encoding = mode;
        let mut z_dim = None;
        for d in &mut out.demos {
            d.z = f(d)?;
            if *z_dim.get_or_insert(d.z.len()) != d.z.len() {
                return Err(Error::invalid("re-encoding produced latents of different lengths"));
            }
        }
        out.z_dim = z_dim.unwrap_or(self.z_dim);
        Ok(out)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format: "NGFD".into(),
            version: NGFD_VERSION,
            dim: self.dim,
            z_dim: self.z_dim,
            dt: self.dt,
            count: self.demos.len(),
            encoding: self.encoding,
            entries: self.entries,
            per_entry: self.per_entry,
            rejected: self.rejected,
            seed: self.seed,
            grasp_index: self.demos.iter().map(|d| d.grasp_index).collect(),
        }
    }

    /// NGFD bytes: header, then per trajectory `T`, `q`, `q̇`, `z`, shape id, pose.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(NGFD_MAGIC);
        out.extend_from_slice(&NGFD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.z_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.demos.len() as u64).to_le_bytes());
        for d in &self.demos {
            if d.traj.dim() != self.dim && !d.traj.is_empty() || d.z.len() != self.z_dim {
                return Err(Error::invalid("demonstration does not match dataset dimensions"));
            }
            out.extend_from_slice(&(d.traj.len() as u32).to_le_bytes());
            for s in &d.traj.states {
                for v in s.q.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            for s in &d.traj.states {
                for v in s.qdot.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            for v in &d.z {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&d.shape_id.to_le_bytes());
            for v in [d.pose.x, d.pose.y, d.pose.theta] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses NGFD bytes; metadata not stored in the binary comes from `manifest`.
    pub fn from_bytes(bytes: &[u8], manifest: Option<&DatasetManifest>) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != NGFD_MAGIC {
            return Err(Error::format(0, "bad NGFD magic"));
        }
        let version = r.u32()?;
        if version != NGFD_VERSION {
            return Err(Error::format(4, format!("unsupported NGFD version {version}")));
        }
        let dim = r.u32()? as usize;
        let z_dim = r.u32()? as usize;
        let count_off = r.pos;
        let count = r.u64()?;
        if count > (bytes.len() as u64) {
            return Err(Error::format(count_off as u64, "trajectory count exceeds file size"));
        }
        let mut demos = Vec::with_capacity(count as usize);
        for i in 0..count as usize {
            let t = r.u32()? as usize;
            let need = (2 * t * dim + z_dim) * 8 + 4 + 24;
            if r.remaining() < need {
                return Err(Error::format(r.pos as u64, "truncated trajectory record"));
            }
            let mut qs = Vec::with_capacity(t);
            for _ in 0..t {
                qs.push(DVector::from_iterator(dim, (0..dim).map(|_| r.f64().unwrap())));
            }
            let mut states = Vec::with_capacity(t);
            for q in qs {
                let qd = DVector::from_iterator(dim, (0..dim).map(|_| r.f64().unwrap()));
                states.push(JointState::new(q, qd));
            }
            let z = (0..z_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let shape_id = r.u32()?;
            let pose = Pose2::new(r.f64()?, r.f64()?, r.f64()?);
            let grasp_index = manifest.and_then(|m| m.grasp_index.get(i).copied()).unwrap_or(0);
            demos.push(Demo {
                traj: Trajectory::new(manifest.map_or(crate::integrator::CONTROL_DT, |m| m.dt), states),
                z,
                shape_id,
                pose,
                grasp_index,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.pos as u64, "trailing bytes after last trajectory"));
        }
        if let Some(m) = manifest {
            if m.dim != dim || m.z_dim != z_dim || m.count != count as usize {
                return Err(Error::format(0, "manifest disagrees with NGFD header"));
            }
        }
        Ok(Self {
            dim,
            z_dim,
            dt: manifest.map_or(crate::integrator::CONTROL_DT, |m| m.dt),
            encoding: manifest.map_or(EncodingMode::Pos, |m| m.encoding),
            demos,
            entries: manifest.map_or(0, |m| m.entries),
            per_entry: manifest.map_or(0, |m| m.per_entry),
            rejected: manifest.map_or(0, |m| m.rejected),
            seed: manifest.map_or(0, |m| m.seed),
        })
    }
}

/// Sidecar manifest path: `<path>.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_dataset(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    fs::write(path, ds.to_bytes()?)?;
    fs::write(manifest_path(path), serde_json::to_vec_pretty(&ds.manifest())?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let bytes = fs::read(path)?;
    let mpath = manifest_path(path);
    let manifest: Option<DatasetManifest> = if mpath.exists() {
        Some(serde_json::from_slice(&fs::read(mpath)?)?)
    } else {
        None
    };
    TrajectoryDataset::from_bytes(&bytes, manifest.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Shape, ShapeConfig};

    fn single_circle_scene() -> SceneConfig {
        SceneConfig {
            shapes: vec![ShapeConfig {
                name: "cylinder".into(),
                shape: Shape::Circle { radius: 0.035 },
            }],
            grid: crate::env::PoseGrid {
                nx: 1,
                ny: 1,
                ..Default::default()
            },
            ..SceneConfig::default()
        }
    }

    #[test]
    fn single_circle_table_has_one_entry() {
        let scene = single_circle_scene();
        let t = build_grasp_table(&scene, &[0], &IkConfig::default()).unwrap();
        assert_eq!(t.entries.len(), 1);
        assert_eq!(t, build_grasp_table(&scene, &[0], &IkConfig::default()).unwrap());
    }

    #[test]
    fn out_of_reach_cells_are_skipped() {
        let mut scene = single_circle_scene();
        scene.table_x = [0.2, 2.0];
        scene.grid.nx = 3;
        let t = build_grasp_table(&scene, &[0], &IkConfig::default()).unwrap();
        assert_eq!(t.entries.len(), 1);
        scene.table_x = [1.5, 2.0];
        assert!(matches!(
            build_grasp_table(&scene, &[0], &IkConfig::default()),
            Err(Error::Datagen(_))
        ));
    }

    #[test]
    fn reversed_trajectory_contract() {
        let scene = single_circle_scene();
        let table = build_grasp_table(&scene, &[0], &IkConfig::default()).unwrap();
        let entry = &table.entries[0];
        let object = scene.make_object(0, entry.pose).unwrap();
        let cfg = DatagenConfig::default();
        let mut rng = RunSeed(3).stream("rev");
        for _ in 0..8 {
            let traj = generate_reverse_trajectory(&scene, entry, &cfg, &mut rng).unwrap();
            let last = traj.last().unwrap();
            assert_eq!(last.q.as_slice(), entry.q_grasp.as_slice());
            assert_eq!(last.qdot.amax(), 0.0);
            assert!(GraspTolerance::default().matches(&scene.arm, last.q.as_slice(), &entry.grasp));
            assert!(min_clearance(&scene.arm, &object, &traj) > 0.0);
            let region = approach_region(&object, &entry.grasp, scene.clearance);
            let start = scene.arm.ee_pose(traj.first().unwrap().q.as_slice());
            // Converged to within 1e-3 rad of the IK target; the EE stays in the region up to that slack.
            assert!(region.contains(start.position(), 2e-3));
            for w in traj.states.windows(2) {
                let fd = (&w[1].q - &w[0].q) / traj.dt;
                assert!((fd - &w[1].qdot).amax() <= traj.dt * 40.0);
            }
        }
    }

    fn small_dataset() -> TrajectoryDataset {
        let scene = single_circle_scene();
        let table = build_grasp_table(&scene, &[0], &IkConfig::default()).unwrap();
        let cfg = DatagenConfig {
            per_entry: 3,
            ..Default::default()
        };
        build_dataset(&scene, &table, &cfg, RunSeed(5)).unwrap()
    }

    #[test]
    fn dataset_counts_and_round_trip() {
        let ds = small_dataset();
        assert_eq!(ds.len() + ds.rejected, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ngfd");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes().unwrap(), fs::read(&path).unwrap());
        assert_eq!(back.manifest().count, ds.len());
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = TrajectoryDataset {
            dim: 6,
            z_dim: 2,
            dt: 1.0 / 30.0,
            encoding: EncodingMode::Pos,
            demos: vec![],
            entries: 0,
            per_entry: 0,
            rejected: 0,
            seed: 0,
        };
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 8);
        assert_eq!(TrajectoryDataset::from_bytes(&bytes, Some(&ds.manifest())).unwrap(), ds);
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let ds = small_dataset();
        let bytes = ds.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TrajectoryDataset::from_bytes(&bad, None), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(TrajectoryDataset::from_bytes(&bad, None), Err(Error::Format { offset: 4, .. })));
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(TrajectoryDataset::from_bytes(cut, None), Err(Error::Format { .. })));
    }

    #[test]
    fn different_seeds_give_different_starts() {
        let scene = single_circle_scene();
        let table = build_grasp_table(&scene, &[0], &IkConfig::default()).unwrap();
        let cfg = DatagenConfig {
            per_entry: 2,
            ..Default::default()
        };
        let a = build_dataset(&scene, &table, &cfg, RunSeed(1)).unwrap();
        let b = build_dataset(&scene, &table, &cfg, RunSeed(2)).unwrap();
        for da in &a.demos {
            for db in &b.demos {
                assert_ne!(da.traj.first().unwrap().q, db.traj.first().unwrap().q);
            }
        }
        assert_eq!(a, build_dataset(&scene, &table, &cfg, RunSeed(1)).unwrap());
    }
}
