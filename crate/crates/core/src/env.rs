//! Planar desk world: a revolute chain with a two-finger gripper, parametric
//! objects on a table, analytic grasp targets, and the grasp predicate.
//!
//! The state vector is `[arm joints..., finger_a, finger_b]`. Finger joints are
//! opening half-angles and do not move the end-effector frame.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{wrap_angle, RunSeed};

/// Number of approach angles tried per object pose.
pub const GRASP_VARIANTS: usize = 7;

pub type Point2 = [f64; 2];

/// Planar pose: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn position(&self) -> Point2 {
        [self.x, self.y]
    }

    /// Maps a point from this frame to the parent frame.
    pub fn transform(&self, p: Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Maps a parent-frame point into this frame.
    pub fn inverse_transform(&self, p: Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Position distance in meters plus `angle_weight` times the wrapped heading difference.
    pub fn distance(&self, other: &Pose2, angle_weight: f64) -> f64 {
        let dp = ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt();
        dp + angle_weight * wrap_angle(self.theta - other.theta).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmModel {
    /// Link lengths from base to wrist, meters.
    pub link_lengths: Vec<f64>,
    /// Finger length, meters; fingertip separation is `ℓ(sin a + sin b)`.
    pub finger_length: f64,
    /// Distance from the end-effector origin to the object surface at grasp.
    pub pad_offset: f64,
    /// Fingertip separation is the object width minus this, meters.
    pub grip_interference: f64,
    /// Finger half-angle used away from the object, rad.
    pub open_gripper: f64,
    /// Fixed start configuration of every episode and IK seed for grasps.
    pub home: Vec<f64>,
}

impl Default for ArmModel {
    fn default() -> Self {
        Self {
            link_lengths: vec![0.30, 0.25, 0.20, 0.15],
            finger_length: 0.08,
            pad_offset: 0.02,
            grip_interference: 0.002,
            open_gripper: 0.9,
            home: vec![-0.5, 1.2, -0.2, -0.5, 0.9, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub ee: Pose2,
    /// Base, every joint, and the end-effector origin.
    pub joints: Vec<Point2>,
}

impl ArmModel {
    pub fn validate(&self) -> Result<()> {
        if self.link_lengths.is_empty() || self.link_lengths.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::invalid("arm: link lengths must be non-negative and non-empty"));
        }
        if self.home.len() != self.dof() {
            return Err(Error::invalid("arm: home configuration has wrong dimension"));
        }
        Ok(())
    }

    pub fn arm_dof(&self) -> usize {
        self.link_lengths.len()
    }

    /// Arm joints plus two finger joints.
    pub fn dof(&self) -> usize {
        self.arm_dof() + 2
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn home(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.home)
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Kinematics {
        let mut joints = Vec::with_capacity(self.arm_dof() + 1);
        let (mut x, mut y, mut th) = (0.0, 0.0, 0.0);
        joints.push([x, y]);
        for (i, &l) in self.link_lengths.iter().enumerate() {
            th += q[i];
            x += l * th.cos();
            y += l * th.sin();
            joints.push([x, y]);
        }
        Kinematics {
            ee: Pose2::new(x, y, th),
            joints,
        }
    }

    pub fn ee_pose(&self, q: &[f64]) -> Pose2 {
        self.forward_kinematics(q).ee
    }

    /// `3 × D` Jacobian of `(x, y, θ)`; finger columns are zero.
    pub fn jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        let k = self.forward_kinematics(q);
        let mut j = DMatrix::zeros(3, self.dof());
        for i in 0..self.arm_dof() {
            let [px, py] = k.joints[i];
            j[(0, i)] = -(k.ee.y - py);
            j[(1, i)] = k.ee.x - px;
            j[(2, i)] = 1.0;
        }
        j
    }

    /// Fingertip separation for the two finger joints of `q`.
    pub fn finger_separation(&self, q: &[f64]) -> f64 {
        let n = self.arm_dof();
        self.finger_length * (q[n].sin() + q[n + 1].sin())
    }

    /// Necessary condition for a reachable EE pose: the wrist lies inside the
    /// annulus spanned by the proximal links.
    pub fn can_reach(&self, target: &Pose2) -> bool {
        let n = self.arm_dof();
        let last = self.link_lengths[n - 1];
        let wx = target.x - last * target.theta.cos();
        let wy = target.y - last * target.theta.sin();
        let r = (wx * wx + wy * wy).sqrt();
        let prox = &self.link_lengths[..n - 1];
        let outer: f64 = prox.iter().sum();
        let longest = prox.iter().cloned().fold(0.0, f64::max);
        let inner = (2.0 * longest - outer).max(0.0);
        if n == 1 {
            return r <= 1e-9;
        }
        r <= outer && r >= inner
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Circle { radius: f64 },
    Box { half_x: f64, half_y: f64 },
    /// Segment along the local x axis, swept by `radius`.
    Capsule { half_length: f64, radius: f64 },
}

impl Shape {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Circle { radius } => radius > 0.0,
            Shape::Box { half_x, half_y } => half_x > 0.0 && half_y > 0.0,
            Shape::Capsule { half_length, radius } => half_length >= 0.0 && radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid shape size parameters: {self:?}")))
        }
    }

    /// Rotationally symmetric shapes are grasped along the base-to-object ray.
    pub fn is_round(&self) -> bool {
        matches!(self, Shape::Circle { .. })
    }

    /// Signed distance of a body-frame point to the boundary (negative inside).
    pub fn signed_distance(&self, p: Point2) -> f64 {
        match *self {
            Shape::Circle { radius } => (p[0] * p[0] + p[1] * p[1]).sqrt() - radius,
            Shape::Box { half_x, half_y } => {
                let dx = p[0].abs() - half_x;
                let dy = p[1].abs() - half_y;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                outside + dx.max(dy).min(0.0)
            }
            Shape::Capsule { half_length, radius } => {
                let cx = p[0].clamp(-half_length, half_length);
                ((p[0] - cx).powi(2) + p[1] * p[1]).sqrt() - radius
            }
        }
    }

    /// Support function: `max_{p ∈ shape} p·u` for a body-frame unit direction.
    pub fn support(&self, u: Point2) -> f64 {
        match *self {
            Shape::Circle { radius } => radius,
            Shape::Box { half_x, half_y } => half_x * u[0].abs() + half_y * u[1].abs(),
            Shape::Capsule { half_length, radius } => half_length * u[0].abs() + radius,
        }
    }

    fn perimeter(&self) -> f64 {
        match *self {
            Shape::Circle { radius } => TAU * radius,
            Shape::Box { half_x, half_y } => 4.0 * (half_x + half_y),
            Shape::Capsule { half_length, radius } => 4.0 * half_length + TAU * radius,
        }
    }

    /// Boundary point and outward normal at arc length `s` (body frame).
    fn boundary_at(&self, s: f64) -> (Point2, Point2) {
        match *self {
            Shape::Circle { radius } => {
                let a = s / radius;
                let n = [a.cos(), a.sin()];
                ([radius * n[0], radius * n[1]], n)
            }
            Shape::Box { half_x, half_y } => {
                // Counter-clockwise from (hx, -hy).
                let sides = [2.0 * half_y, 2.0 * half_x, 2.0 * half_y, 2.0 * half_x];
                let mut t = s;
                for (k, &len) in sides.iter().enumerate() {
                    if t <= len || k == 3 {
                        return match k {
                            0 => ([half_x, -half_y + t], [1.0, 0.0]),
                            1 => ([half_x - t, half_y], [0.0, 1.0]),
                            2 => ([-half_x, half_y - t], [-1.0, 0.0]),
                            _ => ([-half_x + t, -half_y], [0.0, -1.0]),
                        };
                    }
                    t -= len;
                }
                unreachable!()
            }
            Shape::Capsule { half_length, radius } => {
                let arc = PI * radius;
                let straight = 2.0 * half_length;
                let mut t = s;
                if t <= arc {
                    let a = -PI / 2.0 + t / radius;
                    let n = [a.cos(), a.sin()];
                    return ([half_length + radius * n[0], radius * n[1]], n);
                }
                t -= arc;
                if t <= straight {
                    return ([half_length - t, radius], [0.0, 1.0]);
                }
                t -= straight;
                if t <= arc {
                    let a = PI / 2.0 + t / radius;
                    let n = [a.cos(), a.sin()];
                    return ([-half_length + radius * n[0], radius * n[1]], n);
                }
                t -= arc;
                ([-half_length + t.min(straight), -radius], [0.0, -1.0])
            }
        }
    }

    /// `count` body-frame points equally spaced by arc length, with outward normals.
    pub fn boundary_points(&self, count: usize) -> Vec<(Point2, Point2)> {
        let per = self.perimeter();
        (0..count)
            .map(|i| self.boundary_at(per * i as f64 / count as f64))
            .collect()
    }
}

/// How point sets are observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sensing {
    /// Boundary points sampled per object.
    pub points: usize,
    /// Keep only points whose outward normal faces the camera.
    pub partial_view: bool,
    pub camera: Point2,
}

impl Default for Sensing {
    fn default() -> Self {
        Self {
            points: 64,
            partial_view: false,
            camera: [0.55, -1.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape_id: u32,
    pub shape: Shape,
    pub pose: Pose2,
    /// Observed boundary points in the world (robot base) frame.
    pub points: Vec<Point2>,
}

impl SceneObject {
    pub fn new(shape_id: u32, shape: Shape, pose: Pose2, sensing: &Sensing) -> Self {
        let mut points: Vec<Point2> = shape
            .boundary_points(sensing.points)
            .into_iter()
            .filter_map(|(p, n)| {
                let w = pose.transform(p);
                if sensing.partial_view {
                    let (s, c) = pose.theta.sin_cos();
                    let nw = [c * n[0] - s * n[1], s * n[0] + c * n[1]];
                    let to_cam = [sensing.camera[0] - w[0], sensing.camera[1] - w[1]];
                    if nw[0] * to_cam[0] + nw[1] * to_cam[1] <= 0.0 {
                        return None;
                    }
                }
                Some(w)
            })
            .collect();
        if points.is_empty() {
            // Degenerate view: fall back to the point nearest the camera.
            let nearest = shape
                .boundary_points(sensing.points.max(1))
                .into_iter()
                .map(|(p, _)| pose.transform(p))
                .min_by(|a, b| {
                    let da = (a[0] - sensing.camera[0]).hypot(a[1] - sensing.camera[1]);
                    let db = (b[0] - sensing.camera[0]).hypot(b[1] - sensing.camera[1]);
                    da.total_cmp(&db)
                })
                .unwrap();
            points.push(nearest);
        }
        Self {
            shape_id,
            shape,
            pose,
            points,
        }
    }

    pub fn centroid(&self) -> Point2 {
        self.pose.position()
    }

    /// Signed distance of a world point to the object boundary.
    pub fn signed_distance(&self, p: Point2) -> f64 {
        self.shape.signed_distance(self.pose.inverse_transform(p))
    }

    /// Heading of approach variant 0: the body x axis, or the base-to-object
    /// ray for round shapes.
    pub fn canonical_approach(&self) -> f64 {
        if self.shape.is_round() {
            self.pose.y.atan2(self.pose.x)
        } else {
            self.pose.theta
        }
    }

    fn support_world(&self, u: Point2) -> f64 {
        let (s, c) = self.pose.theta.sin_cos();
        self.shape.support([c * u[0] + s * u[1], -s * u[0] + c * u[1]])
    }
}

/// End-effector target and finger closure for one grasp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspSpec {
    pub ee: Pose2,
    /// Finger half-angle (both fingers), rad.
    pub closure: f64,
    pub variant: usize,
}

/// Approach offsets in trial order: straight on first, then alternating outward.
pub fn approach_offsets() -> [f64; GRASP_VARIANTS] {
    let step = TAU / GRASP_VARIANTS as f64;
    [0.0, step, -step, 2.0 * step, -2.0 * step, 3.0 * step, -3.0 * step]
}

/// Geometric grasp for approach variant `variant`: the EE faces the centroid
/// along the approach heading, `pad_offset` off the surface, fingers closed to
/// the object width minus the interference.
pub fn grasp_candidate(arm: &ArmModel, object: &SceneObject, variant: usize) -> Result<GraspSpec> {
    if variant >= GRASP_VARIANTS {
        return Err(Error::invalid("grasp variant out of range"));
    }
    let heading = wrap_angle(object.canonical_approach() + approach_offsets()[variant]);
    let u = [heading.cos(), heading.sin()];
    let n = [-u[1], u[0]];
    let near = object.support_world([-u[0], -u[1]]);
    let width = object.support_world(n) + object.support_world([-n[0], -n[1]]);
    let standoff = near + arm.pad_offset;
    let c = object.centroid();
    let ee = Pose2::new(c[0] - standoff * u[0], c[1] - standoff * u[1], heading);
    let sep = (width - arm.grip_interference) / 2.0 / arm.finger_length;
    if !(0.0..=1.0).contains(&sep) {
        return Err(Error::NoGrasp(format!(
            "object width {width:.3} m does not fit the gripper"
        )));
    }
    Ok(GraspSpec {
        ee,
        closure: sep.asin(),
        variant,
    })
}

/// Canonical grasp (variant 0); errors when its EE pose cannot be reached.
pub fn grasp_target(arm: &ArmModel, object: &SceneObject) -> Result<GraspSpec> {
    let g = grasp_candidate(arm, object, 0)?;
    if !arm.can_reach(&g.ee) {
        return Err(Error::NoGrasp(format!(
            "grasp pose ({:.3}, {:.3}, {:.3}) is out of reach",
            g.ee.x, g.ee.y, g.ee.theta
        )));
    }
    Ok(g)
}

/// Every geometrically valid approach variant, in trial order.
pub fn grasp_menu(arm: &ArmModel, object: &SceneObject) -> Vec<GraspSpec> {
    (0..GRASP_VARIANTS)
        .filter_map(|v| grasp_candidate(arm, object, v).ok())
        .collect()
}

/// Axis-aligned rectangle in a grasp frame (x along the approach heading).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproachRegion {
    pub frame: Pose2,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
}

impl ApproachRegion {
    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        let l = self.frame.inverse_transform(p);
        l[0] >= self.x_range[0] - tol
            && l[0] <= self.x_range[1] + tol
            && l[1] >= self.y_range[0] - tol
            && l[1] <= self.y_range[1] + tol
    }
}

/// Region pre-grasp poses are drawn from: the object's bounding box in the
/// grasp frame, inflated by 25%, moved `clearance` back along the approach.
pub fn approach_region(object: &SceneObject, grasp: &GraspSpec, clearance: f64) -> ApproachRegion {
    let u = [grasp.ee.theta.cos(), grasp.ee.theta.sin()];
    let n = [-u[1], u[0]];
    let front = object.support_world(u);
    let back = object.support_world([-u[0], -u[1]]);
    let left = object.support_world(n);
    let right = object.support_world([-n[0], -n[1]]);
    let depth = 1.25 * (front + back);
    let lateral = 1.25 * (left + right);
    let mid = 0.5 * (left - right);
    let c = object.centroid();
    ApproachRegion {
        frame: Pose2::new(c[0], c[1], grasp.ee.theta),
        x_range: [-back - clearance - depth, -back - clearance],
        y_range: [mid - 0.5 * lateral, mid + 0.5 * lateral],
    }
}

/// Uniform EE pose in the approach region, facing along the approach heading.
pub fn sample_in_region<R: Rng + ?Sized>(region: &ApproachRegion, rng: &mut R) -> Pose2 {
    let a: f64 = rng.random();
    let b: f64 = rng.random();
    let lx = region.x_range[0] + a * (region.x_range[1] - region.x_range[0]);
    let ly = region.y_range[0] + b * (region.y_range[1] - region.y_range[0]);
    let p = region.frame.transform([lx, ly]);
    Pose2::new(p[0], p[1], region.frame.theta)
}

/// Pre-grasp pose sampled relative to the canonical grasp of `object`.
pub fn sample_above_region<R: Rng + ?Sized>(
    arm: &ArmModel,
    object: &SceneObject,
    clearance: f64,
    rng: &mut R,
) -> Result<Pose2> {
    let g = grasp_candidate(arm, object, 0)?;
    Ok(sample_in_region(&approach_region(object, &g, clearance), rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkConfig {
    pub position_tolerance: f64,
    pub angle_tolerance: f64,
    pub max_iterations: usize,
    pub damping: f64,
    /// Largest joint update per iteration, rad.
    pub max_step: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            position_tolerance: 1e-4,
            angle_tolerance: 1e-3,
            max_iterations: 500,
            damping: 0.02,
            max_step: 0.2,
        }
    }
}

/// Damped least squares on the arm joints; finger joints are copied from `q_init`.
pub fn ik_solve(arm: &ArmModel, target: &Pose2, q_init: &[f64], cfg: &IkConfig) -> Result<DVector<f64>> {
    let mut q = DVector::from_column_slice(q_init);
    let n = arm.arm_dof();
    let (mut pe, mut ae) = (f64::INFINITY, f64::INFINITY);
    let lam2 = cfg.damping * cfg.damping;
    for it in 0..=cfg.max_iterations {
        let ee = arm.ee_pose(q.as_slice());
        let e = Vector3::new(target.x - ee.x, target.y - ee.y, wrap_angle(target.theta - ee.theta));
        pe = (e[0] * e[0] + e[1] * e[1]).sqrt();
        ae = e[2].abs();
        if pe <= cfg.position_tolerance && ae <= cfg.angle_tolerance {
            return Ok(q);
        }
        if it == cfg.max_iterations || !pe.is_finite() {
            break;
        }
        let j = arm.jacobian(q.as_slice()).columns(0, n).into_owned();
        let jjt: Matrix3<f64> = Matrix3::from_iterator((&j * j.transpose()).iter().cloned());
        let Some(inv) = (jjt + Matrix3::identity() * lam2).try_inverse() else {
            break;
        };
        let w = inv * e;
        let mut dq = j.transpose() * DVector::from_column_slice(w.as_slice());
        let m = dq.amax();
        if m > cfg.max_step {
            dq *= cfg.max_step / m;
        }
        for i in 0..n {
            q[i] += dq[i];
        }
    }
    Err(Error::NoIk {
        iterations: cfg.max_iterations,
        position_error: pe,
        angle_error: ae,
    })
}

/// Tolerances of the grasp predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraspTolerance {
    pub position: f64,
    pub angle: f64,
    pub closure: f64,
}

impl Default for GraspTolerance {
    fn default() -> Self {
        Self {
            position: 0.01,
            angle: 0.1,
            closure: 0.05,
        }
    }
}

impl GraspTolerance {
    /// Inclusive comparison of `q` against one grasp.
    pub fn matches(&self, arm: &ArmModel, q: &[f64], g: &GraspSpec) -> bool {
        let ee = arm.ee_pose(q);
        let n = arm.arm_dof();
        let dp = (ee.x - g.ee.x).hypot(ee.y - g.ee.y);
        let da = wrap_angle(ee.theta - g.ee.theta).abs();
        dp <= self.position
            && da <= self.angle
            && (q[n] - g.closure).abs() <= self.closure
            && (q[n + 1] - g.closure).abs() <= self.closure
    }
}

/// True iff `q` realizes one of the object's approach grasps within tolerance.
pub fn grasp_success(arm: &ArmModel, q: &[f64], object: &SceneObject, tol: &GraspTolerance) -> bool {
    grasp_menu(arm, object).iter().any(|g| tol.matches(arm, q, g))
}

/// Full joint configuration for a grasp: IK for the arm, closure on both fingers.
pub fn grasp_configuration(arm: &ArmModel, grasp: &GraspSpec, ik: &IkConfig) -> Result<DVector<f64>> {
    if !arm.can_reach(&grasp.ee) {
        return Err(Error::NoIk {
            iterations: 0,
            position_error: f64::INFINITY,
            angle_error: f64::INFINITY,
        });
    }
    let mut q = ik_solve(arm, &grasp.ee, &arm.home, ik)?;
    let n = arm.arm_dof();
    q[n] = grasp.closure;
    q[n + 1] = grasp.closure;
    Ok(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub name: String,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseGrid {
    pub nx: usize,
    pub ny: usize,
    /// Headings are drawn uniformly from this range, one per grid cell.
    pub theta_range: [f64; 2],
    /// Inset of the grid from the table edges, meters.
    pub margin: f64,
}

impl Default for PoseGrid {
    fn default() -> Self {
        Self {
            nx: 5,
            ny: 5,
            theta_range: [-0.35, 0.35],
            margin: 0.05,
        }
    }
}

/// Scene configuration (the `--config` JSON `scene` block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub arm: ArmModel,
    pub shapes: Vec<ShapeConfig>,
    /// `[x_min, x_max]`, meters.
    pub table_x: [f64; 2],
    pub table_y: [f64; 2],
    pub grid: PoseGrid,
    pub sensing: Sensing,
    /// Distance of the pre-grasp region behind the object, meters.
    pub clearance: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            arm: ArmModel::default(),
            shapes: vec![
                ShapeConfig {
                    name: "cylinder".into(),
                    shape: Shape::Circle { radius: 0.035 },
                },
                ShapeConfig {
                    name: "box".into(),
                    shape: Shape::Box {
                        half_x: 0.035,
                        half_y: 0.03,
                    },
                },
                ShapeConfig {
                    name: "capsule".into(),
                    shape: Shape::Capsule {
                        half_length: 0.012,
                        radius: 0.032,
                    },
                },
            ],
            table_x: [0.2, 0.9],
            table_y: [-0.4, 0.4],
            grid: PoseGrid::default(),
            sensing: Sensing::default(),
            clearance: 0.15,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        if self.shapes.is_empty() {
            return Err(Error::invalid("scene: no shapes configured"));
        }
        for s in &self.shapes {
            s.shape.validate()?;
        }
        if !(self.table_x[0] < self.table_x[1]) || !(self.table_y[0] < self.table_y[1]) {
            return Err(Error::invalid("scene: empty table bounds"));
        }
        if self.grid.nx == 0 || self.grid.ny == 0 || self.sensing.points == 0 {
            return Err(Error::invalid("scene: grid and point count must be positive"));
        }
        Ok(())
    }

    pub fn shape_id(&self, name: &str) -> Result<u32> {
        self.shapes
            .iter()
            .position(|s| s.name == name)
            .map(|i| i as u32)
            .ok_or_else(|| Error::invalid(format!("unknown shape {name:?}")))
    }

    pub fn make_object(&self, shape_id: u32, pose: Pose2) -> Result<SceneObject> {
        let cfg = self
            .shapes
            .get(shape_id as usize)
            .ok_or_else(|| Error::invalid(format!("shape id {shape_id} out of range")))?;
        Ok(SceneObject::new(shape_id, cfg.shape, pose, &self.sensing))
    }

    /// Grid poses: cell positions across the inset table, one seeded heading per cell.
    pub fn grid_poses(&self) -> Vec<Pose2> {
        let g = &self.grid;
        let mut rng = RunSeed(self.seed).stream("scene-grid");
        let lin = |lo: f64, hi: f64, n: usize, i: usize| {
            if n == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let (x0, x1) = (self.table_x[0] + g.margin, self.table_x[1] - g.margin);
        let (y0, y1) = (self.table_y[0] + g.margin, self.table_y[1] - g.margin);
        let mut out = Vec::with_capacity(g.nx * g.ny);
        for i in 0..g.nx {
            for j in 0..g.ny {
                let theta = g.theta_range[0] + rng.random::<f64>() * (g.theta_range[1] - g.theta_range[0]);
                out.push(Pose2::new(lin(x0, x1, g.nx, i), lin(y0, y1, g.ny, j), theta));
            }
        }
        out
    }

    /// Uniform pose on the inset table with heading in the grid's range.
    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> Pose2 {
        let m = self.grid.margin;
        let x = self.table_x[0] + m + rng.random::<f64>() * (self.table_x[1] - self.table_x[0] - 2.0 * m);
        let y = self.table_y[0] + m + rng.random::<f64>() * (self.table_y[1] - self.table_y[0] - 2.0 * m);
        let r = self.grid.theta_range;
        let theta = r[0] + rng.random::<f64>() * (r[1] - r[0]);
        Pose2::new(x, y, theta)
    }
}
