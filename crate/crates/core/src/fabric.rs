//! Fabric calculus: energization, resolution of summed metric/force terms
//! into a joint acceleration, and the hand-built planner fabric.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::{ArmModel, Point2};
use crate::error::{Error, Result};
use crate::types::{cholesky, cholesky_solve, Accel, JointState, VELOCITY_EPS};

/// Default fixed damping.
pub const DEFAULT_BETA: f64 = 5.0;

/// Metric/force quartet plus damping scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct FabricTerms {
    pub m_g: DMatrix<f64>,
    pub f_g: DVector<f64>,
    pub m_f: DMatrix<f64>,
    /// `∂_qψ + β_f·q̇`.
    pub f_f: DVector<f64>,
    pub beta_f: f64,
    pub beta: f64,
}

impl FabricTerms {
    pub fn dim(&self) -> usize {
        self.f_g.len()
    }

    fn check(&self, d: usize) -> Result<()> {
        let ok = self.m_g.shape() == (d, d) && self.m_f.shape() == (d, d) && self.f_g.len() == d && self.f_f.len() == d;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("fabric terms do not match the state dimension"))
        }
    }
}

/// `α_L = −(q̇ᵀh)/(q̇ᵀq̇)`, or 0 at rest.
pub fn energization_coefficient(qdot: &DVector<f64>, h: &DVector<f64>) -> f64 {
    let n2 = qdot.norm_squared();
    if n2 <= VELOCITY_EPS * VELOCITY_EPS {
        0.0
    } else {
        -qdot.dot(h) / n2
    }
}

/// `h + α_L·q̇`, orthogonal to `q̇` away from rest.
pub fn energize(qdot: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
    h + qdot * energization_coefficient(qdot, h)
}

/// Energized pure geometry `energize(q̇, −M⁻¹f_g)`.
pub fn geometry_accel(m: &DMatrix<f64>, f_g: &DVector<f64>, qdot: &DVector<f64>) -> Result<DVector<f64>> {
    let l = cholesky(m)?;
    Ok(energize(qdot, &-cholesky_solve(&l, f_g)))
}

/// `energize(q̇, −M⁻¹f_g) − M⁻¹f_f − β·q̇` with `M = M_g + M_f`.
pub fn resolve_fabric(terms: &FabricTerms, state: &JointState) -> Result<Accel> {
    terms.check(state.dim())?;
    let l = cholesky(&(&terms.m_g + &terms.m_f))?;
    let h = -cholesky_solve(&l, &terms.f_g);
    let forcing = cholesky_solve(&l, &terms.f_f);
    Ok(Accel(energize(&state.qdot, &h) - forcing - &state.qdot * terms.beta))
}

/// Gradients of a scalar loss with respect to the fabric terms, given its
/// gradient with respect to the resolved acceleration.
#[derive(Debug, Clone, PartialEq)]
pub struct FabricGrad {
    /// Shared by `M_g` and `M_f` (not symmetrized).
    pub m: DMatrix<f64>,
    pub f_g: DVector<f64>,
    pub f_f: DVector<f64>,
}

/// Reverse pass of [`resolve_fabric`]. Energization is the projection
/// `P = I − q̂q̂ᵀ` away from rest and the identity at rest.
pub fn resolve_fabric_backward(terms: &FabricTerms, state: &JointState, upstream: &DVector<f64>) -> Result<FabricGrad> {
    terms.check(state.dim())?;
    if upstream.len() != state.dim() {
        return Err(Error::invalid("upstream gradient has wrong dimension"));
    }
    let l = cholesky(&(&terms.m_g + &terms.m_f))?;
    let qd = &state.qdot;
    let n2 = qd.norm_squared();
    let projected = if n2 <= VELOCITY_EPS * VELOCITY_EPS {
        upstream.clone()
    } else {
        upstream - qd * (qd.dot(upstream) / n2)
    };
    let u = cholesky_solve(&l, &projected);
    let w = cholesky_solve(&l, upstream);
    let x_g = cholesky_solve(&l, &terms.f_g);
    let x_f = cholesky_solve(&l, &terms.f_f);
    Ok(FabricGrad {
        m: &u * x_g.transpose() + &w * x_f.transpose(),
        f_g: -u,
        f_f: -w,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerFabricConfig {
    /// Attractor gain, 1/s².
    pub k_a: f64,
    /// Soft-norm sharpness of the attractor potential, 1/rad.
    pub attractor_scale: f64,
    /// Barrier gain, m⁴/s².
    pub k_r: f64,
    /// Barrier range around each obstacle point, m.
    pub r_0: f64,
    pub beta_p: f64,
}

impl Default for PlannerFabricConfig {
    fn default() -> Self {
        Self {
            k_a: 10.0,
            attractor_scale: 2.0,
            k_r: 3e-5,
            r_0: 0.05,
            beta_p: 9.0,
        }
    }
}

impl PlannerFabricConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.k_a, self.attractor_scale, self.k_r, self.r_0, self.beta_p];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("planner: gains, range and damping must be positive"))
        }
    }
}

/// Closest-approach distance floor of the barrier.
pub const BARRIER_FLOOR: f64 = 1e-4;

/// Planner acceleration toward `q_target`: soft-norm attractor
/// `−k_a·tanh(s‖e‖)·ê`, inverse-distance barrier on the end effector pulled
/// back through `J_posᵀ`, and damping `−β_p·q̇`.
pub fn planner_accel(
    state: &JointState,
    q_target: &DVector<f64>,
    obstacles: &[Point2],
    cfg: &PlannerFabricConfig,
    arm: &ArmModel,
) -> Result<Accel> {
    if q_target.len() != state.dim() || state.dim() != arm.dof() {
        return Err(Error::invalid("planner target dimension mismatch"));
    }
    if !q_target.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("planner target is not finite"));
    }
    let e = &state.q - q_target;
    let r = e.norm();
    let s = cfg.attractor_scale;
    // tanh(s·r)/r, continuous at r = 0.
    let gain = if r * s < 1e-8 { s } else { (s * r).tanh() / r };
    let mut a = &e * (-cfg.k_a * gain) - &state.qdot * cfg.beta_p;
    if !obstacles.is_empty() {
        let ee = arm.ee_pose(state.q.as_slice());
        let mut force = [0.0, 0.0];
        for p in obstacles {
            let (dx, dy) = (ee.x - p[0], ee.y - p[1]);
            let dist = dx.hypot(dy);
            if dist >= cfg.r_0 {
                continue;
            }
            let d = dist.max(BARRIER_FLOOR);
            let mag = cfg.k_r * (1.0 / d - 1.0 / cfg.r_0) / (d * d);
            if dist > 0.0 {
                force[0] += mag * dx / dist;
                force[1] += mag * dy / dist;
            }
        }
        let j = arm.jacobian(state.q.as_slice());
        for c in 0..state.dim() {
            a[c] += j[(0, c)] * force[0] + j[(1, c)] * force[1];
        }
    }
    Ok(Accel(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{rollout, IntegratorConfig};
    use crate::types::RunSeed;
    use rand::Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn random_spd<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    fn random_vec<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn energization_examples() {
        assert_eq!(energization_coefficient(&v(&[0.0, 1.0]), &v(&[1.0, 0.0])), 0.0);
        assert_eq!(energization_coefficient(&v(&[0.0, 2.0]), &v(&[1.0, 1.0])), -0.5);
        assert_eq!(energize(&v(&[0.0, 2.0]), &v(&[1.0, 1.0])), v(&[1.0, 0.0]));
        assert_eq!(energization_coefficient(&v(&[0.0, 0.0]), &v(&[3.0, -1.0])), 0.0);
        assert_eq!(energize(&v(&[1.0, 2.0]), &v(&[-2.0, -4.0])), v(&[0.0, 0.0]));
    }

    #[test]
    fn energized_accel_is_orthogonal() {
        let mut rng = RunSeed(1).stream("energize");
        for _ in 0..1000 {
            let d = rng.random_range(1..8);
            let qd = random_vec(d, &mut rng);
            let h = random_vec(d, &mut rng) * 10.0;
            let out = energize(&qd, &h);
            assert!(qd.dot(&out).abs() <= 1e-12 * qd.norm() * h.norm());
        }
    }

    #[test]
    fn resolve_examples() {
        let d = 3;
        let half = DMatrix::identity(d, d) * 0.5;
        let rest = JointState::at_rest(v(&[0.2, -0.1, 0.4]));
        let zero = FabricTerms {
            m_g: half.clone(),
            f_g: DVector::zeros(d),
            m_f: half.clone(),
            f_f: DVector::zeros(d),
            beta_f: 1.0,
            beta: DEFAULT_BETA,
        };
        assert_eq!(resolve_fabric(&zero, &rest).unwrap().0, DVector::zeros(d));

        let moving = JointState::new(v(&[0.2, -0.1, 0.4]), v(&[1.0, 0.5, -0.3]));
        let harmonic = FabricTerms {
            f_f: moving.q.clone(),
            beta_f: 0.0,
            beta: 0.0,
            ..zero
        };
        let a = resolve_fabric(&harmonic, &moving).unwrap().0;
        assert!((a + &moving.q).amax() < 1e-15);
    }

    #[test]
    fn resolve_residual_identity() {
        let mut rng = RunSeed(2).stream("resolve");
        for _ in 0..1000 {
            let d = rng.random_range(1..7);
            let state = JointState::new(random_vec(d, &mut rng), random_vec(d, &mut rng));
            let terms = FabricTerms {
                m_g: random_spd(d, &mut rng),
                f_g: random_vec(d, &mut rng),
                m_f: random_spd(d, &mut rng),
                f_f: random_vec(d, &mut rng),
                beta_f: rng.random_range(0.1..2.0),
                beta: DEFAULT_BETA,
            };
            let a = resolve_fabric(&terms, &state).unwrap().0;
            let m = &terms.m_g + &terms.m_f;
            let h = -cholesky_solve(&cholesky(&m).unwrap(), &terms.f_g);
            let alpha = energization_coefficient(&state.qdot, &h);
            let res = &m * (&a - &state.qdot * alpha + &state.qdot * terms.beta) + &terms.f_g + &terms.f_f;
            assert!(res.amax() <= 1e-9, "residual {}", res.amax());
        }
    }

    #[test]
    fn resolve_rejects_indefinite_metric() {
        let state = JointState::at_rest(v(&[0.0, 0.0]));
        let terms = FabricTerms {
            m_g: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]),
            f_g: DVector::zeros(2),
            m_f: DMatrix::identity(2, 2) * 0.5,
            f_f: DVector::zeros(2),
            beta_f: 1.0,
            beta: 5.0,
        };
        assert!(matches!(resolve_fabric(&terms, &state), Err(Error::NotSpd { pivot: 1 })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RunSeed(3).stream("resolve-bwd");
        for trial in 0..200 {
            let d = 3;
            let qdot = if trial % 10 == 0 { DVector::zeros(d) } else { random_vec(d, &mut rng) };
            let state = JointState::new(random_vec(d, &mut rng), qdot);
            let terms = FabricTerms {
                m_g: random_spd(d, &mut rng),
                f_g: random_vec(d, &mut rng),
                m_f: random_spd(d, &mut rng),
                f_f: random_vec(d, &mut rng),
                beta_f: 1.0,
                beta: DEFAULT_BETA,
            };
            let w = random_vec(d, &mut rng);
            let loss = |t: &FabricTerms| resolve_fabric(t, &state).unwrap().0.dot(&w);
            let g = resolve_fabric_backward(&terms, &state, &w).unwrap();
            let h = 1e-6;
            let check = |fd: f64, an: f64| {
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "fd {fd} analytic {an}");
            };
            for i in 0..d {
                let mut p = terms.clone();
                let mut m = terms.clone();
                p.f_g[i] += h;
                m.f_g[i] -= h;
                check((loss(&p) - loss(&m)) / (2.0 * h), g.f_g[i]);
                let mut p = terms.clone();
                let mut m = terms.clone();
                p.f_f[i] += h;
                m.f_f[i] -= h;
                check((loss(&p) - loss(&m)) / (2.0 * h), g.f_f[i]);
                for j in 0..d {
                    // Perturb a single entry: M need not stay symmetric for the check.
                    let mut p = terms.clone();
                    let mut m = terms.clone();
                    p.m_f[(i, j)] += h;
                    m.m_f[(i, j)] -= h;
                    let lp = {
                        let mm = &p.m_g + &p.m_f;
                        let lu = mm.lu();
                        let hh = -lu.solve(&p.f_g).unwrap();
                        (energize(&state.qdot, &hh) - lu.solve(&p.f_f).unwrap() - &state.qdot * p.beta).dot(&w)
                    };
                    let lm = {
                        let mm = &m.m_g + &m.m_f;
                        let lu = mm.lu();
                        let hh = -lu.solve(&m.f_g).unwrap();
                        (energize(&state.qdot, &hh) - lu.solve(&m.f_f).unwrap() - &state.qdot * m.beta).dot(&w)
                    };
                    check((lp - lm) / (2.0 * h), g.m[(i, j)]);
                }
            }
        }
    }

    fn planar_arm(links: Vec<f64>) -> ArmModel {
        let n = links.len() + 2;
        ArmModel {
            link_lengths: links,
            home: vec![0.0; n],
            ..ArmModel::default()
        }
    }

    #[test]
    fn planner_at_target_is_zero() {
        let arm = ArmModel::default();
        let q = arm.home();
        let a = planner_accel(&JointState::at_rest(q.clone()), &q, &[], &PlannerFabricConfig::default(), &arm).unwrap();
        assert_eq!(a.0, DVector::zeros(6));
    }

    #[test]
    fn planner_converges_in_one_dof() {
        let arm = planar_arm(vec![0.5]);
        let cfg = PlannerFabricConfig::default();
        let target = v(&[1.2, 0.3, 0.3]);
        let icfg = IntegratorConfig {
            max_steps: 301,
            ..Default::default()
        };
        let traj = rollout(
            |s| planner_accel(s, &target, &[], &cfg, &arm),
            JointState::at_rest(v(&[-0.8, 0.3, 0.3])),
            &icfg,
            |_, _| false,
        )
        .unwrap();
        assert!((traj.last().unwrap().q[0] - 1.2).abs() <= 1e-3);
    }

    #[test]
    fn planner_avoids_point_on_straight_path() {
        let arm = ArmModel::default();
        let cfg = PlannerFabricConfig::default();
        let q0 = arm.home();
        let mut q1 = q0.clone();
        q1[0] += 0.6;
        let mid = (&q0 + &q1) * 0.5;
        let obstacle = arm.ee_pose(mid.as_slice()).position();
        let icfg = IntegratorConfig {
            dt: 1.0 / 300.0,
            max_steps: 3000,
            ..Default::default()
        };
        let traj = rollout(
            |s| planner_accel(s, &q1, &[obstacle], &cfg, &arm),
            JointState::at_rest(q0.clone()),
            &icfg,
            |_, _| false,
        )
        .unwrap();
        let min_d = traj
            .states
            .iter()
            .map(|s| {
                let p = arm.ee_pose(s.q.as_slice());
                (p.x - obstacle[0]).hypot(p.y - obstacle[1])
            })
            .fold(f64::INFINITY, f64::min);
        assert!(min_d > 0.005, "closest approach {min_d}");
    }
}
