//! Acceptance suite. Prints one PASS/FAIL line per criterion with its pinned
//! tolerances and exits non-zero when any criterion fails. Criterion numbers
//! given as arguments select a subset, e.g.
//! `cargo test --test acceptance -- 1 2 3`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use fabricgrasp::datagen::{min_clearance, GraspTable, TrajectoryDataset};
use fabricgrasp::encoder::{
    autoencoder_loss_grad, chamfer, point_sets_to_bytes, save_autoencoder, train_autoencoder, EncoderArchitecture,
    PointSet, SetDecoder, SetEncoder,
};
use fabricgrasp::env::{grasp_success, GraspTolerance, Point2};
use fabricgrasp::fabric::{energization_coefficient, geometry_accel, resolve_fabric, FabricTerms, DEFAULT_BETA};
use fabricgrasp::integrator::{rk2_step, IntegratorConfig, CONTROL_DT};
use fabricgrasp::nn::{Activation, DiffNet, NetSpec, OutputActivation, RffSpec};
use fabricgrasp::pipeline::{
    closest_encoding_group, encode_dataset, evaluate, run_episode, Controller, EvalReport, EvalSubject, ObjectEncoder, PipelineConfig,
    SurrogateExpert,
};
use fabricgrasp::policy::{Arch, Learner, NgfPolicy, Policy, PolicyArchitecture, ZNorm};
use fabricgrasp::trainer::{nearest_trajectory, train, ExpertGains, VELOCITY_WEIGHT};
use fabricgrasp::{Accel, EncodingMode, JointState, RunSeed};

const DESK_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.json");

// Criterion 1.
const GRAD_TOL: f64 = 1e-4;
const GRAD_TOL_SECOND: f64 = 1e-3;
const GRAD_FLOOR: f64 = 1e-5;
const GRAD_PROBES_MIN: usize = 1000;
const GRAD_LIMIT_S: f64 = 120.0;
// Criterion 2.
const HD2_TOL: f64 = 1e-12;
const ENERGY_TOL: f64 = 1e-3;
const PATH_TOL: f64 = 1e-2;
const CONVERGE_QDOT: f64 = 1e-3;
const CONVERGE_Q: f64 = 1e-2;
const CONVERGE_LIMIT_S: f64 = 30.0;
/// Scale of the quadratic potential's Hessian, whose eigenvalues are at least half of it.
const PSI_STIFFNESS: f64 = 10.0;
const RESIDUAL_TOL: f64 = 1e-9;
const FABRIC_LIMIT_S: f64 = 180.0;
// Criterion 3.
const RK2_TOL: f64 = 1e-12;
// Criterion 4.
const COLLAPSE_TOL: f64 = 1e-2;
const COLLAPSE_NOISE: f64 = 0.05;
const COLLAPSE_TRIALS: usize = 100;
const COLLAPSE_SETTLE_STEPS: usize = 90;
// Criterion 5.
const DATASET_SHAPES: usize = 2;
const DATASET_POSES: usize = 25;
const DATASET_PER_POSE: usize = 32;
const DATASET_LIMIT_S: f64 = 600.0;
// Criterion 6.
const CORPUS_SIZE: usize = 2000;
const ENCODER_RATIO: f64 = 0.2;
const ENCODER_LIMIT_S: f64 = 600.0;
// Criterion 7.
const ORDERING_MARGIN: f64 = 0.05;
const HELDOUT_MIN: f64 = 0.60;
const EVAL_TRIALS: usize = 100;
const E2E_LIMIT_S: f64 = 45.0 * 60.0;
const FIXTURE_MIN: f64 = 0.80;

struct Line {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: &'static str, title: &'static str, pass: bool, detail: String) -> Line {
    let l = Line { id, title, pass, detail };
    println!(
        "{} [{}] {}: {}",
        if l.pass { "PASS" } else { "FAIL" },
        l.id,
        l.title,
        l.detail
    );
    l
}

fn out_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn desk_config() -> PipelineConfig {
    let cfg: PipelineConfig = serde_json::from_str(&fs::read_to_string(DESK_CONFIG).unwrap()).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(GRAD_FLOOR)
}

fn random_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn dvec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_vec(random_vec(n, scale, rng))
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.5
}

/// Central difference of `f` along parameter `i` of `theta`.
fn central<F: FnMut(&[f64]) -> f64>(theta: &[f64], i: usize, h: f64, mut f: F) -> f64 {
    let mut t = theta.to_vec();
    t[i] = theta[i] + h;
    let p = f(&t);
    t[i] = theta[i] - h;
    let m = f(&t);
    (p - m) / (2.0 * h)
}

#[derive(Default)]
struct Worst(BTreeMap<&'static str, (usize, f64)>);

impl Worst {
    fn add(&mut self, case: &'static str, e: f64) {
        let w = self.0.entry(case).or_insert((0, 0.0));
        w.0 += 1;
        w.1 = w.1.max(e);
    }
}

fn gradient_suite() -> Line {
    let start = Instant::now();
    let mut rng = RunSeed(101).stream("acceptance-grad");
    let h = 1e-5;
    let specs = [
        (Activation::Elu, OutputActivation::Linear, None),
        (Activation::Elu, OutputActivation::PositiveElu, Some(16)),
        (Activation::Relu, OutputActivation::Linear, Some(8)),
        (Activation::Elu, OutputActivation::Linear, Some(32)),
    ];
    let mut nets = Vec::new();
    let mut scalar_nets = Vec::new();
    for (k, &(hidden_act, output_act, rff)) in specs.iter().enumerate() {
        let spec = |n_out| NetSpec {
            n_in: 5,
            hidden: vec![12, 10],
            n_out,
            hidden_act,
            output_act,
            rff: rff.map(|features| RffSpec { features, sigma: 1.0 }),
        };
        nets.push(DiffNet::new(&spec(3 + k), &mut rng).unwrap());
        if hidden_act == Activation::Elu {
            scalar_nets.push(DiffNet::new(&spec(1), &mut rng).unwrap());
        }
    }
    let mut worst = Worst::default();

    for probe in 0..300 {
        let net = &nets[probe % nets.len()];
        let x = random_vec(5, 1.0, &mut rng);
        let u = random_vec(net.n_out(), 1.0, &mut rng);
        let theta = net.params();
        let i = rng.random_range(0..theta.len());
        let an = net.param_grad(&x, &u).unwrap().flat()[i];
        let fd = central(&theta, i, h, |t| {
            let mut n = net.clone();
            n.set_params(t).unwrap();
            n.forward(&x).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum()
        });
        worst.add("param_grad", rel_err(fd, an));
    }
    for probe in 0..300 {
        let net = &scalar_nets[probe % scalar_nets.len()];
        let x = random_vec(5, 1.0, &mut rng);
        let j = rng.random_range(0..5);
        let an = net.input_grad(&x).unwrap()[j];
        let fd = central(&x, j, h, |x| net.forward(x).unwrap()[0]);
        worst.add("input_grad", rel_err(fd, an));
    }
    for probe in 0..200 {
        let net = &scalar_nets[probe % scalar_nets.len()];
        let x = random_vec(5, 1.0, &mut rng);
        let v = random_vec(5, 1.0, &mut rng);
        let theta = net.params();
        let i = rng.random_range(0..theta.len());
        let an = net.mixed_second_order(&x, &v).unwrap().flat()[i];
        let fd = central(&theta, i, h, |t| {
            let mut n = net.clone();
            n.set_params(t).unwrap();
            n.input_grad(&x).unwrap().iter().zip(&v).map(|(a, b)| a * b).sum()
        });
        worst.add("mixed_second_order", rel_err(fd, an));
    }

    let arch = PolicyArchitecture {
        ngf_hidden: vec![16, 16],
        rff_features: 16,
        ngf_gain: 10.0,
        ..PolicyArchitecture::desk()
    };
    let (dim, z_dim) = (6, 4);
    let zn = ZNorm {
        shift: vec![0.1; z_dim],
        scale: vec![2.0; z_dim],
    };
    let policies: Vec<Policy> = (0..4)
        .map(|_| Policy::new(Arch::Ngf, EncodingMode::Pcd, dim, zn.clone(), &arch, &mut rng).unwrap())
        .collect();
    for probe in 0..200 {
        let policy = &policies[probe % policies.len()];
        let state = JointState::new(dvec(dim, 1.0, &mut rng), dvec(dim, 1.0, &mut rng));
        let z = random_vec(z_dim, 1.0, &mut rng);
        let target = dvec(dim, 5.0, &mut rng);
        let theta = policy.params();
        let i = rng.random_range(0..theta.len());
        let an = policy.loss_and_grad(&state, &z, &target).unwrap().1[i];
        let fd = central(&theta, i, h, |t| {
            let mut p = policy.clone();
            p.set_params(t).unwrap();
            p.loss_and_grad(&state, &z, &target).unwrap().0
        });
        worst.add("ngf_loss", rel_err(fd, an));
    }

    let ae_arch = EncoderArchitecture {
        latent_dim: 4,
        point_hidden: vec![12],
        feature_dim: 16,
        post_hidden: vec![12],
        decoder_hidden: [16, 16],
        decoded_points: 12,
    };
    for _ in 0..100 {
        let enc = SetEncoder::new(&ae_arch, &mut rng).unwrap();
        let dec = SetDecoder::new(&ae_arch, &mut rng).unwrap();
        let pts: Vec<Point2> = (0..10).map(|_| [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]).collect();
        let n_enc = enc.param_count();
        let mut theta = enc.params();
        theta.extend(dec.net.params());
        let i = rng.random_range(0..theta.len());
        let an = autoencoder_loss_grad(&enc, &dec, &pts, 0.1).unwrap().2[i];
        let fd = central(&theta, i, 1e-7, |t| {
            let mut e = enc.clone();
            let mut d = dec.clone();
            e.set_params(&t[..n_enc]).unwrap();
            d.net.set_params(&t[n_enc..]).unwrap();
            autoencoder_loss_grad(&e, &d, &pts, 0.1).unwrap().0
        });
        worst.add("autoencoder", rel_err(fd, an));
    }

    let secs = start.elapsed().as_secs_f64();
    let probes: usize = worst.0.values().map(|w| w.0).sum();
    let tol = |case: &str| if matches!(case, "mixed_second_order" | "autoencoder") { GRAD_TOL_SECOND } else { GRAD_TOL };
    let pass = probes >= GRAD_PROBES_MIN && secs <= GRAD_LIMIT_S && worst.0.iter().all(|(c, w)| w.1 <= tol(c));
    let cases: Vec<String> = worst.0.iter().map(|(c, w)| format!("{c} {:.1e}/{:.0e}", w.1, tol(c))).collect();
    line(
        "1",
        "gradient suite",
        pass,
        format!(
            "{probes} probes (min {GRAD_PROBES_MIN}), worst rel err {}, floor {GRAD_FLOOR:.0e}, {secs:.1} s (limit {GRAD_LIMIT_S} s)",
            cases.join(", ")
        ),
    )
}

/// Rollout of the energized pure geometry of `ngf` with unclamped RK2.
fn geometry_rollout(ngf: &NgfPolicy, z: &[f64], start: JointState, dt: f64, steps: usize) -> Vec<JointState> {
    let cfg = IntegratorConfig::unclamped(dt, steps + 1);
    let mut out = vec![start];
    for _ in 0..steps {
        let s = out.last().unwrap();
        let (m_g, f_g) = ngf.geometric_terms(&s.q, &s.qdot, z).unwrap();
        let a = geometry_accel(&m_g, &f_g, &s.qdot).unwrap();
        out.push(rk2_step(s, &Accel(a), &cfg).unwrap());
    }
    out
}

fn point_segment_distance(p: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let ab = b - a;
    let t = if ab.norm_squared() > 0.0 {
        ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

fn fabric_invariants() -> Line {
    let start = Instant::now();
    let mut rng = RunSeed(102).stream("acceptance-fabric");
    let (dim, z_dim) = (4, 3);
    let ngfs: Vec<NgfPolicy> = (0..5)
        .map(|_| NgfPolicy::new(dim, z_dim, &PolicyArchitecture::desk(), &mut rng).unwrap())
        .collect();

    let mut hd2 = 0.0f64;
    for k in 0..300 {
        let ngf = &ngfs[k % ngfs.len()];
        let q = dvec(dim, 1.5, &mut rng);
        let qd = dvec(dim, 2.0, &mut rng);
        let z = random_vec(z_dim, 1.0, &mut rng);
        let pi = ngf.geometry_direction(&q, &qd, &z).unwrap();
        let (_, f_g) = ngf.geometric_terms(&q, &qd, &z).unwrap();
        for lambda in [0.5, 2.0, 10.0] {
            let pl = ngf.geometry_direction(&q, &(&qd * lambda), &z).unwrap();
            let (_, fl) = ngf.geometric_terms(&q, &(&qd * lambda), &z).unwrap();
            let l2 = lambda * lambda;
            hd2 = hd2.max((&pl - &pi * l2).norm() / (&pi * l2).norm());
            hd2 = hd2.max((&fl - &f_g * l2).norm() / (&f_g * l2).norm());
        }
    }

    let mut energy = 0.0f64;
    let mut path = 0.0f64;
    for k in 0..10 {
        let ngf = &ngfs[k % ngfs.len()];
        let z = random_vec(z_dim, 1.0, &mut rng);
        let q0 = dvec(dim, 1.0, &mut rng);
        let v0 = dvec(dim, 1.0, &mut rng).normalize();
        let slow = geometry_rollout(ngf, &z, JointState::new(q0.clone(), v0.clone()), 1e-3, 1000);
        let l0 = 0.5 * v0.norm_squared();
        for s in &slow {
            energy = energy.max((0.5 * s.qdot.norm_squared() - l0).abs() / l0);
        }
        let fast = geometry_rollout(ngf, &z, JointState::new(q0, &v0 * 2.0), 1e-3, 500);
        for p in &fast {
            let d = slow
                .windows(2)
                .map(|w| point_segment_distance(&p.q, &w[0].q, &w[1].q))
                .fold(f64::INFINITY, f64::min);
            path = path.max(d);
        }
    }

    let mut converge = 0.0f64;
    let mut converged_all = true;
    let dt = 0.01;
    let cfg = IntegratorConfig::unclamped(dt, 0);
    for k in 0..10 {
        let ngf = &ngfs[k % ngfs.len()];
        let z = random_vec(z_dim, 1.0, &mut rng);
        let k_psi = random_spd(dim, &mut rng) * PSI_STIFFNESS;
        let q_star = dvec(dim, 1.0, &mut rng);
        let m_f = random_spd(dim, &mut rng);
        let mut s = JointState::new(dvec(dim, 1.5, &mut rng), dvec(dim, 1.0, &mut rng));
        let mut t_hit = None;
        for step in 0..=(CONVERGE_LIMIT_S / dt) as usize {
            if s.qdot.norm() <= CONVERGE_QDOT && (&s.q - &q_star).norm() <= CONVERGE_Q {
                t_hit = Some(step as f64 * dt);
                break;
            }
            let (m_g, f_g) = ngf.geometric_terms(&s.q, &s.qdot, &z).unwrap();
            let terms = FabricTerms {
                m_g,
                f_g,
                m_f: m_f.clone(),
                f_f: &k_psi * (&s.q - &q_star) + &s.qdot * 1.0,
                beta_f: 1.0,
                beta: DEFAULT_BETA,
            };
            s = rk2_step(&s, &resolve_fabric(&terms, &s).unwrap(), &cfg).unwrap();
        }
        match t_hit {
            Some(t) => converge = converge.max(t),
            None => converged_all = false,
        }
    }

    let mut residual = 0.0f64;
    for k in 0..1000 {
        let d = 5;
        let qdot = if k % 10 == 0 { DVector::zeros(d) } else { dvec(d, 2.0, &mut rng) };
        let state = JointState::new(dvec(d, 1.0, &mut rng), qdot.clone());
        let terms = FabricTerms {
            m_g: random_spd(d, &mut rng),
            f_g: dvec(d, 3.0, &mut rng),
            m_f: random_spd(d, &mut rng),
            f_f: dvec(d, 3.0, &mut rng),
            beta_f: 1.0,
            beta: DEFAULT_BETA,
        };
        let a = resolve_fabric(&terms, &state).unwrap().0;
        let m = &terms.m_g + &terms.m_f;
        let h = -m.clone().lu().solve(&terms.f_g).unwrap();
        let alpha = energization_coefficient(&qdot, &h);
        let r = &m * (&a - &qdot * alpha + &qdot * terms.beta) + &terms.f_g + &terms.f_f;
        let scale = m.norm() * a.norm() + terms.f_g.norm() + terms.f_f.norm();
        residual = residual.max(r.norm() / scale);
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = hd2 <= HD2_TOL
        && energy <= ENERGY_TOL
        && path <= PATH_TOL
        && converged_all
        && converge <= CONVERGE_LIMIT_S
        && residual <= RESIDUAL_TOL
        && secs <= FABRIC_LIMIT_S;
    line(
        "2",
        "fabric invariants",
        pass,
        format!(
            "HD2 {hd2:.1e} (tol {HD2_TOL:.0e}), energy drift {energy:.1e} (tol {ENERGY_TOL:.0e}), path {path:.1e} rad (tol {PATH_TOL:.0e}), \
             converged {} by {converge:.2} s (limit {CONVERGE_LIMIT_S} s), residual {residual:.1e} (tol {RESIDUAL_TOL:.0e}), {secs:.1} s (limit {FABRIC_LIMIT_S} s)",
            if converged_all { "10/10" } else { "not all" }
        ),
    )
}

fn integrator_exactness() -> Line {
    let mut rng = RunSeed(103).stream("acceptance-rk2");
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let dt = [CONTROL_DT, 0.01, 0.05][rng.random_range(0..3)];
        let cfg = IntegratorConfig::unclamped(dt, 0);
        let q0 = dvec(6, 1.0, &mut rng);
        let v0 = dvec(6, 2.0, &mut rng);
        let a = dvec(6, 5.0, &mut rng);
        let mut s = JointState::new(q0.clone(), v0.clone());
        for k in 1..=60 {
            s = rk2_step(&s, &Accel(a.clone()), &cfg).unwrap();
            let t = k as f64 * dt;
            let q = &q0 + &v0 * t + &a * (0.5 * t * t);
            let v = &v0 + &a * t;
            worst = worst.max((&s.q - q).amax()).max((&s.qdot - v).amax());
        }
    }
    let desk = desk_config();
    let defaults = PipelineConfig::default();
    let dts = [
        IntegratorConfig::default().dt,
        defaults.datagen.integrator.dt,
        defaults.train.integrator.dt,
        defaults.eval.episode.integrator.dt,
        desk.datagen.integrator.dt,
        desk.train.integrator.dt,
        desk.eval.episode.integrator.dt,
    ];
    let plumbed = dts.iter().all(|&dt| dt == 1.0 / 30.0);
    line(
        "3",
        "integrator",
        worst <= RK2_TOL && plumbed,
        format!(
            "constant-acceleration error {worst:.1e} (tol {RK2_TOL:.0e}), default and configured dt = 1/30 in {} of {} places",
            dts.iter().filter(|&&dt| dt == 1.0 / 30.0).count(),
            dts.len()
        ),
    )
}

fn expert_collapse(ds: &TrajectoryDataset) -> Line {
    let mut rng = RunSeed(104).stream("acceptance-collapse");
    let expert = SurrogateExpert {
        dataset: ds,
        gains: ExpertGains::default(),
    };
    let cfg = IntegratorConfig::default();
    let mut ok = 0;
    let mut same_object = 0;
    let mut worst = 0.0f64;
    for _ in 0..COLLAPSE_TRIALS {
        let demo = &ds.demos[rng.random_range(0..ds.demos.len())];
        let states = &demo.traj.states;
        let k = rng.random_range(0..states.len());
        let noise = |v: &DVector<f64>, rng: &mut ChaCha8Rng| v.map(|x| x + rng.random_range(-COLLAPSE_NOISE..=COLLAPSE_NOISE));
        let mut s = JointState::new(noise(&states[k].q, &mut rng), noise(&states[k].qdot, &mut rng));
        let group = closest_encoding_group(&demo.z, ds).unwrap();
        let (tracked, _) = nearest_trajectory(&s, ds, &group, VELOCITY_WEIGHT).unwrap();
        let tracked = &ds.demos[tracked];
        if tracked.shape_id == demo.shape_id && tracked.grasp_index == demo.grasp_index {
            same_object += 1;
        }
        let mut session = expert.session(&s, &demo.z).unwrap();
        for _ in 0..(tracked.traj.len() + COLLAPSE_SETTLE_STEPS) {
            let a = session(&s).unwrap();
            s = rk2_step(&s, &a, &cfg).unwrap();
        }
        let err = (&s.q - &tracked.traj.last().unwrap().q).amax();
        worst = worst.max(err);
        if err <= COLLAPSE_TOL {
            ok += 1;
        }
    }
    line(
        "4",
        "expert collapse",
        ok == COLLAPSE_TRIALS,
        format!(
            "{ok}/{COLLAPSE_TRIALS} end within {COLLAPSE_TOL:.0e} rad of the tracked trajectory after ±{COLLAPSE_NOISE} perturbation, \
             worst final error {worst:.1e} rad; {same_object}/{COLLAPSE_TRIALS} tracked a demonstration of the source grasp"
        ),
    )
}

fn dataset_contract(cfg: &PipelineConfig, table: &GraspTable, ds: &TrajectoryDataset, secs: f64) -> Line {
    let tol = GraspTolerance::default();
    let expected = DATASET_SHAPES * DATASET_POSES * DATASET_PER_POSE;
    let mut terminal = 0;
    let mut free = 0;
    let mut worst_clearance = f64::INFINITY;
    for d in &ds.demos {
        let object = cfg.scene.make_object(d.shape_id, d.pose).unwrap();
        let last = d.traj.last().unwrap();
        let entry = &table.entries[d.grasp_index as usize];
        if grasp_success(&cfg.scene.arm, last.q.as_slice(), &object, &tol)
            && tol.matches(&cfg.scene.arm, last.q.as_slice(), &entry.grasp)
        {
            terminal += 1;
        }
        let c = min_clearance(&cfg.scene.arm, &object, &d.traj);
        worst_clearance = worst_clearance.min(c);
        if c > 0.0 {
            free += 1;
        }
    }
    let bytes = ds.to_bytes().unwrap();
    let back = TrajectoryDataset::from_bytes(&bytes, Some(&ds.manifest())).unwrap();
    let round_trip = &back == ds && back.to_bytes().unwrap() == bytes;
    let n = ds.len();
    let pass = n == expected
        && table.entries.len() == DATASET_SHAPES * DATASET_POSES
        && terminal == n
        && free == n
        && round_trip
        && secs <= DATASET_LIMIT_S;
    line(
        "5",
        "dataset contract",
        pass,
        format!(
            "{n} trajectories (want {expected}) over {} grasps, terminal {terminal}/{n}, collision-free {free}/{n} (min clearance {worst_clearance:.4} m), \
             NGFD round trip {}, {secs:.1} s (limit {DATASET_LIMIT_S} s)",
            table.entries.len(),
            if round_trip { "bit-exact" } else { "mismatch" }
        ),
    )
}

fn brute_chamfer(a: &[Point2], b: &[Point2]) -> f64 {
    let one = |x: &[Point2], y: &[Point2]| {
        let mut s = 0.0;
        for p in x {
            let mut best = f64::INFINITY;
            for q in y {
                let d = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]);
                if d < best {
                    best = d;
                }
            }
            s += best;
        }
        s / x.len() as f64
    };
    one(a, b) + one(b, a)
}

struct EncoderRun {
    encoder: SetEncoder,
    secs: f64,
}

fn encoder_criterion(cfg: &PipelineConfig, corpus: &[PointSet], corpus_secs: f64) -> (Line, EncoderRun) {
    let mut rng = RunSeed(106).stream("acceptance-encoder");
    let mut exact = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..40);
        let m = rng.random_range(1..40);
        let a: Vec<Point2> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let b: Vec<Point2> = (0..m).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        if chamfer(&a, &b).unwrap() == brute_chamfer(&a, &b) {
            exact += 1;
        }
    }

    let start = Instant::now();
    let (enc, dec, report) = train_autoencoder(corpus, &cfg.encoder).unwrap();
    let secs = start.elapsed().as_secs_f64() + corpus_secs;
    save_autoencoder(&enc, Some(&dec), &out_dir().join("encoder.json")).unwrap();

    let mut invariant = 0;
    for set in corpus.iter().take(200) {
        let mut shuffled = set.points.clone();
        shuffled.shuffle(&mut rng);
        let a = enc.encode(&set.points).unwrap();
        let b = enc.encode(&shuffled).unwrap();
        if a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) {
            invariant += 1;
        }
    }

    let ratio = report.heldout_chamfer_trained / report.heldout_chamfer_untrained;
    let pass = exact == 500 && invariant == 200 && corpus.len() == CORPUS_SIZE && ratio <= ENCODER_RATIO && secs <= ENCODER_LIMIT_S;
    let l = line(
        "6",
        "encoder",
        pass,
        format!(
            "chamfer equals brute force {exact}/500, permutation-invariant bit-exact {invariant}/200, held-out chamfer {:.2e} vs untrained {:.2e} \
             (ratio {ratio:.1e}, limit {ENCODER_RATIO}) on {} sets, {secs:.1} s (limit {ENCODER_LIMIT_S} s)",
            report.heldout_chamfer_trained,
            report.heldout_chamfer_untrained,
            corpus.len()
        ),
    );
    (l, EncoderRun { encoder: enc, secs })
}

/// Everything one pipeline run produces, as bytes for determinism checks.
struct PipelineRun {
    dataset: Vec<u8>,
    corpus: Vec<u8>,
    encoder: Vec<u8>,
    policies: Vec<(String, Vec<u8>)>,
    report: EvalReport,
    report_json: String,
    train_secs: f64,
    eval_secs: f64,
    fixture: Option<(usize, usize)>,
}

fn policy_bytes(policy: &Policy, dir: &Path, stem: &str) -> Vec<u8> {
    let path = dir.join(format!("policy-{stem}.json"));
    policy.save(&path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let mut blobs: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name.starts_with(&format!("policy-{stem}.")) && name.ends_with(".dnet")
        })
        .collect();
    blobs.sort();
    for b in blobs {
        bytes.extend(fs::read(b).unwrap());
    }
    bytes
}

fn encoder_bytes(enc: &SetEncoder, dir: &Path) -> Vec<u8> {
    let path = dir.join("encoder.json");
    save_autoencoder(enc, None, &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    for blob in ["encoder.point.dnet", "encoder.post.dnet"] {
        bytes.extend(fs::read(dir.join(blob)).unwrap());
    }
    bytes
}

/// Trains the four policies on `pos` and evaluates them on every shape.
fn train_and_evaluate(
    cfg: &PipelineConfig,
    pos: &TrajectoryDataset,
    corpus: &[PointSet],
    encoder: SetEncoder,
    dir: &Path,
    fixture: bool,
) -> PipelineRun {
    fs::create_dir_all(dir).unwrap();
    let pcd_encoder = ObjectEncoder::Pcd(encoder);
    let pcd = encode_dataset(&cfg.scene, pos, &pcd_encoder).unwrap();
    let ObjectEncoder::Pcd(enc) = &pcd_encoder else { unreachable!() };
    let encoder = encoder_bytes(enc, dir);

    let start = Instant::now();
    let mut trained = Vec::new();
    for arch in [Arch::Ngf, Arch::Mlp] {
        for (ds, obj) in [(&pcd, &pcd_encoder), (pos, &ObjectEncoder::Pos)] {
            let (policy, report) = train(arch, ds, &cfg.policy, &cfg.train).unwrap();
            let stem = format!("{}-{}", arch.as_str(), ds.encoding.as_str());
            println!(
                "       trained {stem}: {} labels, best validation {:.3} at round {}",
                report.labels, report.best_validation_loss, report.best_round
            );
            trained.push((stem, policy, obj, ds));
        }
    }
    let train_secs = start.elapsed().as_secs_f64();
    let policies = trained.iter().map(|(s, p, _, _)| (s.clone(), policy_bytes(p, dir, s))).collect();

    let start = Instant::now();
    let subjects: Vec<EvalSubject<'_>> = trained
        .iter()
        .map(|(stem, p, obj, ds)| EvalSubject {
            name: stem.clone(),
            controller: p,
            encoder: obj,
            dataset: ds,
        })
        .collect();
    let report = evaluate(&cfg.scene, &subjects, &cfg.all_ids().unwrap(), &cfg.eval).unwrap();
    let fixture = fixture.then(|| {
        let (_, policy, obj, ds) = &trained[0];
        let mut ok = 0;
        let mut n = 0;
        for sid in cfg.training_ids().unwrap() {
            for (i, pose) in cfg.scene.grid_poses().into_iter().enumerate() {
                let object = cfg.scene.make_object(sid, pose).unwrap();
                let mut rng = RunSeed(cfg.seed).substream("fixture", &[sid as u64, i as u64]);
                let out = run_episode(&cfg.scene, &object, policy, obj, ds, &cfg.eval.episode, &mut rng).unwrap();
                n += 1;
                ok += out.success as usize;
            }
        }
        (ok, n)
    });
    let eval_secs = start.elapsed().as_secs_f64();
    let report_json = serde_json::to_string_pretty(&report).unwrap();
    fs::write(dir.join("eval.json"), &report_json).unwrap();
    PipelineRun {
        dataset: pos.to_bytes().unwrap(),
        corpus: point_sets_to_bytes(corpus),
        encoder,
        policies,
        report,
        report_json,
        train_secs,
        eval_secs,
        fixture,
    }
}

/// Success rate pooled over `shapes`.
fn pooled(report: &EvalReport, policy: &str, shapes: &[u32]) -> f64 {
    let (mut s, mut n) = (0, 0);
    for &sid in shapes {
        let c = report.cell(policy, sid).unwrap();
        s += c.successes;
        n += c.trials;
    }
    s as f64 / n.max(1) as f64
}

fn end_to_end(cfg: &PipelineConfig, run: &PipelineRun, upstream_secs: f64) -> Vec<Line> {
    let trained = cfg.training_ids().unwrap();
    let heldout = cfg.shape_ids(&cfg.heldout_shapes).unwrap();
    let r = &run.report;
    for c in &r.cells {
        println!("       {:<8} {:<9} {:>3}/{:<3}", c.policy, c.shape, c.successes, c.trials);
    }
    let rate = |p: &str| pooled(r, p, &trained);
    let (np, nq, mp, mq) = (rate("ngf-pcd"), rate("ngf-pos"), rate("mlp-pcd"), rate("mlp-pos"));
    let best_heldout = heldout
        .iter()
        .map(|&sid| r.cell("ngf-pcd", sid).unwrap().success_rate)
        .fold(0.0, f64::max);
    let secs = upstream_secs + run.train_secs + run.eval_secs;
    let margin_pts = ORDERING_MARGIN * 100.0;
    let pass = r.trials == EVAL_TRIALS
        && np >= nq + ORDERING_MARGIN
        && np >= mp + ORDERING_MARGIN
        && nq >= mq + ORDERING_MARGIN
        && best_heldout >= HELDOUT_MIN
        && secs <= E2E_LIMIT_S;
    let mut lines = vec![line(
        "7",
        "end-to-end ordering",
        pass,
        format!(
            "trained shapes: ngf-pcd {:.0}% vs ngf-pos {:.0}%, ngf-pcd vs mlp-pcd {:.0}%, ngf-pos vs mlp-pos {:.0}% (margin {margin_pts} points each); \
             best held-out ngf-pcd {:.0}% (min {:.0}%); {} trials per shape; {:.0} s (limit {E2E_LIMIT_S} s)",
            np * 100.0,
            nq * 100.0,
            mp * 100.0,
            mq * 100.0,
            best_heldout * 100.0,
            HELDOUT_MIN * 100.0,
            r.trials,
            secs
        ),
    )];
    if let Some((ok, n)) = run.fixture {
        let rate = ok as f64 / n as f64;
        lines.push(line(
            "7f",
            "ngf fixture on training poses",
            rate >= FIXTURE_MIN,
            format!("ngf-pcd {ok}/{n} grid poses ({:.0}%, min {:.0}%)", rate * 100.0, FIXTURE_MIN * 100.0),
        ));
    }
    lines
}

/// Reduced-scale configuration for the repeated determinism run.
fn determinism_config() -> PipelineConfig {
    let mut cfg = desk_config().with_seed(2024);
    cfg.scene.grid.nx = 3;
    cfg.scene.grid.ny = 3;
    cfg.datagen.per_entry = 4;
    cfg.corpus_size = 120;
    cfg.encoder.epochs = 3;
    cfg.train.rounds = 30;
    cfg.train.validate_every = 5;
    cfg.eval.trials = 10;
    cfg
}

fn determinism_run(cfg: &PipelineConfig, threads: usize, dir: &Path) -> PipelineRun {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let (_, pos) = cfg.generate_data().unwrap();
        let corpus = cfg.generate_objects().unwrap();
        let (enc, _, _) = train_autoencoder(&corpus, &cfg.encoder).unwrap();
        train_and_evaluate(cfg, &pos, &corpus, enc, dir, false)
    })
}

fn determinism() -> Line {
    let start = Instant::now();
    let cfg = determinism_config();
    let a = determinism_run(&cfg, 1, &out_dir().join("determinism-a"));
    let b = determinism_run(&cfg, 3, &out_dir().join("determinism-b"));
    let same_policies = a.policies == b.policies;
    let checks = [
        ("dataset", a.dataset == b.dataset),
        ("corpus", a.corpus == b.corpus),
        ("encoder", a.encoder == b.encoder),
        ("checkpoints", same_policies),
        ("report", a.report_json == b.report_json),
    ];
    let differ: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    line(
        "8",
        "determinism",
        differ.is_empty() && !a.dataset.is_empty(),
        format!(
            "two runs (1 and 3 worker threads) of criteria 5-7 at reduced scale: {} bit-identical{}; {} bytes of artifacts, {:.1} s",
            checks.len() - differ.len(),
            if differ.is_empty() { String::new() } else { format!(", differing: {}", differ.join(", ")) },
            a.dataset.len() + a.corpus.len() + a.encoder.len() + a.policies.iter().map(|p| p.1.len()).sum::<usize>() + a.report_json.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut lines = Vec::new();

    if want(1) {
        lines.push(gradient_suite());
    }
    if want(2) {
        lines.push(fabric_invariants());
    }
    if want(3) {
        lines.push(integrator_exactness());
    }
    if want(4) || want(5) || want(6) || want(7) {
        let cfg = desk_config();
        let start = Instant::now();
        let (table, pos) = cfg.generate_data().unwrap();
        let data_secs = start.elapsed().as_secs_f64();
        if want(5) {
            lines.push(dataset_contract(&cfg, &table, &pos, data_secs));
        }
        if want(4) {
            lines.push(expert_collapse(&pos));
        }
        if want(6) || want(7) {
            let start = Instant::now();
            let corpus = cfg.generate_objects().unwrap();
            let corpus_secs = start.elapsed().as_secs_f64();
            let (l, enc) = encoder_criterion(&cfg, &corpus, corpus_secs);
            if want(6) {
                lines.push(l);
            }
            if want(7) {
                let run = train_and_evaluate(&cfg, &pos, &corpus, enc.encoder, &out_dir().join("desk"), true);
                lines.extend(end_to_end(&cfg, &run, data_secs + enc.secs));
            }
        }
    }
    if want(8) {
        lines.push(determinism());
    }

    let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(|l| format!("{} ({})", l.id, l.title)).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        lines.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(": {}", failed.join(", ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
