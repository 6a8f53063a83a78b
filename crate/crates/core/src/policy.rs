//! Second-order grasping policies: the neural geometric fabric (NGF) and a
//! plain MLP baseline. Both map `(q, q̇, z)` to a joint acceleration.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{resolve_fabric, resolve_fabric_backward, FabricTerms, DEFAULT_BETA};
use crate::nn::{positive_elu, Activation, DiffNet, NetSpec, OutputActivation, RffSpec};
use crate::types::{unit_velocity, Accel, EncodingMode, JointState};

pub const POLICY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Ngf,
    Mlp,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Ngf => "ngf",
            Arch::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ngf" => Ok(Arch::Ngf),
            "mlp" => Ok(Arch::Mlp),
            _ => Err(Error::invalid(format!("unknown architecture {s:?} (expected ngf or mlp)"))),
        }
    }
}

/// Network sizes for both architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyArchitecture {
    /// Hidden widths of every NGF sub-network.
    pub ngf_hidden: Vec<usize>,
    pub ngf_activation: Activation,
    /// Fourier features in front of every NGF sub-network; 0 disables them.
    pub rff_features: usize,
    pub rff_sigma: f64,
    /// Fixed damping added to the learned one.
    pub beta: f64,
    /// Fixed scale on the geometry direction, the potential gradient and the
    /// learned damping.
    pub ngf_gain: f64,
    pub mlp_hidden: Vec<usize>,
    pub mlp_activation: Activation,
}

impl Default for PolicyArchitecture {
    fn default() -> Self {
        Self::desk()
    }
}

impl PolicyArchitecture {
    /// Full-size networks: 3×512 ELU layers behind 1000 Fourier features.
    pub fn full_scale() -> Self {
        Self {
            ngf_hidden: vec![512, 512, 512],
            ngf_activation: Activation::Elu,
            rff_features: 1000,
            rff_sigma: 1.0,
            beta: DEFAULT_BETA,
            ngf_gain: 1.0,
            mlp_hidden: vec![64, 256],
            mlp_activation: Activation::Relu,
        }
    }

    /// Reduced widths sized for a desktop CPU.
    pub fn desk() -> Self {
        Self {
            ngf_hidden: vec![64, 64, 64],
            rff_features: 128,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ngf_hidden.iter().chain(&self.mlp_hidden).any(|&h| h == 0) {
            return Err(Error::invalid("architecture: hidden widths must be positive"));
        }
        if self.rff_features > 0 && !(self.rff_sigma > 0.0) {
            return Err(Error::invalid("architecture: rff sigma must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::invalid("architecture: beta must be non-negative"));
        }
        if !(self.ngf_gain > 0.0 && self.ngf_gain.is_finite()) {
            return Err(Error::invalid("architecture: ngf gain must be positive and finite"));
        }
        Ok(())
    }

    fn ngf_spec(&self, n_in: usize, n_out: usize, output_act: OutputActivation) -> NetSpec {
        NetSpec {
            n_in,
            hidden: self.ngf_hidden.clone(),
            n_out,
            hidden_act: self.ngf_activation,
            output_act,
            rff: (self.rff_features > 0).then(|| RffSpec {
                features: self.rff_features,
                sigma: self.rff_sigma,
            }),
        }
    }
}

/// Number of entries of a `d × d` lower triangle.
pub fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Lower-triangular `U` from `v`, filled row-major, with the diagonal passed
/// through `ELU(u) + 1 + ε` so `UUᵀ` is positive definite.
pub fn lower_triangular_positive(v: &[f64], d: usize) -> Result<DMatrix<f64>> {
    if v.len() != tri_len(d) {
        return Err(Error::invalid(format!(
            "factor vector has length {} but dimension {d} needs {}",
            v.len(),
            tri_len(d)
        )));
    }
    let mut u = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in 0..=i {
            u[(i, j)] = if i == j { positive_elu(v[k]).0 } else { v[k] };
            k += 1;
        }
    }
    Ok(u)
}

/// Pulls `∂L/∂(UUᵀ)` back to the raw factor vector `v`.
fn factor_backward(v: &[f64], u: &DMatrix<f64>, d_m: &DMatrix<f64>) -> Vec<f64> {
    let d = u.nrows();
    let d_u = (d_m + d_m.transpose()) * u;
    let mut out = Vec::with_capacity(v.len());
    let mut k = 0;
    for i in 0..d {
        for j in 0..=i {
            let g = d_u[(i, j)];
            out.push(if i == j { g * positive_elu(v[k]).1 } else { g });
            k += 1;
        }
    }
    out
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// The five NGF sub-networks and the fixed damping.
#[derive(Debug, Clone, PartialEq)]
pub struct NgfPolicy {
    pub dim: usize,
    pub z_dim: usize,
    /// `(q, q̂̇, z) → tri(U_g)`.
    pub f_g: DiffNet,
    /// `(q, q̂̇, z) → F_X`.
    pub f_x: DiffNet,
    /// `(q, z) → tri(U_f)`.
    pub f_f: DiffNet,
    /// `(q, z) → ψ`.
    pub f_psi: DiffNet,
    /// `(q, q̇, z) → β_f > 0`.
    pub f_beta: DiffNet,
    pub beta: f64,
    /// Scale `g` on `F_X`, `∂_qψ` and `β_f`.
    pub gain: f64,
}

/// Every intermediate of one NGF evaluation.
#[derive(Debug, Clone)]
pub struct NgfEval {
    pub terms: FabricTerms,
    pub pi_g: DVector<f64>,
    pub dpsi: DVector<f64>,
    v_g: Vec<f64>,
    u_g: DMatrix<f64>,
    v_f: Vec<f64>,
    u_f: DMatrix<f64>,
    x_geo: Vec<f64>,
    x_pot: Vec<f64>,
    x_damp: Vec<f64>,
}

impl NgfPolicy {
    pub fn new<R: Rng + ?Sized>(dim: usize, z_dim: usize, arch: &PolicyArchitecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if dim == 0 {
            return Err(Error::invalid("policy dimension must be positive"));
        }
        let t = tri_len(dim);
        Ok(Self {
            dim,
            z_dim,
            f_g: DiffNet::new(&arch.ngf_spec(2 * dim + z_dim, t, OutputActivation::Linear), rng)?,
            f_x: DiffNet::new(&arch.ngf_spec(2 * dim + z_dim, dim, OutputActivation::Linear), rng)?,
            f_f: DiffNet::new(&arch.ngf_spec(dim + z_dim, t, OutputActivation::Linear), rng)?,
            f_psi: DiffNet::new(&arch.ngf_spec(dim + z_dim, 1, OutputActivation::Linear), rng)?,
            f_beta: DiffNet::new(&arch.ngf_spec(2 * dim + z_dim, 1, OutputActivation::PositiveElu), rng)?,
            beta: arch.beta,
            gain: arch.ngf_gain,
        })
    }

    /// Builds from explicit sub-networks after checking their shapes.
    pub fn from_nets(
        dim: usize,
        z_dim: usize,
        [f_g, f_x, f_f, f_psi, f_beta]: [DiffNet; 5],
        beta: f64,
        gain: f64,
    ) -> Result<Self> {
        let t = tri_len(dim);
        let want = [
            (&f_g, 2 * dim + z_dim, t),
            (&f_x, 2 * dim + z_dim, dim),
            (&f_f, dim + z_dim, t),
            (&f_psi, dim + z_dim, 1),
            (&f_beta, 2 * dim + z_dim, 1),
        ];
        for (i, (net, n_in, n_out)) in want.iter().enumerate() {
            if net.n_in() != *n_in || net.n_out() != *n_out {
                return Err(Error::invalid(format!(
                    "sub-network {} is {}→{}, expected {n_in}→{n_out}",
                    NGF_NET_NAMES[i],
                    net.n_in(),
                    net.n_out()
                )));
            }
        }
        if f_beta.output_activation() != OutputActivation::PositiveElu {
            return Err(Error::invalid("damping network must have a positive output"));
        }
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::invalid("ngf gain must be positive and finite"));
        }
        Ok(Self {
            dim,
            z_dim,
            f_g,
            f_x,
            f_f,
            f_psi,
            f_beta,
            beta,
            gain,
        })
    }

    pub fn nets(&self) -> [&DiffNet; 5] {
        [&self.f_g, &self.f_x, &self.f_f, &self.f_psi, &self.f_beta]
    }

    fn nets_mut(&mut self) -> [&mut DiffNet; 5] {
        [&mut self.f_g, &mut self.f_x, &mut self.f_f, &mut self.f_psi, &mut self.f_beta]
    }

    fn check(&self, q: &DVector<f64>, qdot: &DVector<f64>, z: &[f64]) -> Result<()> {
        if q.len() != self.dim || qdot.len() != self.dim || z.len() != self.z_dim {
            return Err(Error::invalid(format!(
                "policy expects D={} and Z={}, got q {}, qdot {}, z {}",
                self.dim,
                self.z_dim,
                q.len(),
                qdot.len(),
                z.len()
            )));
        }
        Ok(())
    }

    /// `(M_g, f_g)` with `M_g = U_gU_gᵀ` and `f_g = M_g·(q̇ᵀq̇)·F_X`.
    pub fn geometric_terms(&self, q: &DVector<f64>, qdot: &DVector<f64>, z: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let e = self.evaluate(q, qdot, z)?;
        Ok((e.terms.m_g, e.terms.f_g))
    }

    /// `π_g = g·(q̇ᵀq̇)·F_X(q, q̂̇, z)`.
    pub fn geometry_direction(&self, q: &DVector<f64>, qdot: &DVector<f64>, z: &[f64]) -> Result<DVector<f64>> {
        self.check(q, qdot, z)?;
        let qhat = unit_velocity(qdot)?;
        let x = self.f_x.forward(&concat(&[q.as_slice(), qhat.as_slice(), z]))?;
        Ok(DVector::from_vec(x) * (self.gain * qdot.norm_squared()))
    }

    /// `(M_f, f_f, β_f)` with `f_f = ∂_qψ + β_f·q̇`, both scaled by `g`.
    pub fn forcing_terms(&self, q: &DVector<f64>, qdot: &DVector<f64>, z: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
        let e = self.evaluate(q, qdot, z)?;
        Ok((e.terms.m_f, e.terms.f_f, e.terms.beta_f))
    }

    /// Assembles every fabric term.
    pub fn evaluate(&self, q: &DVector<f64>, qdot: &DVector<f64>, z: &[f64]) -> Result<NgfEval> {
        self.check(q, qdot, z)?;
        let d = self.dim;
        let qhat = unit_velocity(qdot)?;
        let x_geo = concat(&[q.as_slice(), qhat.as_slice(), z]);
        let x_pot = concat(&[q.as_slice(), z]);
        let x_damp = concat(&[q.as_slice(), qdot.as_slice(), z]);

        let v_g = self.f_g.forward(&x_geo)?;
        let u_g = lower_triangular_positive(&v_g, d)?;
        let m_g = &u_g * u_g.transpose();
        let pi_g = DVector::from_vec(self.f_x.forward(&x_geo)?) * (self.gain * qdot.norm_squared());
        let f_g = &m_g * &pi_g;

        let v_f = self.f_f.forward(&x_pot)?;
        let u_f = lower_triangular_positive(&v_f, d)?;
        let m_f = &u_f * u_f.transpose();
        let dpsi = DVector::from_column_slice(&self.f_psi.input_grad(&x_pot)?[..d]) * self.gain;
        let beta_f = self.gain * self.f_beta.forward(&x_damp)?[0];
        let f_f = &dpsi + qdot * beta_f;

        Ok(NgfEval {
            terms: FabricTerms {
                m_g,
                f_g,
                m_f,
                f_f,
                beta_f,
                beta: self.beta,
            },
            pi_g,
            dpsi,
            v_g,
            u_g,
            v_f,
            u_f,
            x_geo,
            x_pot,
            x_damp,
        })
    }

    pub fn accel(&self, state: &JointState, z: &[f64]) -> Result<Accel> {
        let e = self.evaluate(&state.q, &state.qdot, z)?;
        resolve_fabric(&e.terms, state)
    }

    /// Acceleration and the parameter gradient of `upstreamᵀ a`, flattened in
    /// [`NgfPolicy::params`] order.
    pub fn accel_and_vjp(&self, state: &JointState, z: &[f64], upstream: &DVector<f64>) -> Result<(Accel, Vec<f64>)> {
        let e = self.evaluate(&state.q, &state.qdot, z)?;
        let a = resolve_fabric(&e.terms, state)?;
        Ok((a, self.vjp(&e, state, upstream)?))
    }

    /// `‖a − target‖²`, its parameter gradient, and `a`, from one evaluation.
    pub fn loss_and_grad(&self, state: &JointState, z: &[f64], target: &DVector<f64>) -> Result<(f64, Vec<f64>, Accel)> {
        let e = self.evaluate(&state.q, &state.qdot, z)?;
        let a = resolve_fabric(&e.terms, state)?;
        let r = &a.0 - target;
        let g = self.vjp(&e, state, &(&r * 2.0))?;
        Ok((r.norm_squared(), g, a))
    }

    fn vjp(&self, e: &NgfEval, state: &JointState, upstream: &DVector<f64>) -> Result<Vec<f64>> {
        let g = resolve_fabric_backward(&e.terms, state, upstream)?;
        let d = self.dim;

        let d_mg = &g.m + &g.f_g * e.pi_g.transpose();
        let d_pi = &e.terms.m_g * &g.f_g;
        let d_fx: Vec<f64> = (d_pi * (self.gain * state.qdot.norm_squared())).iter().copied().collect();
        let d_vg = factor_backward(&e.v_g, &e.u_g, &d_mg);
        let d_vf = factor_backward(&e.v_f, &e.u_f, &g.m);
        let mut d_dpsi: Vec<f64> = g.f_f.iter().map(|v| v * self.gain).collect();
        d_dpsi.resize(d + self.z_dim, 0.0);
        let d_beta_f = self.gain * g.f_f.dot(&state.qdot);

        let mut flat = Vec::with_capacity(self.param_count());
        self.f_g.param_grad(&e.x_geo, &d_vg)?.write_flat(&mut flat);
        self.f_x.param_grad(&e.x_geo, &d_fx)?.write_flat(&mut flat);
        self.f_f.param_grad(&e.x_pot, &d_vf)?.write_flat(&mut flat);
        self.f_psi.mixed_second_order(&e.x_pot, &d_dpsi)?.write_flat(&mut flat);
        self.f_beta.param_grad(&e.x_damp, &[d_beta_f])?.write_flat(&mut flat);
        Ok(flat)
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid("parameter vector has wrong length"));
        }
        let mut off = 0;
        for net in self.nets_mut() {
            let n = net.param_count();
            net.set_params(&flat[off..off + n])?;
            off += n;
        }
        Ok(())
    }
}

pub const NGF_NET_NAMES: [&str; 5] = ["f_g", "f_x", "f_f", "f_psi", "f_beta"];

/// Unstructured baseline: one network from `(q, q̇, z)` to the acceleration.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    pub dim: usize,
    pub z_dim: usize,
    pub net: DiffNet,
}

impl MlpPolicy {
    pub fn new<R: Rng + ?Sized>(dim: usize, z_dim: usize, arch: &PolicyArchitecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let spec = NetSpec {
            n_in: 2 * dim + z_dim,
            hidden: arch.mlp_hidden.clone(),
            n_out: dim,
            hidden_act: arch.mlp_activation,
            output_act: OutputActivation::Linear,
            rff: None,
        };
        Ok(Self {
            dim,
            z_dim,
            net: DiffNet::new(&spec, rng)?,
        })
    }

    pub fn from_net(dim: usize, z_dim: usize, net: DiffNet) -> Result<Self> {
        if net.n_in() != 2 * dim + z_dim || net.n_out() != dim {
            return Err(Error::invalid("MLP network shape does not match D and Z"));
        }
        Ok(Self { dim, z_dim, net })
    }

    fn input(&self, state: &JointState, z: &[f64]) -> Result<Vec<f64>> {
        if state.dim() != self.dim || z.len() != self.z_dim {
            return Err(Error::invalid("MLP policy input dimension mismatch"));
        }
        Ok(concat(&[state.q.as_slice(), state.qdot.as_slice(), z]))
    }

    pub fn accel(&self, state: &JointState, z: &[f64]) -> Result<Accel> {
        Ok(Accel(DVector::from_vec(self.net.forward(&self.input(state, z)?)?)))
    }

    pub fn accel_and_vjp(&self, state: &JointState, z: &[f64], upstream: &DVector<f64>) -> Result<(Accel, Vec<f64>)> {
        let (out, g) = self.net.value_and_backward(&self.input(state, z)?, upstream.as_slice())?;
        Ok((Accel(DVector::from_vec(out)), g.flat()))
    }
}

/// Affine normalization applied to raw encodings before they reach a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ZNorm {
    pub fn identity(z_dim: usize) -> Self {
        Self {
            shift: vec![0.0; z_dim],
            scale: vec![1.0; z_dim],
        }
    }

    /// Per-coordinate mean; per-coordinate standard deviation (floored at
    /// 1e-6) times `√Z`, so the normalized encoding has unit total variance.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a [f64]>, z_dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; z_dim];
        let mut sq = vec![0.0; z_dim];
        for z in samples {
            n += 1;
            for i in 0..z_dim {
                sum[i] += z[i];
                sq[i] += z[i] * z[i];
            }
        }
        if n == 0 {
            return Self::identity(z_dim);
        }
        let nf = n as f64;
        let root = (z_dim as f64).sqrt();
        let shift: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sq
            .iter()
            .zip(&shift)
            .map(|(s, m)| (s / nf - m * m).max(0.0).sqrt().max(1e-6) * root)
            .collect();
        Self { shift, scale }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyNet {
    Ngf(NgfPolicy),
    Mlp(MlpPolicy),
}

/// A trained policy with its encoding mode and input normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub net: PolicyNet,
    pub encoding: EncodingMode,
    pub z_norm: ZNorm,
}

/// Anything the trainer can roll out, label against, and update.
pub trait Learner {
    fn dim(&self) -> usize;
    fn accel(&self, state: &JointState, z: &[f64]) -> Result<Accel>;
    /// Acceleration and `∂(upstreamᵀ a)/∂θ`.
    fn accel_and_vjp(&self, state: &JointState, z: &[f64], upstream: &DVector<f64>) -> Result<(Accel, Vec<f64>)>;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, flat: &[f64]) -> Result<()>;

    /// `‖a − target‖²`, its parameter gradient, and `a`.
    fn loss_and_grad(&self, state: &JointState, z: &[f64], target: &DVector<f64>) -> Result<(f64, Vec<f64>, Accel)> {
        let a = self.accel(state, z)?;
        let r = &a.0 - target;
        let (_, g) = self.accel_and_vjp(state, z, &(&r * 2.0))?;
        Ok((r.norm_squared(), g, a))
    }
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(
        arch: Arch,
        encoding: EncodingMode,
        dim: usize,
        z_norm: ZNorm,
        spec: &PolicyArchitecture,
        rng: &mut R,
    ) -> Result<Self> {
        let z_dim = z_norm.shift.len();
        if z_norm.scale.len() != z_dim {
            return Err(Error::invalid("z normalization has mismatched lengths"));
        }
        let net = match arch {
            Arch::Ngf => PolicyNet::Ngf(NgfPolicy::new(dim, z_dim, spec, rng)?),
            Arch::Mlp => PolicyNet::Mlp(MlpPolicy::new(dim, z_dim, spec, rng)?),
        };
        Ok(Self { net, encoding, z_norm })
    }

    pub fn arch(&self) -> Arch {
        match self.net {
            PolicyNet::Ngf(_) => Arch::Ngf,
            PolicyNet::Mlp(_) => Arch::Mlp,
        }
    }

    pub fn z_dim(&self) -> usize {
        self.z_norm.shift.len()
    }

    fn nets(&self) -> Vec<(&'static str, &DiffNet)> {
        match &self.net {
            PolicyNet::Ngf(p) => NGF_NET_NAMES.iter().copied().zip(p.nets()).collect(),
            PolicyNet::Mlp(p) => vec![("mlp", &p.net)],
        }
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|(_, n)| n.param_count()).sum()
    }

    /// Writes a JSON manifest at `path` and one `DNET1` blob per network
    /// next to it (`<stem>.<net>.dnet`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid("policy path has no file stem"))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let mut nets = Vec::new();
        for (name, net) in self.nets() {
            let file = format!("{stem}.{name}.dnet");
            fs::write(dir.join(&file), net.to_bytes())?;
            nets.push(NetEntry {
                name: name.to_string(),
                file,
            });
        }
        let (dim, beta, gain) = match &self.net {
            PolicyNet::Ngf(p) => (p.dim, Some(p.beta), Some(p.gain)),
            PolicyNet::Mlp(p) => (p.dim, None, None),
        };
        let manifest = PolicyManifest {
            format: "fabricgrasp-policy".into(),
            version: POLICY_FORMAT_VERSION,
            arch: self.arch(),
            encoding: self.encoding,
            dim,
            z_dim: self.z_dim(),
            beta,
            gain,
            z_norm: self.z_norm.clone(),
            nets,
        };
        fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let m: PolicyManifest = serde_json::from_slice(&bytes).map_err(|e| Error::format(0, format!("bad policy manifest: {e}")))?;
        if m.format != "fabricgrasp-policy" || m.version != POLICY_FORMAT_VERSION {
            return Err(Error::format(0, format!("unsupported policy format {} v{}", m.format, m.version)));
        }
        let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let read = |name: &str| -> Result<DiffNet> {
            let entry = m
                .nets
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::format(0, format!("policy manifest lacks network {name}")))?;
            DiffNet::from_bytes(&fs::read(dir.join(&entry.file))?)
        };
        let net = match m.arch {
            Arch::Ngf => {
                let nets = [read("f_g")?, read("f_x")?, read("f_f")?, read("f_psi")?, read("f_beta")?];
                PolicyNet::Ngf(NgfPolicy::from_nets(m.dim, m.z_dim, nets, m.beta.unwrap_or(DEFAULT_BETA), m.gain.unwrap_or(1.0))?)
            }
            Arch::Mlp => PolicyNet::Mlp(MlpPolicy::from_net(m.dim, m.z_dim, read("mlp")?)?),
        };
        Ok(Self {
            net,
            encoding: m.encoding,
            z_norm: m.z_norm,
        })
    }
}

impl Learner for Policy {
    fn dim(&self) -> usize {
        match &self.net {
            PolicyNet::Ngf(p) => p.dim,
            PolicyNet::Mlp(p) => p.dim,
        }
    }

    fn accel(&self, state: &JointState, z: &[f64]) -> Result<Accel> {
        let zn = self.z_norm.apply(z);
        match &self.net {
            PolicyNet::Ngf(p) => p.accel(state, &zn),
            PolicyNet::Mlp(p) => p.accel(state, &zn),
        }
    }

    fn accel_and_vjp(&self, state: &JointState, z: &[f64], upstream: &DVector<f64>) -> Result<(Accel, Vec<f64>)> {
        let zn = self.z_norm.apply(z);
        match &self.net {
            PolicyNet::Ngf(p) => p.accel_and_vjp(state, &zn, upstream),
            PolicyNet::Mlp(p) => p.accel_and_vjp(state, &zn, upstream),
        }
    }

    fn loss_and_grad(&self, state: &JointState, z: &[f64], target: &DVector<f64>) -> Result<(f64, Vec<f64>, Accel)> {
        let zn = self.z_norm.apply(z);
        match &self.net {
            PolicyNet::Ngf(p) => p.loss_and_grad(state, &zn, target),
            PolicyNet::Mlp(p) => {
                let a = p.accel(state, &zn)?;
                let r = &a.0 - target;
                let (_, g) = p.accel_and_vjp(state, &zn, &(&r * 2.0))?;
                Ok((r.norm_squared(), g, a))
            }
        }
    }

    fn params(&self) -> Vec<f64> {
        match &self.net {
            PolicyNet::Ngf(p) => p.params(),
            PolicyNet::Mlp(p) => p.net.params(),
        }
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        match &mut self.net {
            PolicyNet::Ngf(p) => p.set_params(flat),
            PolicyNet::Mlp(p) => p.net.set_params(flat),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetEntry {
    name: String,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyManifest {
    format: String,
    version: u32,
    arch: Arch,
    encoding: EncodingMode,
    dim: usize,
    z_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gain: Option<f64>,
    z_norm: ZNorm,
    nets: Vec<NetEntry>,
}
