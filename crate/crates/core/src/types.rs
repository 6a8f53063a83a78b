//! Shared value types, small dense linear algebra, and the seeding contract.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Velocities with a norm at or below this are treated as "at rest".
pub const VELOCITY_EPS: f64 = 1e-8;

/// Joint position / velocity pair. Units: rad and rad/s.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl JointState {
    pub fn new(q: DVector<f64>, qdot: DVector<f64>) -> Self {
        assert_eq!(q.len(), qdot.len(), "q and qdot must have equal dimension");
        Self { q, qdot }
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self::new(q, DVector::zeros(n))
    }

    pub fn from_slices(q: &[f64], qdot: &[f64]) -> Self {
        Self::new(DVector::from_column_slice(q), DVector::from_column_slice(qdot))
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }
}

/// Joint acceleration, rad/s².
#[derive(Debug, Clone, PartialEq)]
pub struct Accel(pub DVector<f64>);

impl Accel {
    pub fn zeros(dim: usize) -> Self {
        Accel(DVector::zeros(dim))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingMode {
    /// Object centroid in meters (Z = 2).
    Pos,
    /// Latent code from the frozen point-set encoder.
    Pcd,
}

impl EncodingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EncodingMode::Pos => "pos",
            EncodingMode::Pcd => "pcd",
        }
    }
}

impl std::str::FromStr for EncodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pos" => Ok(EncodingMode::Pos),
            "pcd" => Ok(EncodingMode::Pcd),
            other => Err(Error::invalid(format!("unknown encoding mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEncoding {
    pub mode: EncodingMode,
    pub data: Vec<f64>,
}

impl ObjectEncoding {
    pub fn new(mode: EncodingMode, data: Vec<f64>) -> Self {
        Self { mode, data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }
}

/// Root seed of a run. Every consumer draws from its own named stream so the
/// order in which consumers run never changes what they see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeed(pub u64);

impl RunSeed {
    /// ChaCha8 keyed by the root seed, with the stream id derived from `label`.
    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        self.substream(label, &[])
    }

    /// Like [`RunSeed::stream`] but further keyed by integer indices, e.g.
    /// `(entry, sample)` so that parallel work items get independent draws.
    pub fn substream(&self, label: &str, indices: &[u64]) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut state = self.0;
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut id = fnv1a(label.as_bytes());
        for &i in indices {
            let mut s = id ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            id = splitmix64(&mut s);
        }
        rng.set_stream(id);
        rng
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `qdot / ‖qdot‖`, or the zero vector when `‖qdot‖ ≤ VELOCITY_EPS`.
pub fn unit_velocity(qdot: &DVector<f64>) -> Result<DVector<f64>> {
    if qdot.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("unit_velocity: non-finite velocity"));
    }
    let n = qdot.norm();
    if n > VELOCITY_EPS {
        Ok(qdot / n)
    } else {
        Ok(DVector::zeros(qdot.len()))
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = m`. Only the lower triangle of `m` is read.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::invalid("cholesky: matrix is not square"));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotSpd { pivot: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the lower Cholesky factor.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solves `M x = b` for symmetric positive definite `M`.
pub fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if b.len() != m.nrows() {
        return Err(Error::invalid(format!(
            "solve_spd: rhs has length {} but matrix is {}x{}",
            b.len(),
            m.nrows(),
            m.ncols()
        )));
    }
    let l = cholesky(m)?;
    Ok(cholesky_solve(&l, b))
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}
