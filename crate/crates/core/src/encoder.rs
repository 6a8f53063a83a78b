//! Point-set autoencoder. The encoder applies one shared network to every
//! point, max-pools the features, and maps the pooled vector to a latent `z`;
//! the decoder maps `z` back to a fixed number of points.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Point2, Pose2, SceneConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, ByteReader, DiffNet, GradBundle, NetSpec, OutputActivation};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::types::RunSeed;

pub const NGFP_MAGIC: &[u8; 4] = b"NGFP";
pub const NGFP_VERSION: u32 = 1;

/// Index of the nearest point of `set` to `p`; ties go to the lowest index.
fn nearest(p: Point2, set: &[Point2]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, q) in set.iter().enumerate() {
        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// `(1/|A|)Σ_a min_b‖a−b‖² + (1/|B|)Σ_b min_a‖a−b‖²`.
pub fn chamfer(a: &[Point2], b: &[Point2]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs two nonempty sets"));
    }
    let ab: f64 = a.iter().map(|p| nearest(*p, b).1).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|p| nearest(*p, a).1).sum::<f64>() / b.len() as f64;
    Ok(ab + ba)
}

/// Chamfer distance and its gradient with respect to the points of `a`.
pub fn chamfer_grad(a: &[Point2], b: &[Point2]) -> Result<(f64, Vec<Point2>)> {
    let value = chamfer(a, b)?;
    let mut g = vec![[0.0, 0.0]; a.len()];
    let (na, nb) = (a.len() as f64, b.len() as f64);
    for (i, p) in a.iter().enumerate() {
        let (j, _) = nearest(*p, b);
        g[i][0] += 2.0 * (p[0] - b[j][0]) / na;
        g[i][1] += 2.0 * (p[1] - b[j][1]) / na;
    }
    for q in b {
        let (i, _) = nearest(*q, a);
        g[i][0] += 2.0 * (a[i][0] - q[0]) / nb;
        g[i][1] += 2.0 * (a[i][1] - q[1]) / nb;
    }
    Ok((value, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderArchitecture {
    pub latent_dim: usize,
    pub point_hidden: Vec<usize>,
    /// Width of the pooled per-point features.
    pub feature_dim: usize,
    pub post_hidden: Vec<usize>,
    /// Two hidden layers plus the output layer.
    pub decoder_hidden: [usize; 2],
    pub decoded_points: usize,
}

impl Default for EncoderArchitecture {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            point_hidden: vec![64, 64],
            feature_dim: 128,
            post_hidden: vec![64],
            decoder_hidden: [128, 128],
            decoded_points: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetEncoder {
    pub point_net: DiffNet,
    pub post_net: DiffNet,
    frozen: bool,
}

/// Pooled features plus, per feature, the index of the winning point.
struct Pooled {
    values: Vec<f64>,
    argmax: Vec<usize>,
}

impl SetEncoder {
    pub fn new<R: Rng + ?Sized>(arch: &EncoderArchitecture, rng: &mut R) -> Result<Self> {
        let point_net = DiffNet::new(
            &NetSpec {
                n_in: 2,
                hidden: arch.point_hidden.clone(),
                n_out: arch.feature_dim,
                hidden_act: Activation::Elu,
                output_act: OutputActivation::Linear,
                rff: None,
            },
            rng,
        )?;
        let post_net = DiffNet::new(
            &NetSpec {
                n_in: arch.feature_dim,
                hidden: arch.post_hidden.clone(),
                n_out: arch.latent_dim,
                hidden_act: Activation::Elu,
                output_act: OutputActivation::Linear,
                rff: None,
            },
            rng,
        )?;
        Ok(Self {
            point_net,
            post_net,
            frozen: false,
        })
    }

    pub fn from_nets(point_net: DiffNet, post_net: DiffNet, frozen: bool) -> Result<Self> {
        if point_net.n_in() != 2 || point_net.n_out() != post_net.n_in() {
            return Err(Error::invalid("encoder networks do not chain"));
        }
        Ok(Self {
            point_net,
            post_net,
            frozen,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.post_net.n_out()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.point_net.params();
        p.extend(self.post_net.params());
        p
    }

    pub fn param_count(&self) -> usize {
        self.point_net.param_count() + self.post_net.param_count()
    }

    /// Fails once the encoder is frozen.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::invalid("encoder is frozen"));
        }
        if flat.len() != self.param_count() {
            return Err(Error::invalid("encoder parameter vector has wrong length"));
        }
        let n = self.point_net.param_count();
        self.point_net.set_params(&flat[..n])?;
        self.post_net.set_params(&flat[n..])
    }

    fn pool(&self, points: &[Point2]) -> Result<Pooled> {
        if points.is_empty() {
            return Err(Error::invalid("cannot encode an empty point set"));
        }
        let h = self.point_net.n_out();
        let mut values = vec![f64::NEG_INFINITY; h];
        let mut argmax = vec![0; h];
        for (i, p) in points.iter().enumerate() {
            let f = self.point_net.forward(p)?;
            for k in 0..h {
                if f[k] > values[k] {
                    values[k] = f[k];
                    argmax[k] = i;
                }
            }
        }
        Ok(Pooled { values, argmax })
    }

    /// Latent code of a point set in the world frame.
    pub fn encode(&self, points: &[Point2]) -> Result<Vec<f64>> {
        self.post_net.forward(&self.pool(points)?.values)
    }

    /// Flat parameter gradient, in [`SetEncoder::params`] order, of `dzᵀ z`
    /// where `z = encode(points)`. Each pooled feature routes its gradient to
    /// the winning point.
    pub fn backward(&self, points: &[Point2], dz: &[f64]) -> Result<Vec<f64>> {
        let pooled = self.pool(points)?;
        let (_, post_grad) = self.post_net.value_and_backward(&pooled.values, dz)?;
        let d_pool = post_grad.input.clone().unwrap_or_default();
        let h = d_pool.len();
        let mut winners: Vec<usize> = pooled.argmax.clone();
        winners.sort_unstable();
        winners.dedup();
        let mut point_grad = GradBundle::zeros_for(&self.point_net);
        for &i in &winners {
            let u: Vec<f64> = (0..h).map(|k| if pooled.argmax[k] == i { d_pool[k] } else { 0.0 }).collect();
            point_grad.add_scaled(&self.point_net.param_grad(&points[i], &u)?, 1.0);
        }
        let mut flat = point_grad.flat();
        post_grad.write_flat(&mut flat);
        Ok(flat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetDecoder {
    pub net: DiffNet,
}

impl SetDecoder {
    pub fn new<R: Rng + ?Sized>(arch: &EncoderArchitecture, rng: &mut R) -> Result<Self> {
        Ok(Self {
            net: DiffNet::new(
                &NetSpec {
                    n_in: arch.latent_dim,
                    hidden: arch.decoder_hidden.to_vec(),
                    n_out: 2 * arch.decoded_points,
                    hidden_act: Activation::Elu,
                    output_act: OutputActivation::Linear,
                    rff: None,
                },
                rng,
            )?,
        })
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<Point2>> {
        Ok(self.net.forward(z)?.chunks(2).map(|c| [c[0], c[1]]).collect())
    }
}

/// Autoencoder loss `chamfer(decode(encode(x)), x) + λ‖z‖²`, the Chamfer
/// term alone, and the gradient over `[encoder params, decoder params]`.
pub fn autoencoder_loss_grad(
    enc: &SetEncoder,
    dec: &SetDecoder,
    points: &[Point2],
    lambda: f64,
) -> Result<(f64, f64, Vec<f64>)> {
    let z = enc.encode(points)?;
    let recon = dec.decode(&z)?;
    let (c, g) = chamfer_grad(&recon, points)?;
    let flat_g: Vec<f64> = g.iter().flat_map(|p| [p[0], p[1]]).collect();
    let (_, bundle) = dec.net.value_and_backward(&z, &flat_g)?;
    let mut dz = bundle.input.clone().unwrap_or_default();
    for (d, v) in dz.iter_mut().zip(&z) {
        *d += 2.0 * lambda * v;
    }
    let penalty = lambda * z.iter().map(|v| v * v).sum::<f64>();
    let mut grad = enc.backward(points, &dz)?;
    bundle.write_flat(&mut grad);
    Ok((c + penalty, c, grad))
}

/// One observed point set with its source object.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: Vec<Point2>,
    pub shape_id: u32,
    pub pose: Pose2,
}

/// `count` point sets of the given shapes at uniformly sampled table poses,
/// cycling through the shapes.
pub fn generate_corpus(scene: &SceneConfig, shape_ids: &[u32], count: usize, seed: RunSeed) -> Result<Vec<PointSet>> {
    scene.validate()?;
    if shape_ids.is_empty() {
        return Err(Error::invalid("corpus needs at least one shape"));
    }
    let mut rng = seed.stream("object-corpus");
    (0..count)
        .map(|i| {
            let sid = shape_ids[i % shape_ids.len()];
            let pose = scene.sample_pose(&mut rng);
            let o = scene.make_object(sid, pose)?;
            Ok(PointSet {
                points: o.points,
                shape_id: sid,
                pose,
            })
        })
        .collect()
}

pub fn point_sets_to_bytes(sets: &[PointSet]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(NGFP_MAGIC);
    out.extend_from_slice(&NGFP_VERSION.to_le_bytes());
    out.extend_from_slice(&(sets.len() as u64).to_le_bytes());
    for s in sets {
        out.extend_from_slice(&(s.points.len() as u32).to_le_bytes());
        for p in &s.points {
            out.extend_from_slice(&p[0].to_le_bytes());
            out.extend_from_slice(&p[1].to_le_bytes());
        }
        out.extend_from_slice(&s.shape_id.to_le_bytes());
        for v in [s.pose.x, s.pose.y, s.pose.theta] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn point_sets_from_bytes(bytes: &[u8]) -> Result<Vec<PointSet>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != NGFP_MAGIC {
        return Err(Error::format(0, "bad NGFP magic"));
    }
    let version = r.u32()?;
    if version != NGFP_VERSION {
        return Err(Error::format(4, format!("unsupported NGFP version {version}")));
    }
    let count_off = r.pos;
    let count = r.u64()?;
    if count > bytes.len() as u64 {
        return Err(Error::format(count_off as u64, "set count exceeds file size"));
    }
    let mut sets = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = r.u32()? as usize;
        if r.remaining() < n * 16 + 28 {
            return Err(Error::format(r.pos as u64, "truncated point set"));
        }
        let points = (0..n).map(|_| Ok([r.f64()?, r.f64()?])).collect::<Result<Vec<_>>>()?;
        let shape_id = r.u32()?;
        let pose = Pose2::new(r.f64()?, r.f64()?, r.f64()?);
        sets.push(PointSet { points, shape_id, pose });
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.pos as u64, "trailing bytes after last point set"));
    }
    Ok(sets)
}

pub fn save_point_sets(sets: &[PointSet], path: &Path) -> Result<()> {
    fs::write(path, point_sets_to_bytes(sets))?;
    Ok(())
}

pub fn load_point_sets(path: &Path) -> Result<Vec<PointSet>> {
    point_sets_from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Latent penalty weight.
    pub lambda: f64,
    pub optimizer: OptimizerConfig,
    /// Fraction of the corpus held out for the reconstruction check.
    pub holdout_fraction: f64,
    pub seed: u64,
    pub architecture: EncoderArchitecture,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lambda: 1e-3,
            optimizer: OptimizerConfig::adam(1e-3),
            holdout_fraction: 0.1,
            seed: 0,
            architecture: EncoderArchitecture::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub report_version: u32,
    pub seed: u64,
    pub train_sets: usize,
    pub heldout_sets: usize,
    pub epoch_losses: Vec<f64>,
    pub heldout_chamfer_untrained: f64,
    pub heldout_chamfer_trained: f64,
    pub config: EncoderTrainConfig,
}

fn mean_chamfer(enc: &SetEncoder, dec: &SetDecoder, sets: &[PointSet]) -> Result<f64> {
    if sets.is_empty() {
        return Ok(0.0);
    }
    let vals: Vec<Result<f64>> = sets
        .par_iter()
        .map(|s| chamfer(&dec.decode(&enc.encode(&s.points)?)?, &s.points))
        .collect();
    let mut sum = 0.0;
    for v in vals {
        sum += v?;
    }
    Ok(sum / sets.len() as f64)
}

/// Trains the autoencoder with minibatch gradient descent and returns the
/// frozen encoder, the decoder, and a report with held-out reconstruction
/// error before and after training.
pub fn train_autoencoder(corpus: &[PointSet], cfg: &EncoderTrainConfig) -> Result<(SetEncoder, SetDecoder, EncoderReport)> {
    if corpus.is_empty() {
        return Err(Error::invalid("autoencoder corpus is empty"));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::invalid("encoder training: batch size must be positive and holdout in [0, 1)"));
    }
    let seed = RunSeed(cfg.seed);
    let mut rng = seed.stream("encoder-init");
    let mut enc = SetEncoder::new(&cfg.architecture, &mut rng)?;
    let mut dec = SetDecoder::new(&cfg.architecture, &mut rng)?;
    let n_hold = ((corpus.len() as f64) * cfg.holdout_fraction).floor() as usize;
    let (train_sets, heldout) = corpus.split_at(corpus.len() - n_hold);
    if train_sets.is_empty() {
        return Err(Error::invalid("no training sets after the hold-out split"));
    }
    let untrained = mean_chamfer(&enc, &dec, heldout)?;
    let n_enc = enc.param_count();
    let mut params = enc.params();
    params.extend(dec.net.params());
    let mut opt = Optimizer::new(cfg.optimizer.clone(), params.len())?;
    let mut order: Vec<usize> = (0..train_sets.len()).collect();
    let mut shuffle = seed.stream("encoder-shuffle");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, f64, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| autoencoder_loss_grad(&enc, &dec, &train_sets[i].points, cfg.lambda))
                .collect();
            let mut grad = vec![0.0; params.len()];
            for r in results {
                let (loss, _, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::TrainingAbort {
                        round: epoch,
                        reason: "non-finite autoencoder loss".into(),
                    });
                }
                total += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b / batch.len() as f64;
                }
            }
            opt.step(&mut params, &grad)?;
            enc.set_params(&params[..n_enc])?;
            dec.net.set_params(&params[n_enc..])?;
        }
        epoch_losses.push(total / train_sets.len() as f64);
    }
    let trained = mean_chamfer(&enc, &dec, heldout)?;
    enc.freeze();
    let report = EncoderReport {
        report_version: 1,
        seed: cfg.seed,
        train_sets: train_sets.len(),
        heldout_sets: heldout.len(),
        epoch_losses,
        heldout_chamfer_untrained: untrained,
        heldout_chamfer_trained: trained,
        config: cfg.clone(),
    };
    Ok((enc, dec, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderManifest {
    format: String,
    version: u32,
    latent_dim: usize,
    frozen: bool,
    point_net: String,
    post_net: String,
    decoder: Option<String>,
}

fn sibling(path: &Path, suffix: &str) -> Result<(PathBuf, String)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid("encoder path has no file stem"))?;
    let name = format!("{stem}.{suffix}.dnet");
    Ok((path.parent().unwrap_or(Path::new("")).join(&name), name))
}

/// JSON manifest at `path` plus `DNET1` blobs next to it.
pub fn save_autoencoder(enc: &SetEncoder, dec: Option<&SetDecoder>, path: &Path) -> Result<()> {
    let (p1, n1) = sibling(path, "point")?;
    let (p2, n2) = sibling(path, "post")?;
    fs::write(p1, enc.point_net.to_bytes())?;
    fs::write(p2, enc.post_net.to_bytes())?;
    let decoder = match dec {
        Some(d) => {
            let (p3, n3) = sibling(path, "decoder")?;
            fs::write(p3, d.net.to_bytes())?;
            Some(n3)
        }
        None => None,
    };
    let m = EncoderManifest {
        format: "fabricgrasp-encoder".into(),
        version: 1,
        latent_dim: enc.latent_dim(),
        frozen: enc.frozen,
        point_net: n1,
        post_net: n2,
        decoder,
    };
    fs::write(path, serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

pub fn load_autoencoder(path: &Path) -> Result<(SetEncoder, Option<SetDecoder>)> {
    let m: EncoderManifest =
        serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::format(0, format!("bad encoder manifest: {e}")))?;
    if m.format != "fabricgrasp-encoder" || m.version != 1 {
        return Err(Error::format(0, "unsupported encoder format"));
    }
    let dir = path.parent().unwrap_or(Path::new(""));
    let read = |name: &str| -> Result<DiffNet> { DiffNet::from_bytes(&fs::read(dir.join(name))?) };
    let enc = SetEncoder::from_nets(read(&m.point_net)?, read(&m.post_net)?, m.frozen)?;
    let dec = match m.decoder {
        Some(n) => Some(SetDecoder { net: read(&n)? }),
        None => None,
    };
    Ok((enc, dec))
}
