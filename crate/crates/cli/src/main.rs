//! `fabricgrasp` command-line interface: data generation, training, rollout
//! and evaluation over one artifact directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fabricgrasp::datagen::{load_dataset, save_dataset, TrajectoryDataset};
use fabricgrasp::encoder::{
    load_autoencoder, load_point_sets, save_autoencoder, save_point_sets, train_autoencoder,
};
use fabricgrasp::env::Pose2;
use fabricgrasp::pipeline::{
    encode_dataset, evaluate, run_episode, trial_pose, EvalSubject, ObjectEncoder, PipelineConfig,
};
use fabricgrasp::policy::{Arch, Policy};
use fabricgrasp::trainer::train;
use fabricgrasp::{EncodingMode, Error, RunSeed};

const OBJECTS: &str = "objects.ngfp";
const GRASPS: &str = "grasps.json";
const DATASET: &str = "dataset.ngfd";
const ENCODER: &str = "encoder.json";
const ENCODER_REPORT: &str = "encoder-report.json";

#[derive(Parser)]
#[command(name = "fabricgrasp", version, about = "Neural geometric fabric grasping on a planar arm")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct PolicyChoice {
    #[arg(long, default_value = "ngf")]
    arch: Arch,
    #[arg(long, default_value = "pcd")]
    encoding: EncodingMode,
}

#[derive(Subcommand)]
enum Command {
    /// Samples the point-set corpus for the encoder.
    GenObjects,
    /// Builds the grasp table and the demonstration dataset.
    GenData,
    /// Trains and freezes the point-set encoder.
    TrainEncoder,
    /// Trains one policy with DAgger.
    TrainPolicy(PolicyChoice),
    /// Runs one episode and writes its states as CSV.
    Rollout {
        #[command(flatten)]
        policy: PolicyChoice,
        #[arg(long, default_value = "cylinder")]
        shape: String,
        /// Object pose `x,y,theta`; defaults to the pose of evaluation trial `--trial`.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        pose: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Solve IK for the start pose instead of the dataset lookup.
        #[arg(long)]
        ik_start: bool,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Evaluates every trained policy on training and held-out shapes.
    Eval {
        #[arg(long)]
        trials: Option<usize>,
        /// JSON report path; a CSV episode log is written next to it.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        ik_start: bool,
        /// Policies as `arch-encoding`, e.g. `ngf-pcd,mlp-pos`; defaults to all trained ones.
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<String>>,
    },
}

enum CliError {
    Config(String),
    Missing { path: PathBuf, verb: &'static str },
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(Error::InvalidArgument(_)) => 2,
            CliError::Core(Error::TrainingAbort { .. }) => 4,
            CliError::Missing { .. } | CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Missing { path, verb } => write!(f, "missing {}; run `fabricgrasp {verb}` first", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<PipelineConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn policy_stem(arch: Arch, encoding: EncodingMode) -> String {
    format!("{}-{}", arch.as_str(), encoding.as_str())
}

/// `out/name`, which the `verb` stage produces.
fn artifact(out: &Path, name: &str, verb: &'static str) -> CliResult<PathBuf> {
    let path = out.join(name);
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Missing { path, verb })
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_vec_pretty(value).map_err(Error::from)?).map_err(Error::from)?;
    Ok(())
}

fn object_encoder(out: &Path, encoding: EncodingMode) -> CliResult<ObjectEncoder> {
    Ok(match encoding {
        EncodingMode::Pos => ObjectEncoder::Pos,
        EncodingMode::Pcd => ObjectEncoder::Pcd(load_autoencoder(&artifact(out, ENCODER, "train-encoder")?)?.0),
    })
}

/// Dataset with encodings matching `encoder`.
fn encoded_dataset(cfg: &PipelineConfig, out: &Path, encoder: &ObjectEncoder) -> CliResult<TrajectoryDataset> {
    let ds = load_dataset(&artifact(out, DATASET, "gen-data")?)?;
    Ok(match encoder {
        ObjectEncoder::Pos => ds,
        ObjectEncoder::Pcd(_) => encode_dataset(&cfg.scene, &ds, encoder)?,
    })
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    fs::create_dir_all(out).map_err(Error::from)?;
    match &cli.command {
        Command::GenObjects => {
            let corpus = cfg.generate_objects()?;
            save_point_sets(&corpus, &out.join(OBJECTS))?;
            println!("wrote {} point sets to {}", corpus.len(), out.join(OBJECTS).display());
        }
        Command::GenData => {
            let (table, ds) = cfg.generate_data()?;
            table.save(&out.join(GRASPS))?;
            save_dataset(&ds, &out.join(DATASET))?;
            println!(
                "wrote {} grasps and {} trajectories ({} rejected) to {}",
                table.entries.len(),
                ds.len(),
                ds.rejected,
                out.display()
            );
        }
        Command::TrainEncoder => {
            let corpus = load_point_sets(&artifact(out, OBJECTS, "gen-objects")?)?;
            let (enc, dec, report) = train_autoencoder(&corpus, &cfg.encoder)?;
            save_autoencoder(&enc, Some(&dec), &out.join(ENCODER))?;
            write_json(&out.join(ENCODER_REPORT), &report)?;
            println!(
                "held-out chamfer {:.3e} (untrained {:.3e})",
                report.heldout_chamfer_trained, report.heldout_chamfer_untrained
            );
        }
        Command::TrainPolicy(choice) => {
            let encoder = object_encoder(out, choice.encoding)?;
            let ds = encoded_dataset(&cfg, out, &encoder)?;
            let (policy, report) = train(choice.arch, &ds, &cfg.policy, &cfg.train)?;
            let stem = policy_stem(choice.arch, choice.encoding);
            policy.save(&out.join(format!("policy-{stem}.json")))?;
            write_json(&out.join(format!("train-{stem}.json")), &report)?;
            println!(
                "trained {stem}: {} parameters, best validation loss {:.4} at round {}",
                report.param_count, report.best_validation_loss, report.best_round
            );
        }
        Command::Rollout {
            policy: choice,
            shape,
            pose,
            trial,
            ik_start,
            csv,
        } => {
            let sid = cfg.scene.shape_id(shape)?;
            let pose = match pose {
                Some(p) => Pose2::new(p[0], p[1], p[2]),
                None => trial_pose(&cfg.scene, cfg.seed, sid, *trial),
            };
            let encoder = object_encoder(out, choice.encoding)?;
            let ds = encoded_dataset(&cfg, out, &encoder)?;
            let stem = policy_stem(choice.arch, choice.encoding);
            let policy = Policy::load(&artifact(out, &format!("policy-{stem}.json"), "train-policy")?)?;
            let object = cfg.scene.make_object(sid, pose)?;
            let mut episode = cfg.eval.episode.clone();
            episode.ik_start |= *ik_start;
            let mut rng = RunSeed(cfg.seed).substream("eval-episode", &[sid as u64, *trial as u64]);
            let outcome = run_episode(&cfg.scene, &object, &policy, &encoder, &ds, &episode, &mut rng)?;
            outcome.trajectory.write_csv(BufWriter::new(File::create(csv).map_err(Error::from)?))?;
            println!(
                "{stem} on {shape} at ({:.3}, {:.3}, {:.3}): phase {:?}, success {}, steps {:?}{}",
                pose.x,
                pose.y,
                pose.theta,
                outcome.phase,
                outcome.success,
                outcome.steps,
                outcome.diagnostics.failure.map(|f| format!(", {f}")).unwrap_or_default()
            );
        }
        Command::Eval {
            trials,
            report,
            ik_start,
            policies,
        } => {
            let mut eval_cfg = cfg.eval.clone();
            if let Some(t) = trials {
                eval_cfg.trials = *t;
            }
            eval_cfg.episode.ik_start |= *ik_start;
            let wanted: Vec<(Arch, EncodingMode)> = match policies {
                Some(list) => list
                    .iter()
                    .map(|s| {
                        let (a, e) = s
                            .split_once('-')
                            .ok_or_else(|| CliError::Config(format!("policy {s:?} is not arch-encoding")))?;
                        Ok((a.parse::<Arch>()?, e.parse::<EncodingMode>()?))
                    })
                    .collect::<CliResult<_>>()?,
                None => [Arch::Ngf, Arch::Mlp]
                    .into_iter()
                    .flat_map(|a| [EncodingMode::Pcd, EncodingMode::Pos].map(|e| (a, e)))
                    .filter(|&(a, e)| out.join(format!("policy-{}.json", policy_stem(a, e))).exists())
                    .collect(),
            };
            if wanted.is_empty() {
                return Err(CliError::Core(Error::Lookup(format!("no trained policies in {}", out.display()))));
            }
            let mut loaded = Vec::new();
            for &(a, e) in &wanted {
                let stem = policy_stem(a, e);
                let encoder = object_encoder(out, e)?;
                let ds = encoded_dataset(&cfg, out, &encoder)?;
                let policy = Policy::load(&artifact(out, &format!("policy-{stem}.json"), "train-policy")?)?;
                loaded.push((stem, policy, encoder, ds));
            }
            let subjects: Vec<EvalSubject<'_>> = loaded
                .iter()
                .map(|(stem, p, e, d)| EvalSubject {
                    name: stem.clone(),
                    controller: p,
                    encoder: e,
                    dataset: d,
                })
                .collect();
            let result = evaluate(&cfg.scene, &subjects, &cfg.all_ids()?, &eval_cfg)?;
            let report_path = report.clone().unwrap_or_else(|| out.join("eval.json"));
            write_json(&report_path, &result)?;
            let csv_path = report_path.with_extension("csv");
            result.write_csv(BufWriter::new(File::create(&csv_path).map_err(Error::from)?))?;
            for c in &result.cells {
                println!("{:<8} {:<10} {:>4}/{:<4} {:.2}", c.policy, c.shape, c.successes, c.trials, c.success_rate);
            }
            for b in &result.dataset_baseline {
                println!("replay   {:<10} {:>4}/{:<4} {:.2}", b.shape, b.successes, b.demonstrations, b.success_rate);
            }
            println!("wrote {} and {}", report_path.display(), csv_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
