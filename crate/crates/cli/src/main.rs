use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use protoscene::evaluation::{
    decompose, evaluate, kmeans_baseline, select_prototypes, KmeansFeatures, SelectionBaseline,
};
use protoscene::io::{
    export_decomposition, generate_synthetic_scene, load_scene, save_scene, two_archetype_spec, write_atomic,
    SceneFormat, SynthSpec,
};
use protoscene::training::checkpoint::latest_checkpoint;
use protoscene::training::{load_checkpoint, Checkpoint, TrainConfig, Trainer};
use protoscene::Error;

/// Unsupervised decomposition of 3D scenes into learned prototypes.
#[derive(Parser, Debug)]
#[command(name = "protoscene", version)]
struct Cli {
    /// Seed overriding the one in the configuration or spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bit-reproducible execution. Every code path is already sequential,
    /// so this only records the request in the logs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Training configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on one scene through the curriculum.
    Train {
        #[arg(long)]
        scene: PathBuf,
        /// Run directory for metrics and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Decompose a scene and print the evaluation report.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        scene: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Include greedy prototype selection at this threshold.
        #[arg(long)]
        select_threshold: Option<f64>,
    },
    /// Decompose a scene and write the reconstruction, segmentations,
    /// prototypes and report.
    Decompose {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        scene: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Prototypes whose slots count as instances (default: all).
        #[arg(long, value_delimiter = ',')]
        instance_prototypes: Option<Vec<usize>>,
    },
    /// Greedily remove prototypes that barely contribute to the
    /// reconstruction.
    SelectPrototypes {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        scene: PathBuf,
        /// Largest relative loss increase a removal may cause.
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = BaselineArg::Current)]
        baseline: BaselineArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labelled synthetic scene.
    Synth {
        /// Scene specification (TOML). Defaults to the built-in
        /// cones-and-boxes scene.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Convert a scene file to another format.
    Export {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// k-means clustering baseline for semantic segmentation.
    BaselineKmeans {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        k: usize,
        /// Features to cluster on.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "intensity,elevation")]
        features: Vec<FeatureArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Run directory; its latest checkpoint is used.
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    /// A specific checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormatArg {
    PlyBinary,
    PlyAscii,
    Text,
}

impl From<FormatArg> for SceneFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::PlyBinary => SceneFormat::PlyBinaryLe,
            FormatArg::PlyAscii => SceneFormat::PlyAscii,
            FormatArg::Text => SceneFormat::ColumnarText,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BaselineArg {
    Current,
    Original,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum FeatureArg {
    Intensity,
    Elevation,
}

/// Failure of a command: `User` exits with 1, `Internal` with 2.
enum Failure {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ParameterDomain(_)
            | Error::EmptyCloud(_)
            | Error::Format { .. }
            | Error::Config(_)
            | Error::Infeasible(_)
            | Error::Checkpoint(_)
            | Error::Io(_) => Failure::User(e.into()),
            Error::DimMismatch { .. } | Error::ChannelLength { .. } | Error::Backend(_) | Error::NonFinite { .. } => {
                Failure::Internal(e.into())
            }
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Internal(e.into())
    }
}

fn user(msg: String) -> Failure {
    Failure::User(anyhow::anyhow!(msg))
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.deterministic {
        log::info!("deterministic mode requested");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train { scene, out, resume } => train(&scene, &out, resume, cli.config.as_deref(), cli.seed),
        Command::Evaluate {
            model,
            scene,
            out,
            select_threshold,
        } => {
            let ckpt = load_model(&model)?;
            let (cloud, _) = load_scene(&scene)?;
            let patch = ckpt.config.patch_size()?;
            let d = decompose(&ckpt.model, &cloud, patch)?;
            let (mut report, _) = evaluate(&d, &cloud)?;
            if let Some(t) = select_threshold {
                report.selection_report = Some(select_prototypes(
                    &ckpt.model,
                    &cloud,
                    patch,
                    ckpt.config.loss.coverage,
                    t,
                    SelectionBaseline::Current,
                )?);
            }
            emit(&report, out.as_deref())
        }
        Command::Decompose {
            model,
            scene,
            out,
            instance_prototypes,
        } => {
            let ckpt = load_model(&model)?;
            let (cloud, _) = load_scene(&scene)?;
            let d = decompose(&ckpt.model, &cloud, ckpt.config.patch_size()?)?;
            let (report, labels) = evaluate(&d, &cloud)?;
            let k = ckpt.model.num_prototypes();
            let targets = instance_prototypes.unwrap_or_else(|| (0..k).collect());
            if let Some(bad) = targets.iter().find(|&&t| t >= k) {
                return Err(user(format!("instance prototype {bad} out of range (model has {k})")));
            }
            for f in export_decomposition(&out, &ckpt.model, &cloud, &d, labels.as_ref(), &targets, &report)? {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::SelectPrototypes {
            model,
            scene,
            threshold,
            baseline,
            out,
        } => {
            let ckpt = load_model(&model)?;
            let (cloud, _) = load_scene(&scene)?;
            let baseline = match baseline {
                BaselineArg::Current => SelectionBaseline::Current,
                BaselineArg::Original => SelectionBaseline::Original,
            };
            let report = select_prototypes(
                &ckpt.model,
                &cloud,
                ckpt.config.patch_size()?,
                ckpt.config.loss.coverage,
                threshold,
                baseline,
            )?;
            emit(&report, out.as_deref())
        }
        Command::Synth { spec, out, format } => {
            let mut spec = match spec {
                Some(p) => SynthSpec::from_toml(&std::fs::read_to_string(&p).map_err(|e| user(format!("{}: {e}", p.display())))?)?,
                None => two_archetype_spec(0),
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let scene = generate_synthetic_scene(&spec)?;
            let format = format.map_or_else(|| SceneFormat::from_extension(&out), SceneFormat::from);
            save_scene(&out, &scene.cloud, format)?;
            println!("{} points, {} objects -> {}", scene.cloud.len(), scene.objects.len(), out.display());
            Ok(())
        }
        Command::Export { scene, out, format } => {
            let (cloud, _) = load_scene(&scene)?;
            let format = format.map_or_else(|| SceneFormat::from_extension(&out), SceneFormat::from);
            save_scene(&out, &cloud, format)?;
            Ok(())
        }
        Command::BaselineKmeans { scene, k, features, out } => {
            let (cloud, _) = load_scene(&scene)?;
            let f = KmeansFeatures {
                intensity: features.contains(&FeatureArg::Intensity),
                elevation: features.contains(&FeatureArg::Elevation),
            };
            let r = kmeans_baseline(&cloud, k, f, cli.seed.unwrap_or(0))?;
            emit(&r.miou, out.as_deref())
        }
    }
}

fn train(scene: &Path, out: &Path, resume: bool, config: Option<&Path>, seed: Option<u64>) -> CmdResult {
    let (cloud, _) = load_scene(scene)?;
    let mut trainer = if resume {
        let path = latest_checkpoint(out)?;
        log::info!("resuming from {}", path.display());
        Trainer::from_checkpoint(load_checkpoint(&path)?)?
    } else {
        let mut c = match config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = seed {
            c.seed = s;
        }
        std::fs::create_dir_all(out).map_err(Error::from)?;
        write_atomic(&out.join("config.toml"), c.to_toml().as_bytes())?;
        Trainer::new(c)?
    };
    let summary = trainer.train(&cloud, Some(out))?;
    if let Some(last) = summary.epochs.last() {
        println!(
            "{} steps, {} epochs, final stage {} mean loss {:.6}",
            summary.steps,
            summary.epochs.len(),
            last.stage,
            last.mean_total
        );
    }
    Ok(())
}

fn load_model(args: &ModelArgs) -> std::result::Result<Checkpoint, Failure> {
    let path = match (&args.checkpoint, &args.run) {
        (Some(c), _) => c.clone(),
        (None, Some(run)) => latest_checkpoint(run)?,
        (None, None) => return Err(user("either --run or --checkpoint is required".into())),
    };
    Ok(load_checkpoint(&path)?)
}

fn emit<T: serde::Serialize>(value: &T, out: Option<&Path>) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(p) = out {
        write_atomic(p, text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}
