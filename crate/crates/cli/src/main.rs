use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use speckle_core::capturefx::{self, CaptureArtifactConfig};
use speckle_core::classifier::{self, Dataset, SvmModel, SvmParams};
use speckle_core::framestore;
use speckle_core::pipeline::{self, AnalysisConfig, CropMode, CropRegion};
use speckle_core::rheocal;
use speckle_core::scenario::{self, Protocol, ScenarioSpec};
use speckle_core::specklesim::{self, SimConfig};
use speckle_core::stabilizer::{self, FrameSelection};
use speckle_core::{Channel, FrameSequence};

/// Seed used by `corpus` and `experiment` presets when `--seed` is absent.
const DEFAULT_PRESET_SEED: u64 = 1;

#[derive(Parser)]
#[command(name = "speckle", version, about = "Laser speckle viscometry toolkit")]
struct Cli {
    /// Overrides the seed of any simulated or randomized stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a speckle sequence from a simulation config.
    Sim {
        #[arg(long)]
        config: PathBuf,
    },
    /// Apply capture artifacts to a sequence.
    Distort {
        input: PathBuf,
        output: PathBuf,
        /// Artifact config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Select usable frames from a captured sequence.
    Stabilize {
        dir: PathBuf,
        #[arg(long, default_value_t = stabilizer::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = stabilizer::N_SELECT)]
        n: usize,
        #[command(flatten)]
        trim: Trim,
    },
    /// Correlation curve, viscosity coefficient and decorrelation time.
    Analyze {
        dir: PathBuf,
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = CropArg::Full)]
        crop: CropArg,
        #[arg(long, default_value_t = pipeline::DEFAULT_BRIGHT_THRESHOLD)]
        bright_threshold: u8,
        #[arg(long, default_value_t = pipeline::DEFAULT_MAX_CROP)]
        max_crop: usize,
        /// Frame spacing when no selection is given.
        #[arg(long, default_value_t = 1)]
        tau: usize,
        #[command(flatten)]
        trim: Trim,
    },
    /// Fit a cubic V to viscosity calibration from a CSV of points.
    Calibrate {
        #[arg(long)]
        points: PathBuf,
    },
    /// Convert a viscosity coefficient to cP with a calibration model.
    Viscosity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        v: f64,
    },
    /// Train or evaluate the frame-difference SVM.
    Classify {
        #[command(subcommand)]
        action: ClassifyAction,
    },
    /// Generate the sequences of a scenario.
    Corpus {
        #[command(flatten)]
        scenario: ScenarioArg,
    },
    /// Run a scenario end to end and write its report.
    Experiment {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// Exit with status 3 when a check fails.
        #[arg(long)]
        strict: bool,
    },
    /// Split one colour plane out of an RGB sequence.
    Extract {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "blue")]
        channel: Channel,
    },
}

#[derive(Subcommand)]
enum ClassifyAction {
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = classifier::DEFAULT_C)]
        c: f64,
        /// RBF width; the `1 / (d · var)` heuristic when omitted.
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        features: FeatureArgs,
    },
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
    },
}

#[derive(Args, Clone, Copy)]
struct Trim {
    /// Seconds discarded at the start.
    #[arg(long, default_value_t = 0.0)]
    trim_lead: f64,
    /// Seconds discarded at the end.
    #[arg(long, default_value_t = 0.0)]
    trim_tail: f64,
}

#[derive(Args, Clone, Copy)]
struct FeatureArgs {
    /// Pick frames with the stabilizer instead of taking the first ten.
    #[arg(long)]
    stabilize: bool,
    #[arg(long, default_value_t = stabilizer::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[command(flatten)]
    trim: Trim,
}

#[derive(Args)]
struct ScenarioArg {
    /// Preset name or path to a scenario JSON file.
    scenario: String,
    #[arg(long)]
    replicates: Option<usize>,
    /// Training sequences per class, for classification and calibration.
    #[arg(long)]
    train_replicates: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CropArg {
    Full,
    Auto,
}

#[derive(Deserialize)]
struct ManifestEntry {
    dir: PathBuf,
    label: String,
}

#[derive(Serialize)]
struct ViscosityOutput {
    v: f64,
    viscosity_cp: f64,
    extrapolated: bool,
}

#[derive(Serialize)]
struct EvalSummary {
    accuracy: f64,
    total: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

/// 2 for bad inputs, 3 for data that fails analysis.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<speckle_core::Error>()) {
        Some(e) if !e.is_validation() => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::Sim { config } => {
            let mut cfg: SimConfig = read_json(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let (liquid, optics) = cfg.split();
            let seq = specklesim::simulate(&liquid, &optics)?;
            framestore::write_sequence(&seq, required(out, "sim")?)?;
        }
        Command::Distort { input, output, config } => {
            let mut cfg = match config {
                Some(p) => read_json(&p)?,
                None => CaptureArtifactConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let seq = framestore::read_sequence(&input)?;
            framestore::write_sequence(&capturefx::apply_all(seq, &cfg)?, &output)?;
        }
        Command::Stabilize {
            dir,
            threshold,
            n,
            trim,
        } => {
            let seq = load(&dir, trim)?;
            let selection = stabilizer::stabilize(&seq, threshold, n)?;
            emit(out, &selection)?;
        }
        Command::Analyze {
            dir,
            selection,
            crop,
            bright_threshold,
            max_crop,
            tau,
            trim,
        } => {
            let seq = load(&dir, trim)?;
            let selection: Option<FrameSelection> = selection.map(|p| read_json(&p)).transpose()?;
            let cfg = AnalysisConfig {
                crop: match crop {
                    CropArg::Full => CropMode::Full,
                    CropArg::Auto => CropMode::Auto,
                },
                bright_threshold,
                max_size: max_crop,
                tau,
            };
            emit(out, &pipeline::analyze(&seq, selection.as_ref(), &cfg)?)?;
        }
        Command::Calibrate { points } => {
            let model = rheocal::fit_calibration(&rheocal::read_points_csv(&points)?)?;
            emit(out, &model)?;
        }
        Command::Viscosity { model, v } => {
            let model: rheocal::CalibrationModel = read_json(&model)?;
            let c = rheocal::apply_calibration(&model, v);
            emit(
                out,
                &ViscosityOutput {
                    v,
                    viscosity_cp: c.viscosity_cp,
                    extrapolated: c.extrapolated,
                },
            )?;
        }
        Command::Classify { action } => classify(action, out)?,
        Command::Corpus { scenario } => {
            let spec = scenario_spec(&scenario, cli.seed)?;
            let manifest = scenario::gen_corpus(&spec, required(out, "corpus")?)?;
            println!("{} sequences", manifest.sequences.len());
        }
        Command::Experiment { scenario, strict } => {
            let spec = scenario_spec(&scenario, cli.seed)?;
            let report = scenario::run_experiment(&spec)?;
            if let Some(dir) = out {
                report.write(dir)?;
            }
            for c in &report.criteria {
                println!("{}", c.line());
            }
            if strict && !report.passed() {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Extract { input, output, channel } => {
            let rgb = framestore::read_rgb_sequence(&input)?;
            framestore::write_sequence(&framestore::extract_channel(&rgb, channel)?, &output)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn classify(action: ClassifyAction, out: Option<&Path>) -> anyhow::Result<()> {
    match action {
        ClassifyAction::Train {
            manifest,
            c,
            gamma,
            features,
        } => {
            let data = dataset(&manifest, features)?;
            let params = SvmParams {
                c,
                gamma,
                ..SvmParams::default()
            };
            let model = classifier::train_svm(&data, &params)?;
            model.save(required(out, "classify train")?)?;
        }
        ClassifyAction::Eval {
            model,
            manifest,
            features,
        } => {
            let model = SvmModel::load(&model)?;
            let data = dataset(&manifest, features)?;
            let confusion = classifier::evaluate(&model, &data)?;
            let path = required(out, "classify eval")?;
            fs::write(path, confusion.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            let summary = EvalSummary {
                accuracy: confusion.accuracy,
                total: confusion.total(),
            };
            println!("{}", serde_json::to_string(&summary)?);
        }
    }
    Ok(())
}

/// Feature vectors of every manifest entry, tagged with the entry's
/// directory as its sequence id.
fn dataset(manifest: &Path, args: FeatureArgs) -> anyhow::Result<Dataset> {
    let entries: Vec<ManifestEntry> = read_json(manifest)?;
    if entries.is_empty() {
        bail!(speckle_core::Error::InvalidArgument(format!(
            "manifest {} lists no sequences",
            manifest.display()
        )));
    }
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut items = Vec::new();
    for entry in entries {
        let dir = base.join(&entry.dir);
        let seq = load(&dir, args.trim)?;
        let selection = if args.stabilize {
            stabilizer::stabilize(&seq, args.threshold, stabilizer::N_SELECT)?
        } else {
            FrameSelection::spaced(0, stabilizer::N_SELECT, 1)
        };
        let first = seq.frames().first().ok_or(speckle_core::Error::EmptySequence)?;
        let region = CropRegion::full(first.width(), first.height());
        let id = dir.display().to_string();
        for v in classifier::featurize(&seq, &selection, &region).with_context(|| format!("featurizing {id}"))? {
            items.push((entry.label.clone(), id.clone(), v));
        }
    }
    Ok(Dataset::from_labeled(items))
}

fn scenario_spec(arg: &ScenarioArg, seed: Option<u64>) -> anyhow::Result<ScenarioSpec> {
    let mut spec = if scenario::PRESETS.contains(&arg.scenario.as_str()) {
        ScenarioSpec::preset(&arg.scenario, seed.unwrap_or(DEFAULT_PRESET_SEED))?
    } else {
        let mut s = ScenarioSpec::load(Path::new(&arg.scenario))?;
        if let Some(seed) = seed {
            s.seed = seed;
        }
        s
    };
    if let Some(r) = arg.replicates {
        spec.replicates = r;
    }
    if let Some(t) = arg.train_replicates {
        match &mut spec.protocol {
            Protocol::Classification { train_replicates } | Protocol::Calibration { train_replicates } => {
                *train_replicates = t
            }
            Protocol::Viscometry => bail!(speckle_core::Error::InvalidArgument(
                "--train-replicates needs a classification or calibration scenario".into()
            )),
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn load(dir: &Path, trim: Trim) -> anyhow::Result<FrameSequence> {
    let seq = framestore::read_sequence(dir)?;
    if trim.trim_lead == 0.0 && trim.trim_tail == 0.0 {
        return Ok(seq);
    }
    Ok(framestore::trim_transient(&seq, trim.trim_lead, trim.trim_tail)?)
}

fn required<'a>(out: Option<&'a Path>, command: &str) -> anyhow::Result<&'a Path> {
    out.ok_or_else(|| speckle_core::Error::InvalidArgument(format!("`{command}` needs --out")).into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| speckle_core::Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text).map_err(|e| speckle_core::Error::Json {
        path: path.into(),
        source: e,
    })?)
}

/// Pretty JSON to `out`, or to stdout.
fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text).map_err(|e| speckle_core::Error::Io {
            path: path.into(),
            source: e,
        })?,
        None => print!("{text}"),
    }
    Ok(())
}
