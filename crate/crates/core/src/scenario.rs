//! Synthetic corpora and end-to-end experiments.
//!
//! A [`ScenarioSpec`] lists liquid classes, how many sequences (replicates)
//! to simulate per class, the capture artifacts and what to do with the
//! measurements: report viscometry, train a classifier, or fit a
//! calibration. [`run_experiment`] simulates every sequence, stabilizes and
//! analyzes it, and checks the scenario's criteria.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capturefx::{self, CaptureArtifactConfig};
use crate::classifier::{self, ConfusionMatrix, Dataset, SvmParams};
use crate::error::{ensure, Error, Result};
use crate::frame::FrameSequence;
use crate::framestore;
use crate::pipeline::{self, Analysis, AnalysisConfig, CropRegion};
use crate::rheocal::{self, CalibrationModel};
use crate::rng::{derive_seed, domain};
use crate::specklesim::{self, LiquidSpec, OpticsConfig, ROOM_TEMPERATURE_K};
use crate::stabilizer::{self, FrameSelection, DEFAULT_THRESHOLD, N_SELECT};
use crate::stats;

pub const CORPUS_MANIFEST: &str = "corpus.json";
pub const REPORT_JSON: &str = "report.json";
pub const SEQUENCES_CSV: &str = "sequences.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const BINARY_CONFUSION_CSV: &str = "confusion_binary.csv";

/// Frames simulated per sequence in artifact-free presets.
pub const CLEAN_FRAMES: usize = 10;

/// Magnification of the dilution preset: a quarter of the default.
pub const DILUTION_PIXELS_PER_METER: f64 = specklesim::DEFAULT_PIXELS_PER_METER / 4.0;

/// Scatterers per sequence in the dilution preset.
pub const DILUTION_PARTICLE_COUNT: usize = 2000;

pub const PRESETS: [&str; 6] = [
    "viscosity-grid",
    "blood",
    "milk-fat",
    "ten-liquids",
    "adulterated-milk",
    "cream-dilution",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub liquid: LiquidSpec,
}

/// What the measurements of a scenario are used for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Protocol {
    /// Per-class viscosity coefficients only.
    Viscometry,
    /// The first `train_replicates` sequences of each class train an SVM,
    /// the rest test it.
    Classification { train_replicates: usize },
    /// The first `train_replicates` sequences of each class fit `V → η`,
    /// the rest are converted with the fitted model.
    Calibration { train_replicates: usize },
}

/// Which analysis of a sequence a check looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// Artifact-free frames `0..10`.
    Clean,
    /// The captured sequence, stabilized when artifacts are present.
    Captured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "kebab-case")]
pub enum Check {
    /// Class-mean V strictly increases in class order.
    VOrdering {
        source: Source,
    },
    /// Class-mean V has Spearman ρ = 1 against class viscosity.
    VSpearman {
        source: Source,
    },
    /// Pearson r between τc and η over all sequences with a finite τc.
    TauCLinearity {
        source: Source,
        min_r: f64,
    },
    /// Stabilized V is within `max_error` of the clean V on the same frames
    /// for every sequence, while the unstabilized V misses by more than
    /// `max_error` in the median.
    Stabilizer {
        max_error: f64,
    },
    /// The V ranges of different classes do not overlap.
    VClustersSeparated {
        source: Source,
    },
    Accuracy {
        min: f64,
    },
    /// Accuracy after merging classes with `η ≥ split_pa_s` into "viscous"
    /// and the rest into "less-viscous".
    BinaryAccuracy {
        min: f64,
        split_pa_s: f64,
    },
    /// Pearson r between calibrated and true viscosity on fresh sequences.
    CalibrationLinearity {
        min_r: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub classes: Vec<ClassSpec>,
    /// Sequences per class.
    pub replicates: usize,
    pub seed: u64,
    /// Optics shared by all sequences; the seed is replaced per sequence.
    pub optics: OpticsConfig,
    /// `None` models an artifact-free capture, analyzed on consecutive
    /// frames without stabilization.
    pub artifacts: Option<CaptureArtifactConfig>,
    pub protocol: Protocol,
    #[serde(default)]
    pub checks: Vec<Check>,
}

fn liquid(viscosity_pa_s: f64, radius_um: f64, opacity: f64) -> LiquidSpec {
    LiquidSpec::new(viscosity_pa_s, radius_um * 1e-6, ROOM_TEMPERATURE_K, opacity)
}

fn classes(items: &[(&str, LiquidSpec)]) -> Vec<ClassSpec> {
    items
        .iter()
        .map(|(n, l)| ClassSpec {
            name: n.to_string(),
            liquid: *l,
        })
        .collect()
}

impl ScenarioSpec {
    /// Built-in scenario by name; see [`PRESETS`].
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let default_optics = OpticsConfig::default();
        let small_optics = OpticsConfig {
            width: 128,
            height: 128,
            ..default_optics
        };
        // Artifact-free captures are analyzed on frames 0..10 only.
        let short_optics = |particle_count| OpticsConfig {
            frames: CLEAN_FRAMES,
            particle_count,
            ..default_optics
        };
        let spec = match name {
            "viscosity-grid" => Self {
                name: name.into(),
                classes: [1e-3, 2e-3, 4e-3, 1e-2, 1e-1]
                    .iter()
                    .map(|&eta| ClassSpec {
                        name: format!("eta-{eta:e}"),
                        liquid: LiquidSpec::with_viscosity(eta),
                    })
                    .collect(),
                replicates: 3,
                seed,
                optics: default_optics,
                artifacts: Some(CaptureArtifactConfig::default()),
                protocol: Protocol::Viscometry,
                checks: vec![
                    Check::VSpearman { source: Source::Clean },
                    Check::TauCLinearity {
                        source: Source::Clean,
                        min_r: 0.9,
                    },
                    Check::Stabilizer { max_error: 0.05 },
                ],
            },
            "blood" => Self {
                name: name.into(),
                classes: classes(&[
                    ("uncoagulated", liquid(4e-3, 0.7, 1.0)),
                    ("coagulated", liquid(10.0, 0.7, 1.0)),
                ]),
                replicates: 24,
                seed,
                optics: small_optics,
                artifacts: Some(CaptureArtifactConfig::default()),
                protocol: Protocol::Classification { train_replicates: 18 },
                checks: vec![
                    Check::Accuracy { min: 0.95 },
                    Check::VClustersSeparated {
                        source: Source::Captured,
                    },
                ],
            },
            "milk-fat" => Self {
                name: name.into(),
                classes: classes(&[
                    ("skim", liquid(1.5e-3, 1.0, 1.0)),
                    ("1-percent", liquid(1.6e-3, 1.5, 1.0)),
                    ("2-percent", liquid(1.8e-3, 2.0, 1.0)),
                    ("whole", liquid(2.1e-3, 3.0, 1.0)),
                    ("cream", liquid(1.5e-2, 3.5, 1.0)),
                ]),
                replicates: 3,
                seed,
                optics: short_optics(specklesim::DEFAULT_PARTICLE_COUNT),
                artifacts: None,
                protocol: Protocol::Viscometry,
                checks: vec![Check::VOrdering {
                    source: Source::Captured,
                }],
            },
            "ten-liquids" => Self {
                name: name.into(),
                classes: ten_liquid_classes(),
                replicates: 4,
                seed,
                optics: short_optics(specklesim::DEFAULT_PARTICLE_COUNT),
                artifacts: None,
                protocol: Protocol::Classification { train_replicates: 1 },
                checks: vec![
                    Check::Accuracy { min: 0.90 },
                    Check::BinaryAccuracy {
                        min: 0.98,
                        split_pa_s: 0.1,
                    },
                ],
            },
            "adulterated-milk" => Self {
                name: name.into(),
                classes: classes(&[
                    ("pure", liquid(2.1e-3, 3.0, 1.0)),
                    ("water-added", liquid(1.2e-3, 3.0, 0.9)),
                    ("starch-added", liquid(1.2e-2, 3.0, 1.0)),
                    ("detergent-added", liquid(2.1e-3, 0.8, 0.95)),
                ]),
                replicates: 4,
                seed,
                optics: short_optics(2000),
                artifacts: None,
                protocol: Protocol::Classification { train_replicates: 1 },
                checks: vec![Check::Accuracy { min: 0.9 }],
            },
            "cream-dilution" => {
                // Heavy cream diluted with water; viscosity interpolates
                // log-linearly in the cream fraction. A wide field of view
                // keeps the spread of V between replicates small.
                let (water, cream) = (1.0e-3_f64, 1.0e-2_f64);
                let levels = 8;
                let classes = (0..levels)
                    .map(|k| {
                        let f = k as f64 / (levels - 1) as f64;
                        let eta = (water.ln() * (1.0 - f) + cream.ln() * f).exp();
                        ClassSpec {
                            name: format!("cream-{:03}", (f * 100.0).round() as u32),
                            liquid: liquid(eta, 3.0, 1.0),
                        }
                    })
                    .collect();
                Self {
                    name: name.into(),
                    classes,
                    replicates: 4,
                    seed,
                    optics: OpticsConfig {
                        pixels_per_meter: DILUTION_PIXELS_PER_METER,
                        ..short_optics(DILUTION_PARTICLE_COUNT)
                    },
                    artifacts: None,
                    protocol: Protocol::Calibration { train_replicates: 1 },
                    checks: vec![Check::CalibrationLinearity { min_r: 0.99 }],
                }
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown scenario `{other}`; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.classes.is_empty(), || {
            format!("scenario `{}` has no classes", self.name)
        })?;
        ensure(self.replicates >= 1, || {
            format!("scenario `{}` has no replicates", self.name)
        })?;
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!("duplicate class name `{}`", w[0])));
        }
        for c in &self.classes {
            ensure(is_safe_name(&c.name), || {
                format!("class name `{}` may only use [A-Za-z0-9._-]", c.name)
            })?;
            c.liquid.validate()?;
        }
        self.optics.validate()?;
        if let Some(a) = &self.artifacts {
            a.validate()?;
        }
        match self.protocol {
            Protocol::Viscometry => Ok(()),
            Protocol::Classification { train_replicates } => {
                ensure(self.classes.len() >= 2, || {
                    "classification needs at least 2 classes".into()
                })?;
                ensure(train_replicates >= 1 && train_replicates < self.replicates, || {
                    format!(
                        "train_replicates must lie in 1..{}, got {train_replicates}",
                        self.replicates
                    )
                })?;
                ensure(
                    self.optics.width >= classifier::FEATURE_GRID && self.optics.height >= classifier::FEATURE_GRID,
                    || {
                        format!(
                            "classification needs frames of at least {0}x{0}",
                            classifier::FEATURE_GRID
                        )
                    },
                )
            }
            Protocol::Calibration { train_replicates } => {
                ensure(self.classes.len() >= 4, || {
                    "calibration needs at least 4 classes".into()
                })?;
                ensure(train_replicates >= 1 && train_replicates < self.replicates, || {
                    format!(
                        "train_replicates must lie in 1..{}, got {train_replicates}",
                        self.replicates
                    )
                })
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Every sequence of the corpus, class-major.
    pub fn sequences(&self) -> Vec<SequenceEntry> {
        let train = match self.protocol {
            Protocol::Viscometry => 0,
            Protocol::Classification { train_replicates } | Protocol::Calibration { train_replicates } => {
                train_replicates
            }
        };
        let mut out = Vec::with_capacity(self.classes.len() * self.replicates);
        for (ci, c) in self.classes.iter().enumerate() {
            for r in 0..self.replicates {
                let index = (ci * self.replicates + r) as u64;
                let role = match self.protocol {
                    Protocol::Viscometry => Role::Analysis,
                    _ if r < train => Role::Train,
                    _ => Role::Test,
                };
                out.push(SequenceEntry {
                    id: format!("{}-r{:02}", c.name, r),
                    class: c.name.clone(),
                    replicate: r,
                    role,
                    liquid: c.liquid,
                    sim_seed: derive_seed(self.seed, domain::CORPUS, 2 * index),
                    artifact_seed: self
                        .artifacts
                        .map(|_| derive_seed(self.seed, domain::CORPUS, 2 * index + 1)),
                });
            }
        }
        out
    }
}

fn ten_liquid_classes() -> Vec<ClassSpec> {
    classes(&[
        ("water", liquid(1.0e-3, 0.6, 0.95)),
        ("milk", liquid(2.8e-3, 0.7, 1.0)),
        ("tomato-juice", liquid(7.7e-3, 0.8, 0.9)),
        ("cream", liquid(2.2e-2, 0.7, 0.95)),
        ("olive-oil", liquid(6.0e-2, 0.6, 0.85)),
        ("castor-oil", liquid(0.17, 0.7, 0.9)),
        ("maple-syrup", liquid(0.46, 0.8, 0.8)),
        ("glycerol", liquid(1.3, 0.6, 0.85)),
        ("molasses", liquid(3.6, 0.7, 0.8)),
        ("honey", liquid(10.0, 0.8, 0.75)),
    ])
}

fn is_safe_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Analysis,
    Train,
    Test,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Analysis => "analysis",
            Role::Train => "train",
            Role::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub class: String,
    pub replicate: usize,
    pub role: Role,
    pub liquid: LiquidSpec,
    pub sim_seed: u64,
    pub artifact_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub scenario: ScenarioSpec,
    pub sequences: Vec<SequenceEntry>,
}

/// Clean and captured versions of one sequence.
fn capture(spec: &ScenarioSpec, entry: &SequenceEntry) -> Result<(FrameSequence, Option<FrameSequence>)> {
    let optics = OpticsConfig {
        seed: entry.sim_seed,
        ..spec.optics
    };
    let clean = specklesim::simulate(&entry.liquid, &optics).map_err(|e| Error::stage("simulate", &entry.id, e))?;
    let distorted = match (spec.artifacts, entry.artifact_seed) {
        (Some(cfg), Some(seed)) => Some(
            capturefx::apply_all(clean.clone(), &CaptureArtifactConfig { seed, ..cfg })
                .map_err(|e| Error::stage("distort", &entry.id, e))?,
        ),
        _ => None,
    };
    Ok((clean, distorted))
}

/// Writes the captured version of every sequence to `dir/<id>/` and the
/// manifest to `dir/corpus.json`.
pub fn gen_corpus(spec: &ScenarioSpec, dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sequences = spec.sequences();
    sequences.par_iter().try_for_each(|entry| -> Result<()> {
        let (clean, distorted) = capture(spec, entry)?;
        let captured = distorted.as_ref().unwrap_or(&clean);
        framestore::write_sequence(captured, &dir.join(&entry.id)).map_err(|e| Error::stage("write", &entry.id, e))?;
        Ok(())
    })?;
    let manifest = CorpusManifest {
        scenario: spec.clone(),
        sequences,
    };
    write_json(&dir.join(CORPUS_MANIFEST), &manifest)?;
    Ok(manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Comparison of stabilized and naive analysis against the clean capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizerCheck {
    pub selection: FrameSelection,
    pub v_stabilized: f64,
    /// Clean V on the stabilized frame indices.
    pub v_clean_selected: f64,
    /// V of the distorted capture on frames `0..10`.
    pub v_unstabilized: f64,
}

impl StabilizerCheck {
    pub fn stabilized_error(&self) -> f64 {
        (self.v_stabilized - self.v_clean_selected).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    #[serde(flatten)]
    pub entry: SequenceEntry,
    /// Clean capture, frames `0..10`.
    pub clean: Analysis,
    /// Captured sequence on the selected frames.
    pub captured: Analysis,
    pub stabilizer: Option<StabilizerCheck>,
}

impl SequenceResult {
    pub fn analysis(&self, source: Source) -> &Analysis {
        match source {
            Source::Clean => &self.clean,
            Source::Captured => &self.captured,
        }
    }

    /// Naive error: unstabilized V against the clean V on the same frames.
    pub fn unstabilized_error(&self) -> Option<f64> {
        self.stabilizer
            .as_ref()
            .map(|s| (s.v_unstabilized - self.clean.curve.viscosity_coefficient).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub viscosity_pa_s: f64,
    pub v_clean_mean: f64,
    pub v_captured_mean: f64,
    pub v_captured_min: f64,
    pub v_captured_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub train_vectors: usize,
    pub test_vectors: usize,
    pub gamma: f64,
    pub confusion: ConfusionMatrix,
    pub binary: Option<ConfusionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub id: String,
    pub v: f64,
    pub true_cp: f64,
    pub calibrated_cp: f64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub model: CalibrationModel,
    pub fresh: Vec<CalibrationPoint>,
    pub pearson_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: ScenarioSpec,
    pub sequences: Vec<SequenceResult>,
    pub classes: Vec<ClassSummary>,
    pub classification: Option<ClassificationReport>,
    pub calibration: Option<CalibrationReport>,
    pub criteria: Vec<CriterionResult>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    /// One row per sequence.
    pub fn sequences_csv(&self) -> String {
        let mut s = String::from(
            "id,class,replicate,role,viscosity_pa_s,v_clean,tau_c_clean,v_captured,tau_c_captured,\
             contrast,selection,v_clean_selected,v_unstabilized\n",
        );
        let tau = |t: pipeline::TauC| {
            t.frames()
                .map_or_else(|| pipeline::TauC::NO_DECAY_TAG.to_string(), |v| v.to_string())
        };
        for r in &self.sequences {
            let (sel, vcs, vu) = match &r.stabilizer {
                Some(st) => (
                    st.selection
                        .indices
                        .iter()
                        .map(|i| i.to_string())
                        .collect::<Vec<_>>()
                        .join(" "),
                    st.v_clean_selected.to_string(),
                    st.v_unstabilized.to_string(),
                ),
                None => (String::new(), String::new(), String::new()),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.entry.id,
                r.entry.class,
                r.entry.replicate,
                r.entry.role.as_str(),
                r.entry.liquid.viscosity_pa_s,
                r.clean.curve.viscosity_coefficient,
                tau(r.clean.curve.tau_c),
                r.captured.curve.viscosity_coefficient,
                tau(r.captured.curve.tau_c),
                r.captured.contrast_first_frame,
                sel,
                vcs,
                vu
            );
        }
        s
    }

    /// Writes `report.json`, `sequences.csv` and the confusion matrices.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let json = dir.join(REPORT_JSON);
        write_json(&json, self)?;
        written.push(json);
        let mut text_files = vec![(SEQUENCES_CSV, self.sequences_csv())];
        if let Some(c) = &self.classification {
            text_files.push((CONFUSION_CSV, c.confusion.to_csv()));
            if let Some(b) = &c.binary {
                text_files.push((BINARY_CONFUSION_CSV, b.to_csv()));
            }
        }
        for (name, text) in text_files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
        Ok(written)
    }
}

struct Processed {
    result: SequenceResult,
    features: Vec<Vec<f64>>,
}

fn process(spec: &ScenarioSpec, entry: &SequenceEntry) -> Result<Processed> {
    let stage = |name: &'static str| move |e: Error| Error::stage(name, &entry.id, e);
    let (clean, distorted) = capture(spec, entry)?;
    let cfg = AnalysisConfig::default();
    let clean_analysis = pipeline::analyze(&clean, None, &cfg).map_err(stage("analyze"))?;
    let (captured_seq, captured, stabilizer) = match &distorted {
        Some(d) => {
            let selection = stabilizer::stabilize(d, DEFAULT_THRESHOLD, N_SELECT).map_err(stage("stabilize"))?;
            let captured = pipeline::analyze(d, Some(&selection), &cfg).map_err(stage("analyze"))?;
            let v_clean_selected = pipeline::analyze(&clean, Some(&selection), &cfg)
                .map_err(stage("analyze"))?
                .curve
                .viscosity_coefficient;
            let v_unstabilized = pipeline::analyze(d, None, &cfg)
                .map_err(stage("analyze"))?
                .curve
                .viscosity_coefficient;
            let check = StabilizerCheck {
                v_stabilized: captured.curve.viscosity_coefficient,
                selection,
                v_clean_selected,
                v_unstabilized,
            };
            (d, captured, Some(check))
        }
        None => (&clean, clean_analysis.clone(), None),
    };
    let features = match spec.protocol {
        Protocol::Classification { .. } => {
            let selection = stabilizer
                .as_ref()
                .map(|s| s.selection.clone())
                .unwrap_or_else(|| FrameSelection::spaced(0, N_SELECT, 1));
            let region = CropRegion::full(spec.optics.width, spec.optics.height);
            classifier::featurize(captured_seq, &selection, &region).map_err(stage("featurize"))?
        }
        _ => Vec::new(),
    };
    Ok(Processed {
        result: SequenceResult {
            entry: entry.clone(),
            clean: clean_analysis,
            captured,
            stabilizer,
        },
        features,
    })
}

/// Simulates, captures, stabilizes and analyzes every sequence of `spec`,
/// then trains or calibrates as the protocol asks and evaluates the checks.
pub fn run_experiment(spec: &ScenarioSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let entries = spec.sequences();
    let processed: Vec<Processed> = entries.par_iter().map(|e| process(spec, e)).collect::<Result<_>>()?;

    let classes = summarize(spec, &processed);
    let classification = match spec.protocol {
        Protocol::Classification { .. } => Some(classify(spec, &processed)?),
        _ => None,
    };
    let calibration = match spec.protocol {
        Protocol::Calibration { .. } => Some(calibrate(&processed)?),
        _ => None,
    };
    let sequences: Vec<SequenceResult> = processed.into_iter().map(|p| p.result).collect();
    let mut report = ExperimentReport {
        scenario: spec.clone(),
        sequences,
        classes,
        classification,
        calibration,
        criteria: Vec::new(),
    };
    report.criteria = spec.checks.iter().map(|c| evaluate_check(c, &report)).collect();
    Ok(report)
}

fn summarize(spec: &ScenarioSpec, processed: &[Processed]) -> Vec<ClassSummary> {
    spec.classes
        .iter()
        .map(|c| {
            let rows: Vec<&SequenceResult> = processed
                .iter()
                .map(|p| &p.result)
                .filter(|r| r.entry.class == c.name)
                .collect();
            let clean: Vec<f64> = rows.iter().map(|r| r.clean.curve.viscosity_coefficient).collect();
            let captured: Vec<f64> = rows.iter().map(|r| r.captured.curve.viscosity_coefficient).collect();
            ClassSummary {
                class: c.name.clone(),
                viscosity_pa_s: c.liquid.viscosity_pa_s,
                v_clean_mean: stats::mean(&clean),
                v_captured_mean: stats::mean(&captured),
                v_captured_min: captured.iter().copied().fold(f64::INFINITY, f64::min),
                v_captured_max: captured.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

fn dataset(processed: &[Processed], role: Role) -> Dataset {
    Dataset::from_labeled(processed.iter().filter(|p| p.result.entry.role == role).flat_map(|p| {
        p.features
            .iter()
            .map(|f| (p.result.entry.class.clone(), p.result.entry.id.clone(), f.clone()))
    }))
}

fn classify(spec: &ScenarioSpec, processed: &[Processed]) -> Result<ClassificationReport> {
    let train = dataset(processed, Role::Train);
    let test = dataset(processed, Role::Test);
    let model = classifier::train_svm(&train, &SvmParams::default())
        .map_err(|e| Error::stage("train", spec.name.clone(), e))?;
    let confusion = classifier::evaluate(&model, &test).map_err(|e| Error::stage("evaluate", spec.name.clone(), e))?;
    let split = spec.checks.iter().find_map(|c| match c {
        Check::BinaryAccuracy { split_pa_s, .. } => Some(*split_pa_s),
        _ => None,
    });
    let binary = split.map(|split| {
        let group: Vec<usize> = confusion
            .classes
            .iter()
            .map(|name| {
                let eta = spec
                    .classes
                    .iter()
                    .find(|c| &c.name == name)
                    .map_or(0.0, |c| c.liquid.viscosity_pa_s);
                usize::from(eta >= split)
            })
            .collect();
        confusion.regroup(vec!["less-viscous".into(), "viscous".into()], &group)
    });
    Ok(ClassificationReport {
        train_vectors: train.len(),
        test_vectors: test.len(),
        gamma: model.gamma,
        confusion,
        binary,
    })
}

fn calibrate(processed: &[Processed]) -> Result<CalibrationReport> {
    let point = |p: &Processed| {
        (
            p.result.captured.curve.viscosity_coefficient,
            p.result.entry.liquid.viscosity_pa_s * 1e3,
        )
    };
    let train: Vec<(f64, f64)> = processed
        .iter()
        .filter(|p| p.result.entry.role == Role::Train)
        .map(point)
        .collect();
    let model = rheocal::fit_calibration(&train).map_err(|e| Error::stage("calibrate", "train", e))?;
    let fresh: Vec<CalibrationPoint> = processed
        .iter()
        .filter(|p| p.result.entry.role == Role::Test)
        .map(|p| {
            let (v, true_cp) = point(p);
            let c = rheocal::apply_calibration(&model, v);
            CalibrationPoint {
                id: p.result.entry.id.clone(),
                v,
                true_cp,
                calibrated_cp: c.viscosity_cp,
                extrapolated: c.extrapolated,
            }
        })
        .collect();
    let calibrated: Vec<f64> = fresh.iter().map(|p| p.calibrated_cp).collect();
    let truth: Vec<f64> = fresh.iter().map(|p| p.true_cp).collect();
    let pearson_r = stats::pearson(&calibrated, &truth).unwrap_or(f64::NAN);
    Ok(CalibrationReport {
        model,
        fresh,
        pearson_r,
    })
}

fn source_name(s: Source) -> &'static str {
    match s {
        Source::Clean => "clean",
        Source::Captured => "captured",
    }
}

fn class_means(report: &ExperimentReport, source: Source) -> Vec<f64> {
    report
        .classes
        .iter()
        .map(|c| match source {
            Source::Clean => c.v_clean_mean,
            Source::Captured => c.v_captured_mean,
        })
        .collect()
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" < ")
}

fn evaluate_check(check: &Check, report: &ExperimentReport) -> CriterionResult {
    let result = |name: String, passed: bool, detail: String| CriterionResult { name, passed, detail };
    match *check {
        Check::VOrdering { source } => {
            let means = class_means(report, source);
            let ok = means.windows(2).all(|w| w[0] < w[1]);
            result(
                format!("v-ordering-{}", source_name(source)),
                ok,
                format!("class means {}", fmt_list(&means)),
            )
        }
        Check::VSpearman { source } => {
            let means = class_means(report, source);
            let eta: Vec<f64> = report.classes.iter().map(|c| c.viscosity_pa_s).collect();
            let rho = stats::spearman(&eta, &means).unwrap_or(f64::NAN);
            result(
                format!("v-spearman-{}", source_name(source)),
                rho == 1.0,
                format!("rho = {rho}; class means {}", fmt_list(&means)),
            )
        }
        Check::TauCLinearity { source, min_r } => {
            let (tau, eta): (Vec<f64>, Vec<f64>) = report
                .sequences
                .iter()
                .filter_map(|r| {
                    r.analysis(source)
                        .curve
                        .tau_c
                        .frames()
                        .map(|t| (t, r.entry.liquid.viscosity_pa_s))
                })
                .unzip();
            let r = stats::pearson(&tau, &eta).unwrap_or(f64::NAN);
            result(
                format!("tau-c-linearity-{}", source_name(source)),
                r >= min_r,
                format!("pearson r = {r:.4} over {} sequences (min {min_r})", tau.len()),
            )
        }
        Check::Stabilizer { max_error } => {
            let stab: Vec<f64> = report
                .sequences
                .iter()
                .filter_map(|r| r.stabilizer.as_ref().map(StabilizerCheck::stabilized_error))
                .collect();
            let naive: Vec<f64> = report
                .sequences
                .iter()
                .filter_map(SequenceResult::unstabilized_error)
                .collect();
            if stab.is_empty() {
                return result("stabilizer".into(), false, "scenario has no capture artifacts".into());
            }
            let worst = stab.iter().copied().fold(0.0, f64::max);
            let naive_median = stats::median(&naive);
            result(
                "stabilizer".into(),
                worst <= max_error && naive_median > max_error,
                format!(
                    "max stabilized error {worst:.4}, median unstabilized error {naive_median:.4} (limit {max_error})"
                ),
            )
        }
        Check::VClustersSeparated { source } => {
            let mut ranges: Vec<(f64, f64, &str)> = report
                .classes
                .iter()
                .map(|c| {
                    let vs: Vec<f64> = report
                        .sequences
                        .iter()
                        .filter(|r| r.entry.class == c.class)
                        .map(|r| r.analysis(source).curve.viscosity_coefficient)
                        .collect();
                    (
                        vs.iter().copied().fold(f64::INFINITY, f64::min),
                        vs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        c.class.as_str(),
                    )
                })
                .collect();
            ranges.sort_by(|a, b| a.0.total_cmp(&b.0));
            let ok = ranges.windows(2).all(|w| w[0].1 < w[1].0);
            let detail = ranges
                .iter()
                .map(|(lo, hi, n)| format!("{n} [{lo:.4}, {hi:.4}]"))
                .collect::<Vec<_>>()
                .join(", ");
            result(format!("v-clusters-{}", source_name(source)), ok, detail)
        }
        Check::Accuracy { min } => match &report.classification {
            Some(c) => result(
                "accuracy".into(),
                c.confusion.accuracy >= min,
                format!(
                    "{:.4} on {} test vectors (min {min})",
                    c.confusion.accuracy,
                    c.confusion.total()
                ),
            ),
            None => result("accuracy".into(), false, "scenario trains no classifier".into()),
        },
        Check::BinaryAccuracy { min, split_pa_s } => {
            match report.classification.as_ref().and_then(|c| c.binary.as_ref()) {
                Some(b) => result(
                    "binary-accuracy".into(),
                    b.accuracy >= min,
                    format!("{:.4} with split at {split_pa_s} Pa s (min {min})", b.accuracy),
                ),
                None => result("binary-accuracy".into(), false, "scenario trains no classifier".into()),
            }
        }
        Check::CalibrationLinearity { min_r } => match &report.calibration {
            Some(c) => result(
                "calibration-linearity".into(),
                c.pearson_r >= min_r,
                format!(
                    "pearson r = {:.4} over {} fresh sequences (min {min_r})",
                    c.pearson_r,
                    c.fresh.len()
                ),
            ),
            None => result(
                "calibration-linearity".into(),
                false,
                "scenario fits no calibration".into(),
            ),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(classes: usize, replicates: usize) -> ScenarioSpec {
        ScenarioSpec {
            name: "tiny".into(),
            classes: (0..classes)
                .map(|i| ClassSpec {
                    name: format!("c{i}"),
                    liquid: LiquidSpec::with_viscosity(1e-3 * 10f64.powi(i as i32)),
                })
                .collect(),
            replicates,
            seed: 5,
            optics: OpticsConfig {
                width: 32,
                height: 32,
                frames: 12,
                particle_count: 50,
                ..OpticsConfig::default()
            },
            artifacts: None,
            protocol: Protocol::Viscometry,
            checks: vec![Check::VOrdering { source: Source::Clean }],
        }
    }

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            ScenarioSpec::preset(name, 1).unwrap().validate().unwrap();
        }
        assert!(ScenarioSpec::preset("nope", 1).is_err());
    }

    #[test]
    fn ten_liquids_layout() {
        let s = ScenarioSpec::preset("ten-liquids", 0).unwrap();
        let seqs = s.sequences();
        assert_eq!(seqs.len(), 40);
        assert_eq!(seqs.iter().filter(|e| e.role == Role::Train).count(), 10);
        let eta: Vec<f64> = s.classes.iter().map(|c| c.liquid.viscosity_pa_s).collect();
        assert!(eta[9] / eta[0] >= 1e4);
    }

    #[test]
    fn empty_scenario_is_a_validation_error() {
        let mut s = tiny(1, 1);
        s.classes.clear();
        let e = run_experiment(&s).unwrap_err();
        assert!(e.is_validation());
        let mut s = tiny(1, 1);
        s.replicates = 0;
        assert!(run_experiment(&s).unwrap_err().is_validation());
    }

    #[test]
    fn one_class_one_replicate_gives_one_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_corpus(&tiny(1, 1), dir.path()).unwrap();
        assert_eq!(m.sequences.len(), 1);
        assert!(dir.path().join("c0-r00").join(framestore::METADATA_FILE).exists());
        assert!(dir.path().join(CORPUS_MANIFEST).exists());
    }

    #[test]
    fn corpus_is_deterministic() {
        let mut spec = tiny(2, 2);
        spec.artifacts = Some(CaptureArtifactConfig::default());
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_corpus(&spec, a.path()).unwrap();
        gen_corpus(&spec, b.path()).unwrap();
        for e in spec.sequences() {
            for i in 0..spec.optics.frames {
                let f = framestore::frame_file_name(i);
                assert_eq!(
                    fs::read(a.path().join(&e.id).join(&f)).unwrap(),
                    fs::read(b.path().join(&e.id).join(&f)).unwrap()
                );
            }
        }
        assert_eq!(
            fs::read(a.path().join(CORPUS_MANIFEST)).unwrap(),
            fs::read(b.path().join(CORPUS_MANIFEST)).unwrap()
        );
    }

    #[test]
    fn sequence_seeds_are_distinct() {
        let seqs = tiny(3, 4).sequences();
        let mut seeds: Vec<u64> = seqs.iter().map(|e| e.sim_seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 12);
    }

    #[test]
    fn experiment_report_shape() {
        let report = run_experiment(&tiny(2, 2)).unwrap();
        assert_eq!(report.sequences.len(), 4);
        assert_eq!(report.classes.len(), 2);
        assert_eq!(report.criteria.len(), 1);
        assert_eq!(report.sequences_csv().lines().count(), 5);
        let dir = tempfile::tempdir().unwrap();
        let files = report.write(dir.path()).unwrap();
        assert_eq!(files.len(), 2);
    }

    #[test]
    fn stage_errors_name_the_sequence() {
        let mut spec = tiny(1, 1);
        // Twelve frames cannot hold ten flicker peaks.
        spec.artifacts = Some(CaptureArtifactConfig::default());
        let e = run_experiment(&spec).unwrap_err();
        assert!(
            matches!(&e, Error::Stage { stage: "stabilize", sequence, .. } if sequence == "c0-r00"),
            "{e}"
        );
    }
}
