//! Declarative experiment configuration: one JSON file fully describes a
//! run. Validation checks every cross-field constraint and reports all
//! violations together, each tagged with its config path.

use crate::compression;
use crate::datasets::Stratify;
use crate::error::{Error, Result};
use crate::hijack::Metric;
use crate::network::{Activation, InitScheme};
use crate::training::UnlearnMode;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// One configuration violation, tagged with the config path it concerns.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Where the run's data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetConfig {
    DualBlobs {
        n_orig: usize,
        m_hijack: usize,
        dim: usize,
        n_per_cell: usize,
        orig_sep: f64,
        hijack_sep: f64,
        noise_sigma: f64,
    },
    Csv {
        path: PathBuf,
        has_hijack_column: bool,
        n_classes_original: Option<usize>,
        n_classes_hijack: Option<usize>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub stratify_by: Stratify,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden layer widths; input/output widths come from the dataset.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub width_expansion: f64,
    pub init: InitScheme,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle: bool,
}

/// Knowledge source named in a config, resolved against a concrete network
/// at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SourceSpec {
    Logits,
    LastHidden,
    Layer(usize),
}

impl SourceSpec {
    /// The tap point this source means for a network with `hidden_count`
    /// hidden layers.
    pub fn resolve(&self, hidden_count: usize) -> crate::network::TapPoint {
        match *self {
            SourceSpec::Logits => crate::network::TapPoint::Logits,
            SourceSpec::LastHidden => {
                crate::network::TapPoint::Layer(hidden_count.saturating_sub(1))
            }
            SourceSpec::Layer(k) => crate::network::TapPoint::Layer(k),
        }
    }
}

impl TryFrom<String> for SourceSpec {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "logits" => Ok(SourceSpec::Logits),
            "last_hidden" => Ok(SourceSpec::LastHidden),
            other => {
                if let Some(k) = other.strip_prefix("layer:") {
                    k.parse::<usize>()
                        .map(SourceSpec::Layer)
                        .map_err(|_| format!("bad layer index in source '{other}'"))
                } else {
                    Err(format!(
                        "unknown source '{other}' (expected logits, last_hidden, or layer:<k>)"
                    ))
                }
            }
        }
    }
}

impl From<SourceSpec> for String {
    fn from(s: SourceSpec) -> String {
        match s {
            SourceSpec::Logits => "logits".into(),
            SourceSpec::LastHidden => "last_hidden".into(),
            SourceSpec::Layer(k) => format!("layer:{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackSection {
    pub source: SourceSpec,
    pub metric: Metric,
    pub n_max: usize,
    pub samples_per_class: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            source: SourceSpec::LastHidden,
            metric: Metric::L2,
            n_max: 1,
            samples_per_class: 1,
        }
    }
}

/// Surrogate-training knobs used by the unlearn study.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SurrogateSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        SurrogateSection {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.1,
        }
    }
}

/// Compressed-model selector.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorConfig {
    Topsis,
    /// Minimize `alpha * loss + beta * params`; both values are mandatory.
    Scalarized { alpha: f64, beta: f64 },
}

/// The study a run executes; exactly one per config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StudyConfig {
    Attack {
        export_features: bool,
    },
    Unlearn {
        alpha: f64,
        beta: f64,
        mode: UnlearnMode,
        surrogate: SurrogateSection,
    },
    Compress {
        expansions: Vec<f64>,
        weights: compression::TopsisConfig,
        selector: SelectorConfig,
    },
    RatioSweep {
        n_values: Vec<usize>,
        m_values: Vec<usize>,
    },
    WidthSweep {
        expansions: Vec<f64>,
    },
    Correlation {
        layer: Option<usize>,
        pairing: crate::analysis::CorrelationPairing,
    },
    LogitTruncation {
        k_values: Option<Vec<usize>>,
    },
    JlCheck {
        dims_in: usize,
        dims_out: Vec<usize>,
        n_points: usize,
        n_trials: usize,
    },
}

impl StudyConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            StudyConfig::Attack { .. } => "attack",
            StudyConfig::Unlearn { .. } => "unlearn",
            StudyConfig::Compress { .. } => "compress",
            StudyConfig::RatioSweep { .. } => "ratio_sweep",
            StudyConfig::WidthSweep { .. } => "width_sweep",
            StudyConfig::Correlation { .. } => "correlation",
            StudyConfig::LogitTruncation { .. } => "logit_truncation",
            StudyConfig::JlCheck { .. } => "jl_check",
        }
    }
}

/// Seeds for each randomness stream of a run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub train: u64,
    pub attack: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 1,
            model: 2,
            train: 3,
            attack: 4,
        }
    }
}

/// A fully validated run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: Option<DatasetConfig>,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub study: StudyConfig,
    pub seeds: Seeds,
    pub output_dir: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Raw (permissive) layer: what the JSON parser accepts before validation.

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: Option<RawDataset>,
    split: Option<RawSplit>,
    model: Option<RawModel>,
    train: Option<RawTrain>,
    attack: Option<RawAttack>,
    study: Option<RawStudy>,
    seeds: Option<RawSeeds>,
    output_dir: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    generator: Option<RawGenerator>,
    csv: Option<RawCsv>,
    idx: Option<RawIdx>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerator {
    #[serde(rename = "type")]
    kind: Option<String>,
    n_orig: Option<i64>,
    m_hijack: Option<i64>,
    dim: Option<i64>,
    n_per_cell: Option<i64>,
    orig_sep: Option<f64>,
    hijack_sep: Option<f64>,
    noise_sigma: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCsv {
    path: Option<String>,
    has_hijack_column: Option<bool>,
    n_classes_original: Option<i64>,
    n_classes_hijack: Option<i64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIdx {
    images: Option<String>,
    labels: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSplit {
    train_fraction: Option<f64>,
    stratify_by: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    hidden: Option<Vec<i64>>,
    activation: Option<String>,
    width_expansion: Option<f64>,
    init: Option<serde_json::Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    epochs: Option<i64>,
    batch_size: Option<i64>,
    learning_rate: Option<f64>,
    shuffle: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    source: Option<String>,
    metric: Option<String>,
    n_max: Option<i64>,
    samples_per_class: Option<i64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStudy {
    #[serde(rename = "type")]
    kind: Option<String>,
    // attack
    export_features: Option<bool>,
    // unlearn
    alpha: Option<f64>,
    beta: Option<f64>,
    mode: Option<String>,
    surrogate: Option<RawSurrogate>,
    // compress / width_sweep
    expansions: Option<Vec<f64>>,
    w_loss: Option<f64>,
    w_params: Option<f64>,
    selector: Option<serde_json::Value>,
    // ratio_sweep
    n_values: Option<Vec<i64>>,
    m_values: Option<Vec<i64>>,
    // correlation
    layer: Option<i64>,
    pairing: Option<String>,
    // logit_truncation
    k_values: Option<Vec<i64>>,
    // jl_check
    dims_in: Option<i64>,
    dims_out: Option<Vec<i64>>,
    n_points: Option<i64>,
    n_trials: Option<i64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSurrogate {
    epochs: Option<i64>,
    batch_size: Option<i64>,
    learning_rate: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSeeds {
    data: Option<u64>,
    model: Option<u64>,
    train: Option<u64>,
    attack: Option<u64>,
}

struct Collector {
    violations: Vec<Violation>,
}

impl Collector {
    fn new() -> Self {
        Collector { violations: Vec::new() }
    }

    fn push(&mut self, path: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.to_string(),
            message: message.into(),
        });
    }

    fn usize_min(&mut self, value: Option<i64>, min: i64, path: &str, default: Option<usize>) -> usize {
        match value {
            Some(v) if v >= min => v as usize,
            Some(v) => {
                self.push(path, format!("must be >= {min}, got {v}"));
                min.max(1) as usize
            }
            None => match default {
                Some(d) => d,
                None => {
                    self.push(path, "missing required field");
                    min.max(1) as usize
                }
            },
        }
    }

    fn finite(&mut self, value: Option<f64>, path: &str, default: Option<f64>) -> f64 {
        match value {
            Some(v) if v.is_finite() => v,
            Some(v) => {
                self.push(path, format!("must be finite, got {v}"));
                0.0
            }
            None => match default {
                Some(d) => d,
                None => {
                    self.push(path, "missing required field");
                    0.0
                }
            },
        }
    }
}

/// Validate a parsed JSON document into a [`RunConfig`].
///
/// Returns every violation found, not just the first. `base_dir` anchors
/// relative file paths (normally the config file's directory).
pub fn validate_value(
    value: &serde_json::Value,
    base_dir: &Path,
) -> std::result::Result<RunConfig, Vec<Violation>> {
    let raw: RawConfig = match serde_json::from_value(value.clone()) {
        Ok(r) => r,
        Err(e) => {
            return Err(vec![Violation {
                path: "<root>".into(),
                message: e.to_string(),
            }])
        }
    };
    let mut c = Collector::new();

    let study = validate_study(raw.study.as_ref(), &mut c);
    // the projection check is dataset- and model-free
    let needs_dataset = !matches!(study, StudyConfig::JlCheck { .. });
    let dataset = validate_dataset(raw.dataset.as_ref(), base_dir, needs_dataset, &mut c);
    let split = validate_split(raw.split.as_ref(), &mut c);
    let model = validate_model(raw.model.as_ref(), needs_dataset, &mut c);
    let train = validate_train(raw.train.as_ref(), needs_dataset, &mut c);
    let attack = validate_attack(raw.attack.as_ref(), &mut c);

    // cross-field: a layer tap must exist in the hidden stack
    if let SourceSpec::Layer(k) = attack.source {
        if k >= model.hidden.len() {
            c.push(
                "attack.source",
                format!("layer {k} out of range: model has {} hidden layers", model.hidden.len()),
            );
        }
    }
    if let StudyConfig::Correlation { layer: Some(k), .. } = &study {
        if *k >= model.hidden.len() {
            c.push(
                "study.layer",
                format!("layer {k} out of range: model has {} hidden layers", model.hidden.len()),
            );
        }
    }
    // cross-field: studies that need hijack labels must get them from the data
    if needs_dataset {
        if let Some(ds) = &dataset {
            let has_hijack = match ds {
                DatasetConfig::DualBlobs { .. } => true,
                DatasetConfig::Csv { has_hijack_column, .. } => *has_hijack_column,
                DatasetConfig::Idx { .. } => false,
            };
            if !has_hijack {
                c.push("dataset", format!("study '{}' needs hijack labels", study.kind()));
            }
            if let DatasetConfig::DualBlobs { m_hijack, .. } = ds {
                if attack.n_max > *m_hijack {
                    c.push(
                        "attack.n_max",
                        format!("{} exceeds the {m_hijack} hijack classes", attack.n_max),
                    );
                }
            }
            if let (
                DatasetConfig::DualBlobs { n_orig, m_hijack, .. },
                StudyConfig::RatioSweep { n_values, m_values },
            ) = (ds, &study)
            {
                if let Some(bad) = n_values.iter().find(|&&n| n > *n_orig) {
                    c.push("study.n_values", format!("{bad} exceeds the {n_orig} original classes"));
                }
                if let Some(bad) = m_values.iter().find(|&&m| m > *m_hijack) {
                    c.push("study.m_values", format!("{bad} exceeds the {m_hijack} hijack classes"));
                }
            }
        }
    }

    let seeds = match raw.seeds {
        Some(s) => Seeds {
            data: s.data.unwrap_or(1),
            model: s.model.unwrap_or(2),
            train: s.train.unwrap_or(3),
            attack: s.attack.unwrap_or(4),
        },
        None => Seeds::default(),
    };

    if c.violations.is_empty() {
        Ok(RunConfig {
            dataset,
            split,
            model,
            train,
            attack,
            study,
            seeds,
            output_dir: raw.output_dir.map(PathBuf::from),
        })
    } else {
        Err(c.violations)
    }
}

fn validate_dataset(
    raw: Option<&RawDataset>,
    base_dir: &Path,
    required: bool,
    c: &mut Collector,
) -> Option<DatasetConfig> {
    let raw = match raw {
        Some(r) => r,
        None => {
            if required {
                c.push("dataset", "missing required section");
            }
            return None;
        }
    };
    let present =
        raw.generator.is_some() as u8 + raw.csv.is_some() as u8 + raw.idx.is_some() as u8;
    if present != 1 {
        c.push("dataset", "exactly one of generator/csv/idx must be given");
        return None;
    }
    if let Some(g) = &raw.generator {
        if let Some(kind) = &g.kind {
            if kind != "dual_blobs" {
                c.push("dataset.generator.type", format!("unknown generator '{kind}'"));
            }
        }
        let n_orig = c.usize_min(g.n_orig, 2, "dataset.generator.n_orig", None);
        let m_hijack = c.usize_min(g.m_hijack, 2, "dataset.generator.m_hijack", None);
        let dim = c.usize_min(g.dim, 2, "dataset.generator.dim", None);
        let n_per_cell = c.usize_min(g.n_per_cell, 1, "dataset.generator.n_per_cell", None);
        let orig_sep = c.finite(g.orig_sep, "dataset.generator.orig_sep", None);
        let hijack_sep = c.finite(g.hijack_sep, "dataset.generator.hijack_sep", None);
        let noise_sigma = c.finite(g.noise_sigma, "dataset.generator.noise_sigma", Some(0.0));
        if noise_sigma < 0.0 {
            c.push("dataset.generator.noise_sigma", "must be >= 0");
        }
        return Some(DatasetConfig::DualBlobs {
            n_orig,
            m_hijack,
            dim,
            n_per_cell,
            orig_sep,
            hijack_sep,
            noise_sigma,
        });
    }
    if let Some(csv) = &raw.csv {
        let path = match &csv.path {
            Some(p) => base_dir.join(p),
            None => {
                c.push("dataset.csv.path", "missing required field");
                return None;
            }
        };
        if !path.exists() {
            c.push("dataset.csv.path", format!("file not found: {}", path.display()));
        }
        return Some(DatasetConfig::Csv {
            path,
            has_hijack_column: csv.has_hijack_column.unwrap_or(false),
            n_classes_original: csv.n_classes_original.map(|v| v as usize),
            n_classes_hijack: csv.n_classes_hijack.map(|v| v as usize),
        });
    }
    if let Some(idx) = &raw.idx {
        let images = match &idx.images {
            Some(p) => base_dir.join(p),
            None => {
                c.push("dataset.idx.images", "missing required field");
                return None;
            }
        };
        let labels = match &idx.labels {
            Some(p) => base_dir.join(p),
            None => {
                c.push("dataset.idx.labels", "missing required field");
                return None;
            }
        };
        for (p, tag) in [(&images, "dataset.idx.images"), (&labels, "dataset.idx.labels")] {
            if !p.exists() {
                c.push(tag, format!("file not found: {}", p.display()));
            }
        }
        return Some(DatasetConfig::Idx { images, labels });
    }
    unreachable!("present == 1 guarantees one branch")
}

fn validate_split(raw: Option<&RawSplit>, c: &mut Collector) -> SplitConfig {
    let (fraction, stratify) = match raw {
        Some(r) => (r.train_fraction, r.stratify_by.as_deref()),
        None => (None, None),
    };
    let train_fraction = fraction.unwrap_or(0.7);
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        c.push("split.train_fraction", format!("must be in (0, 1), got {train_fraction}"));
    }
    let stratify_by = match stratify.unwrap_or("original") {
        "original" => Stratify::Original,
        "hijack" => Stratify::Hijack,
        "none" => Stratify::None,
        other => {
            c.push("split.stratify_by", format!("unknown stratification '{other}'"));
            Stratify::Original
        }
    };
    SplitConfig {
        train_fraction,
        stratify_by,
    }
}

fn validate_model(raw: Option<&RawModel>, required: bool, c: &mut Collector) -> ModelConfig {
    let raw = match raw {
        Some(r) => r,
        None => {
            if required {
                c.push("model", "missing required section");
            }
            return ModelConfig {
                hidden: vec![16],
                activation: Activation::Relu,
                width_expansion: 1.0,
                init: InitScheme::He,
            };
        }
    };
    let hidden: Vec<usize> = match &raw.hidden {
        Some(h) if !h.is_empty() => h
            .iter()
            .map(|&w| {
                if w < 1 {
                    c.push("model.hidden", format!("width {w} must be >= 1"));
                    1
                } else {
                    w as usize
                }
            })
            .collect(),
        Some(_) => {
            c.push("model.hidden", "must list at least one hidden width");
            vec![16]
        }
        None => {
            c.push("model.hidden", "missing required field");
            vec![16]
        }
    };
    let activation = match raw.activation.as_deref().unwrap_or("relu") {
        "relu" => Activation::Relu,
        "tanh" => Activation::Tanh,
        other => {
            c.push("model.activation", format!("unknown activation '{other}'"));
            Activation::Relu
        }
    };
    let width_expansion = raw.width_expansion.unwrap_or(1.0);
    if !(width_expansion.is_finite() && width_expansion > 0.0) {
        c.push("model.width_expansion", format!("must be positive, got {width_expansion}"));
    }
    let init = match &raw.init {
        None => InitScheme::He,
        Some(serde_json::Value::String(s)) if s == "he" => InitScheme::He,
        Some(serde_json::Value::Object(map)) => match map.get("gaussian") {
            Some(serde_json::Value::Number(n)) => {
                let sigma = n.as_f64().unwrap_or(-1.0);
                if sigma < 0.0 {
                    c.push("model.init", format!("gaussian sigma must be >= 0, got {sigma}"));
                }
                InitScheme::Gaussian { sigma: sigma.max(0.0) }
            }
            _ => {
                c.push("model.init", "expected {\"gaussian\": <sigma>} or \"he\"");
                InitScheme::He
            }
        },
        Some(other) => {
            c.push("model.init", format!("expected {{\"gaussian\": <sigma>}} or \"he\", got {other}"));
            InitScheme::He
        }
    };
    ModelConfig {
        hidden,
        activation,
        width_expansion,
        init,
    }
}

fn validate_train(raw: Option<&RawTrain>, required: bool, c: &mut Collector) -> TrainSection {
    let raw = match raw {
        Some(r) => r,
        None => {
            if required {
                c.push("train", "missing required section");
            }
            return TrainSection {
                epochs: 1,
                batch_size: 1,
                learning_rate: 0.1,
                shuffle: true,
            };
        }
    };
    let epochs = c.usize_min(raw.epochs, 1, "train.epochs", None);
    let batch_size = c.usize_min(raw.batch_size, 1, "train.batch_size", None);
    let learning_rate = c.finite(raw.learning_rate, "train.learning_rate", None);
    if learning_rate <= 0.0 {
        c.push("train.learning_rate", format!("must be > 0, got {learning_rate}"));
    }
    TrainSection {
        epochs,
        batch_size,
        learning_rate,
        shuffle: raw.shuffle.unwrap_or(true),
    }
}

fn validate_attack(raw: Option<&RawAttack>, c: &mut Collector) -> AttackSection {
    let raw = match raw {
        Some(r) => r,
        None => return AttackSection::default(),
    };
    let source = match raw.source.as_deref() {
        None => SourceSpec::LastHidden,
        Some(s) => match SourceSpec::try_from(s.to_string()) {
            Ok(spec) => spec,
            Err(msg) => {
                c.push("attack.source", msg);
                SourceSpec::LastHidden
            }
        },
    };
    let metric = match raw.metric.as_deref().unwrap_or("l2") {
        "l2" => Metric::L2,
        "cosine" => Metric::Cosine,
        other => {
            c.push("attack.metric", format!("unknown metric '{other}'"));
            Metric::L2
        }
    };
    let n_max = c.usize_min(raw.n_max, 1, "attack.n_max", Some(1));
    let samples_per_class = c.usize_min(raw.samples_per_class, 1, "attack.samples_per_class", Some(1));
    AttackSection {
        source,
        metric,
        n_max,
        samples_per_class,
    }
}

fn validate_study(raw: Option<&RawStudy>, c: &mut Collector) -> StudyConfig {
    let fallback = StudyConfig::Attack { export_features: false };
    let raw = match raw {
        Some(r) => r,
        None => {
            c.push("study", "missing required section");
            return fallback;
        }
    };
    let kind = match raw.kind.as_deref() {
        Some(k) => k,
        None => {
            c.push("study.type", "missing required field");
            return fallback;
        }
    };
    match kind {
        "attack" => StudyConfig::Attack {
            export_features: raw.export_features.unwrap_or(false),
        },
        "unlearn" => {
            let alpha = c.finite(raw.alpha, "study.alpha", Some(1.0));
            if alpha <= 0.0 {
                c.push("study.alpha", "must be > 0");
            }
            let beta = c.finite(raw.beta, "study.beta", Some(0.01));
            if beta < 0.0 {
                c.push("study.beta", "must be >= 0");
            }
            let mode = match raw.mode.as_deref().unwrap_or("commit_both") {
                "commit_both" => UnlearnMode::CommitBoth,
                "evaluate_only" => UnlearnMode::EvaluateOnly,
                other => {
                    c.push("study.mode", format!("unknown mode '{other}'"));
                    UnlearnMode::CommitBoth
                }
            };
            let surrogate = match &raw.surrogate {
                None => SurrogateSection::default(),
                Some(s) => {
                    let d = SurrogateSection::default();
                    SurrogateSection {
                        epochs: c.usize_min(s.epochs, 0, "study.surrogate.epochs", Some(d.epochs)),
                        batch_size: c.usize_min(s.batch_size, 1, "study.surrogate.batch_size", Some(d.batch_size)),
                        learning_rate: c.finite(s.learning_rate, "study.surrogate.learning_rate", Some(d.learning_rate)),
                    }
                }
            };
            StudyConfig::Unlearn {
                alpha,
                beta,
                mode,
                surrogate,
            }
        }
        "compress" => {
            let expansions = raw
                .expansions
                .clone()
                .unwrap_or_else(compression::default_expansion_grid);
            if expansions.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
                c.push("study.expansions", "all expansions must be positive");
            }
            let weights = compression::TopsisConfig {
                w_loss: c.finite(raw.w_loss, "study.w_loss", Some(0.5)),
                w_params: c.finite(raw.w_params, "study.w_params", Some(0.5)),
            };
            if weights.w_loss <= 0.0 || weights.w_params <= 0.0 {
                c.push("study.w_loss", "TOPSIS weights must be positive");
            } else if (weights.w_loss + weights.w_params - 1.0).abs() > 1e-9 {
                c.push("study.w_loss", "TOPSIS weights must sum to 1");
            }
            let selector = match &raw.selector {
                None => SelectorConfig::Topsis,
                Some(serde_json::Value::String(s)) if s == "topsis" => SelectorConfig::Topsis,
                Some(serde_json::Value::Object(map)) => match map.get("scalarized") {
                    Some(inner) => {
                        let alpha = inner.get("alpha").and_then(|v| v.as_f64());
                        let beta = inner.get("beta").and_then(|v| v.as_f64());
                        match (alpha, beta) {
                            (Some(a), Some(b)) if a.is_finite() && b.is_finite() => {
                                SelectorConfig::Scalarized { alpha: a, beta: b }
                            }
                            _ => {
                                c.push(
                                    "study.selector",
                                    "scalarized selector requires explicit finite alpha and beta",
                                );
                                SelectorConfig::Topsis
                            }
                        }
                    }
                    None => {
                        c.push("study.selector", "expected \"topsis\" or {\"scalarized\": {..}}");
                        SelectorConfig::Topsis
                    }
                },
                Some(other) => {
                    c.push("study.selector", format!("unexpected selector {other}"));
                    SelectorConfig::Topsis
                }
            };
            StudyConfig::Compress {
                expansions,
                weights,
                selector,
            }
        }
        "ratio_sweep" => {
            let take = |vals: &Option<Vec<i64>>, path: &str, c: &mut Collector| -> Vec<usize> {
                match vals {
                    Some(v) if !v.is_empty() => v
                        .iter()
                        .map(|&x| {
                            if x < 2 {
                                c.push(path, format!("class count {x} must be >= 2"));
                                2
                            } else {
                                x as usize
                            }
                        })
                        .collect(),
                    _ => {
                        c.push(path, "missing or empty");
                        vec![2]
                    }
                }
            };
            let n_values = take(&raw.n_values, "study.n_values", c);
            let m_values = take(&raw.m_values, "study.m_values", c);
            StudyConfig::RatioSweep { n_values, m_values }
        }
        "width_sweep" => {
            let expansions = raw
                .expansions
                .clone()
                .unwrap_or_else(|| vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5]);
            if expansions.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
                c.push("study.expansions", "all expansions must be positive");
            }
            StudyConfig::WidthSweep { expansions }
        }
        "correlation" => {
            let layer = raw.layer.map(|v| {
                if v < 0 {
                    c.push("study.layer", "must be >= 0");
                    0
                } else {
                    v as usize
                }
            });
            let pairing = match raw.pairing.as_deref().unwrap_or("matched_index") {
                "matched_index" => crate::analysis::CorrelationPairing::MatchedIndex,
                "all_pairs" => crate::analysis::CorrelationPairing::AllPairs,
                other => {
                    c.push("study.pairing", format!("unknown pairing '{other}'"));
                    crate::analysis::CorrelationPairing::MatchedIndex
                }
            };
            StudyConfig::Correlation { layer, pairing }
        }
        "logit_truncation" => {
            let k_values = raw.k_values.as_ref().map(|ks| {
                let mut out: Vec<usize> = ks
                    .iter()
                    .map(|&k| {
                        if k < 1 {
                            c.push("study.k_values", format!("k = {k} must be >= 1"));
                            1
                        } else {
                            k as usize
                        }
                    })
                    .collect();
                out.sort_unstable();
                out.dedup();
                out
            });
            StudyConfig::LogitTruncation { k_values }
        }
        "jl_check" => {
            let dims_in = c.usize_min(raw.dims_in, 2, "study.dims_in", None);
            let dims_out = match &raw.dims_out {
                Some(v) if !v.is_empty() => v
                    .iter()
                    .map(|&d| {
                        if d < 2 {
                            c.push("study.dims_out", format!("dim {d} must be >= 2"));
                            2
                        } else {
                            d as usize
                        }
                    })
                    .collect(),
                _ => {
                    c.push("study.dims_out", "missing or empty");
                    vec![2]
                }
            };
            let n_points = c.usize_min(raw.n_points, 2, "study.n_points", None);
            let n_trials = c.usize_min(raw.n_trials, 1, "study.n_trials", None);
            StudyConfig::JlCheck {
                dims_in,
                dims_out,
                n_points,
                n_trials,
            }
        }
        other => {
            c.push("study.type", format!("unknown study '{other}'"));
            fallback
        }
    }
}

/// Parse and validate a config file; violations are joined into one
/// config error.
pub fn validate_file(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: invalid JSON: {e}", path.display())))?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    validate_value(&value, base_dir).map_err(|violations| {
        let joined = violations
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        Error::Config(format!("{}: {joined}", path.display()))
    })
}
