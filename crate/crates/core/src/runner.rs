//! Orchestrates end-to-end studies from a validated [`RunConfig`] and
//! assembles the experiment report.

use crate::analysis::{self, SweepCurve, SweepPoint};
use crate::compression;
use crate::config::{
    DatasetConfig, RunConfig, SelectorConfig, SourceSpec, StudyConfig, SurrogateSection,
};
use crate::datasets::{self, LabeledDataset, ReferenceSelection, SplitSpec};
use crate::error::{Error, Result};
use crate::hijack::{self, BekSource};
use crate::network::{self, Network, NetworkSpec};
use crate::report::*;
use crate::training::{self, TrainConfig, UnlearnConfig};
use crate::util::mix_seed;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Execute the configured study and return its report.
pub fn run(config: &RunConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let payload = match &config.study {
        StudyConfig::Attack { export_features } => study_attack(config, *export_features)?,
        StudyConfig::Unlearn {
            alpha,
            beta,
            mode,
            surrogate,
        } => study_unlearn(config, *alpha, *beta, *mode, surrogate)?,
        StudyConfig::Compress {
            expansions,
            weights,
            selector,
        } => study_compress(config, expansions, weights, selector)?,
        StudyConfig::RatioSweep { n_values, m_values } => {
            study_ratio_sweep(config, n_values, m_values)?
        }
        StudyConfig::WidthSweep { expansions } => study_width_sweep(config, expansions)?,
        StudyConfig::Correlation { layer, pairing } => {
            study_correlation(config, *layer, *pairing)?
        }
        StudyConfig::LogitTruncation { k_values } => study_logit_truncation(config, k_values)?,
        StudyConfig::JlCheck {
            dims_in,
            dims_out,
            n_points,
            n_trials,
        } => study_jl_check(config, *dims_in, dims_out, *n_points, *n_trials)?,
    };
    Ok(ExperimentReport {
        version: REPORT_VERSION.to_string(),
        study: config.study.kind().to_string(),
        config: config.clone(),
        payload,
        seeds: config.seeds,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Run a study and write `report.json` (plus any exports) under `dir`.
pub fn run_to_dir(config: &RunConfig, dir: &Path) -> Result<ExperimentReport> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = run(config)?;
    report.write(dir.join("report.json"))?;
    if let StudyPayload::Attack(payload) = &report.payload {
        if let Some(name) = &payload.features_csv {
            let prep = prepare(config)?;
            let (net, _) = train_original(config, &prep)?;
            let tap = config.attack.source.resolve(net.hidden_count());
            analysis::export_features(&net, &prep.test_ds, tap, dir.join(name))?;
        }
    }
    Ok(report)
}

/// Validate a config file and run it, honoring an output-dir override.
pub fn run_config_file(
    path: &Path,
    output_override: Option<&Path>,
) -> Result<(ExperimentReport, PathBuf)> {
    let config = crate::config::validate_file(path)?;
    let dir = output_override
        .map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(config.study.kind()));
    let report = run_to_dir(&config, &dir)?;
    Ok((report, dir))
}

/// A loaded dataset with its train/test split.
pub struct Prepared {
    pub full: LabeledDataset,
    pub train_ds: LabeledDataset,
    pub test_ds: LabeledDataset,
}

/// Materialize the configured dataset (generator or file-backed).
pub fn load_dataset(config: &RunConfig) -> Result<LabeledDataset> {
    let spec = config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("this study needs a dataset section".into()))?;
    match spec {
        DatasetConfig::DualBlobs {
            n_orig,
            m_hijack,
            dim,
            n_per_cell,
            orig_sep,
            hijack_sep,
            noise_sigma,
        } => datasets::generate_dual_blobs(
            *n_orig,
            *m_hijack,
            *dim,
            *n_per_cell,
            *orig_sep,
            *hijack_sep,
            *noise_sigma,
            config.seeds.data,
        ),
        DatasetConfig::Csv {
            path,
            has_hijack_column,
            n_classes_original,
            n_classes_hijack,
        } => datasets::load_csv_with_counts(
            path,
            *has_hijack_column,
            *n_classes_original,
            *n_classes_hijack,
        ),
        DatasetConfig::Idx { images, labels } => datasets::load_idx_images(images, labels),
    }
}

/// Load and split the configured dataset.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let full = load_dataset(config)?;
    let (train_ds, test_ds) = datasets::split(
        &full,
        &SplitSpec {
            train_fraction: config.split.train_fraction,
            seed: mix_seed(config.seeds.data, 1),
            stratify_by: config.split.stratify_by,
        },
    )?;
    Ok(Prepared {
        full,
        train_ds,
        test_ds,
    })
}

/// The network spec a config describes, once the data fixes its input and
/// output widths.
pub fn model_spec(config: &RunConfig, input_dim: usize, n_out: usize) -> NetworkSpec {
    let mut widths = Vec::with_capacity(config.model.hidden.len() + 2);
    widths.push(input_dim);
    widths.extend_from_slice(&config.model.hidden);
    widths.push(n_out);
    NetworkSpec::new(
        widths,
        config.model.activation,
        config.model.width_expansion,
        config.model.init,
        config.seeds.model,
    )
}

fn train_cfg(config: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: config.train.epochs,
        batch_size: config.train.batch_size,
        learning_rate: config.train.learning_rate,
        seed: config.seeds.train,
        shuffle: config.train.shuffle,
    }
}

fn train_original(config: &RunConfig, prep: &Prepared) -> Result<(Network, training::TrainReport)> {
    let spec = model_spec(config, prep.full.feature_dim, prep.full.n_classes_original);
    let net = network::build(&spec)?;
    let (trained, mut report) = training::train(&net, &prep.train_ds, &train_cfg(config))?;
    report.test_accuracy = Some(training::dataset_accuracy(&trained, &prep.test_ds)?);
    Ok((trained, report))
}

fn resolve_source(source: SourceSpec, net: &Network) -> Result<BekSource> {
    let tap = source.resolve(net.hidden_count());
    if let BekSource::Layer(k) = tap {
        if k >= net.hidden_count() {
            return Err(Error::Config(format!(
                "source layer {k} out of range: network has {} hidden layers",
                net.hidden_count()
            )));
        }
    }
    Ok(tap)
}

fn reference_split(config: &RunConfig, ds: &LabeledDataset) -> Result<ReferenceSelection> {
    datasets::build_reference_db_from(ds, config.attack.samples_per_class, config.seeds.attack)
}

fn study_attack(config: &RunConfig, export_features: bool) -> Result<StudyPayload> {
    let prep = prepare(config)?;
    let (net, train_report) = train_original(config, &prep)?;
    let source = resolve_source(config.attack.source, &net)?;
    let sel = reference_split(config, &prep.test_ds)?;
    let outcome = hijack::run_attack(
        &net,
        source,
        &sel.references,
        &sel.queries.samples,
        config.attack.metric,
        config.attack.n_max,
        config.seeds.attack,
    )?;
    Ok(StudyPayload::Attack(AttackStudyPayload {
        original_accuracy: train_report
            .test_accuracy
            .expect("train_original always evaluates the test split"),
        train: train_report,
        attack: outcome.report,
        features_csv: export_features.then(|| "features.csv".to_string()),
    }))
}

fn distance_top1(
    config: &RunConfig,
    net: &Network,
    sel: &ReferenceSelection,
) -> Result<f64> {
    let source = resolve_source(config.attack.source, net)?;
    let outcome = hijack::run_attack(
        net,
        source,
        &sel.references,
        &sel.queries.samples,
        config.attack.metric,
        1,
        config.seeds.attack,
    )?;
    Ok(outcome.report.top_n[0])
}

fn surrogate_accuracy(
    config: &RunConfig,
    net: &Network,
    train_ds: &LabeledDataset,
    sel: &ReferenceSelection,
    surrogate: &SurrogateSection,
) -> Result<f64> {
    let source = resolve_source(config.attack.source, net)?;
    let train_features: Vec<&[f64]> = train_ds.samples.iter().map(|s| s.features.as_slice()).collect();
    let vectors: Vec<Vec<f64>> = hijack::extract_bek_batch(net, &train_features, source)?
        .into_iter()
        .map(|b| b.values)
        .collect();
    let labels: Vec<usize> = train_ds
        .samples
        .iter()
        .map(|s| s.hijack_label.expect("hijack labels validated"))
        .collect();
    let cfg = TrainConfig {
        epochs: surrogate.epochs,
        batch_size: surrogate.batch_size,
        learning_rate: surrogate.learning_rate,
        seed: mix_seed(config.seeds.train, 7),
        shuffle: true,
    };
    let model = training::train_surrogate(&vectors, &labels, &cfg)?;
    let query_features: Vec<&[f64]> =
        sel.queries.samples.iter().map(|s| s.features.as_slice()).collect();
    let query_vectors = hijack::extract_bek_batch(net, &query_features, source)?;
    let pairs: Vec<(Vec<f64>, usize)> = query_vectors
        .into_iter()
        .zip(&sel.queries.samples)
        .map(|(b, s)| (b.values, s.hijack_label.expect("hijack labels validated")))
        .collect();
    training::pairs_accuracy(&model, &pairs)
}

fn study_unlearn(
    config: &RunConfig,
    alpha: f64,
    beta: f64,
    mode: training::UnlearnMode,
    surrogate: &SurrogateSection,
) -> Result<StudyPayload> {
    let prep = prepare(config)?;
    let spec = model_spec(config, prep.full.feature_dim, prep.full.n_classes_original);
    let net0 = network::build(&spec)?;
    let cfg = train_cfg(config);

    let (baseline_net, _) = training::train(&net0, &prep.train_ds, &cfg)?;
    let ucfg = UnlearnConfig {
        alpha,
        beta,
        mode,
        tap: None,
    };
    let (unlearned_net, _) = training::meta_unlearn_train(&net0, &prep.train_ds, &cfg, &ucfg)?;

    let sel = reference_split(config, &prep.test_ds)?;
    let row = |net: &Network| -> Result<UnlearnRow> {
        Ok(UnlearnRow {
            original_accuracy: training::dataset_accuracy(net, &prep.test_ds)?,
            surrogate_accuracy: surrogate_accuracy(config, net, &prep.train_ds, &sel, surrogate)?,
            distance_top1: distance_top1(config, net, &sel)?,
        })
    };
    Ok(StudyPayload::Unlearn(UnlearnStudyPayload {
        alpha,
        beta,
        mode,
        baseline: row(&baseline_net)?,
        unlearned: row(&unlearned_net)?,
    }))
}

fn study_compress(
    config: &RunConfig,
    expansions: &[f64],
    weights: &compression::TopsisConfig,
    selector: &SelectorConfig,
) -> Result<StudyPayload> {
    let prep = prepare(config)?;
    // candidates select on a validation slice carved out of the train split
    let (fit_ds, val_ds) = datasets::split(
        &prep.train_ds,
        &SplitSpec {
            train_fraction: 0.75,
            seed: mix_seed(config.seeds.data, 2),
            stratify_by: config.split.stratify_by,
        },
    )?;
    let base_spec = model_spec(config, prep.full.feature_dim, prep.full.n_classes_original);
    let cfg = train_cfg(config);
    let (baseline_net, _) = training::train(&network::build(&base_spec)?, &fit_ds, &cfg)?;

    let candidates = compression::enumerate_candidates(&base_spec, expansions, &fit_ds, &val_ds, &cfg)?;
    let rows: Vec<(f64, f64)> = candidates.iter().map(|c| (c.loss, c.params as f64)).collect();
    let topsis = compression::topsis_rank(&rows, weights)?;
    let (selected_idx, selector_name) = match selector {
        SelectorConfig::Topsis => (topsis.selected, "topsis".to_string()),
        SelectorConfig::Scalarized { alpha, beta } => (
            compression::scalarized_select(&rows, *alpha, *beta)?,
            format!("scalarized(alpha={alpha}, beta={beta})"),
        ),
    };

    let sel = reference_split(config, &prep.test_ds)?;
    let mut table = Vec::with_capacity(candidates.len());
    for (i, cand) in candidates.iter().enumerate() {
        let fv = BekSource::Layer(cand.net.hidden_count().saturating_sub(1));
        let top1 = |source: BekSource| -> Result<f64> {
            let outcome = hijack::run_attack(
                &cand.net,
                source,
                &sel.references,
                &sel.queries.samples,
                config.attack.metric,
                1,
                config.seeds.attack,
            )?;
            Ok(outcome.report.top_n[0])
        };
        table.push(CandidateRow {
            expansion: cand.expansion,
            loss: cand.loss,
            params: cand.params,
            original_acc: training::dataset_accuracy(&cand.net, &prep.test_ds)?,
            hijack_top1_logits: top1(BekSource::Logits)?,
            hijack_top1_fv: top1(fv)?,
            closeness: topsis.closeness[i],
            selected: i == selected_idx,
        });
    }
    let comparison = compression::compression_report(
        &baseline_net,
        &candidates[selected_idx].net,
        candidates[selected_idx].expansion,
        &prep.test_ds,
        &sel.references,
        &sel.queries.samples,
        config.attack.metric,
    )?;
    Ok(StudyPayload::Compress(CompressStudyPayload {
        candidates: table,
        comparison,
        weights: *weights,
        selector: selector_name,
    }))
}

/// One point of the complexity-ratio sweep, reproducible in isolation.
pub fn ratio_sweep_point(
    config: &RunConfig,
    full: &LabeledDataset,
    point_index: usize,
    n: usize,
    m: usize,
) -> Result<SweepPoint> {
    use rand::SeedableRng;
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(config.seeds.data, 100 + point_index as u64));
    let orig_classes = sample_classes(&mut rng, full.n_classes_original, n)?;
    let hijack_classes = sample_classes(&mut rng, full.n_classes_hijack, m)?;
    let restricted = full
        .restrict_original_classes(&orig_classes)?
        .restrict_hijack_classes(&hijack_classes)?;
    let (train_ds, test_ds) = datasets::split(
        &restricted,
        &SplitSpec {
            train_fraction: config.split.train_fraction,
            seed: mix_seed(config.seeds.data, 200 + point_index as u64),
            stratify_by: config.split.stratify_by,
        },
    )?;
    let spec = model_spec(config, restricted.feature_dim, n);
    let (net, _) = training::train(&network::build(&spec)?, &train_ds, &train_cfg(config))?;
    let sel = reference_split(config, &test_ds)?;
    let top1 = distance_top1(config, &net, &sel)?;
    let mut metrics = std::collections::BTreeMap::new();
    metrics.insert("top1".into(), top1);
    metrics.insert("n".into(), n as f64);
    metrics.insert("m".into(), m as f64);
    metrics.insert("lower_bound".into(), hijack::hijack_lower_bound(m)?);
    Ok(SweepPoint {
        x: m as f64 / n as f64,
        metrics,
    })
}

fn sample_classes(
    rng: &mut rand_chacha::ChaCha8Rng,
    available: usize,
    count: usize,
) -> Result<Vec<usize>> {
    if count > available {
        return Err(Error::Config(format!(
            "cannot sample {count} classes from {available}"
        )));
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, available, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn study_ratio_sweep(
    config: &RunConfig,
    n_values: &[usize],
    m_values: &[usize],
) -> Result<StudyPayload> {
    let full = load_dataset(config)?;
    let mut points = Vec::with_capacity(n_values.len() * m_values.len());
    let mut index = 0;
    for &n in n_values {
        for &m in m_values {
            points.push(ratio_sweep_point(config, &full, index, n, m)?);
            index += 1;
        }
    }
    let curve = SweepCurve::from_points(
        "complexity_ratio",
        points,
        vec![config.seeds.data, config.seeds.model, config.seeds.train, config.seeds.attack],
    )?;
    Ok(StudyPayload::RatioSweep(curve))
}

/// One point of the width-expansion sweep, reproducible in isolation.
pub fn width_sweep_point(
    config: &RunConfig,
    prep: &Prepared,
    expansion: f64,
) -> Result<SweepPoint> {
    let mut spec = model_spec(config, prep.full.feature_dim, prep.full.n_classes_original);
    spec.width_expansion = expansion;
    let (net, _) = training::train(&network::build(&spec)?, &prep.train_ds, &train_cfg(config))?;
    let sel = reference_split(config, &prep.test_ds)?;
    let top1 = distance_top1(config, &net, &sel)?;
    let mut metrics = std::collections::BTreeMap::new();
    metrics.insert("hijack_top1".into(), top1);
    metrics.insert(
        "original_accuracy".into(),
        training::dataset_accuracy(&net, &prep.test_ds)?,
    );
    metrics.insert("param_count".into(), net.param_count() as f64);
    Ok(SweepPoint {
        x: expansion,
        metrics,
    })
}

fn study_width_sweep(config: &RunConfig, expansions: &[f64]) -> Result<StudyPayload> {
    let prep = prepare(config)?;
    let mut points = Vec::with_capacity(expansions.len());
    for &e in expansions {
        points.push(width_sweep_point(config, &prep, e)?);
    }
    let curve = SweepCurve::from_points(
        "width_expansion",
        points,
        vec![config.seeds.data, config.seeds.model, config.seeds.train, config.seeds.attack],
    )?;
    Ok(StudyPayload::WidthSweep(curve))
}

fn study_correlation(
    config: &RunConfig,
    layer: Option<usize>,
    pairing: analysis::CorrelationPairing,
) -> Result<StudyPayload> {
    let prep = prepare(config)?;
    let cfg = train_cfg(config);

    let spec_a = model_spec(config, prep.full.feature_dim, prep.full.n_classes_original);
    let (net_a, _) = training::train(&network::build(&spec_a)?, &prep.train_ds, &cfg)?;

    let swapped = prep.train_ds.with_hijack_as_original()?;
    let mut spec_b = model_spec(config, prep.full.feature_dim, prep.full.n_classes_hijack);
    spec_b.seed = mix_seed(config.seeds.model, 1);
    let mut cfg_b = cfg;
    cfg_b.seed = mix_seed(config.seeds.train, 1);
    let (net_b, _) = training::train(&network::build(&spec_b)?, &swapped, &cfg_b)?;

    let k = layer.unwrap_or_else(|| net_a.hidden_count().saturating_sub(1));
    let report = analysis::correlation_distribution(&net_a, &net_b, k, &prep.test_ds, pairing)?;
    Ok(StudyPayload::Correlation(report))
}

fn study_logit_truncation(config: &RunConfig, k_values: &Option<Vec<usize>>) -> Result<StudyPayload> {
    let prep = prepare(config)?;
    let (net, _) = train_original(config, &prep)?;
    let sel = reference_split(config, &prep.test_ds)?;

    let ref_features: Vec<&[f64]> = sel.references.iter().map(|(s, _)| s.features.as_slice()).collect();
    let ref_beks = hijack::extract_bek_batch(&net, &ref_features, BekSource::Logits)?;
    let query_features: Vec<&[f64]> =
        sel.queries.samples.iter().map(|s| s.features.as_slice()).collect();
    let query_beks = hijack::extract_bek_batch(&net, &query_features, BekSource::Logits)?;
    let query_labels: Vec<usize> = sel
        .queries
        .samples
        .iter()
        .map(|s| s.hijack_label.expect("hijack labels validated"))
        .collect();

    let logit_len = net.output_dim();
    let ks: Vec<usize> = match k_values {
        Some(ks) => ks.clone(),
        None => (1..=logit_len).collect(),
    };

    let top1_for = |refs: &[hijack::BekVector], queries: &[hijack::BekVector]| -> Result<f64> {
        let entries = refs
            .iter()
            .cloned()
            .zip(sel.references.iter().map(|(_, c)| *c))
            .collect();
        let db = hijack::ReferenceDb::new(entries)?;
        let pairs: Vec<(hijack::BekVector, usize)> = queries
            .iter()
            .cloned()
            .zip(query_labels.iter().copied())
            .collect();
        hijack::top_n_accuracy(&db, &pairs, config.attack.metric, 1)
    };

    let untruncated_top1 = top1_for(&ref_beks, &query_beks)?;
    let mut points = Vec::with_capacity(ks.len());
    for &k in &ks {
        let refs: Vec<hijack::BekVector> = ref_beks
            .iter()
            .map(|b| hijack::truncate_logits(b, k))
            .collect::<Result<_>>()?;
        let queries: Vec<hijack::BekVector> = query_beks
            .iter()
            .map(|b| hijack::truncate_logits(b, k))
            .collect::<Result<_>>()?;
        points.push(LogitTruncationPoint {
            k,
            top1: top1_for(&refs, &queries)?,
        });
    }
    Ok(StudyPayload::LogitTruncation(LogitTruncationPayload {
        points,
        untruncated_top1,
        logit_len,
    }))
}

fn study_jl_check(
    config: &RunConfig,
    dims_in: usize,
    dims_out: &[usize],
    n_points: usize,
    n_trials: usize,
) -> Result<StudyPayload> {
    let mut points = Vec::with_capacity(dims_out.len());
    for (i, &d) in dims_out.iter().enumerate() {
        points.push(analysis::random_projection_check(
            dims_in,
            d,
            n_points,
            n_trials,
            mix_seed(config.seeds.data, i as u64),
        )?);
    }
    Ok(StudyPayload::JlCheck(JlCheckPayload { points }))
}
