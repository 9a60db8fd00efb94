//! Explanatory studies: feature correlations across networks, sweep
//! harnesses over task-complexity ratios and width expansion, random
//! projection distance-preservation checks, and feature export.

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{Network, TapPoint};
use crate::util::{mean, median};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Pearson correlation coefficient between two equally long series.
///
/// Returns NaN when either series is constant (the coefficient is
/// undefined there); distribution builders exclude those entries.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "pearson requires equal lengths");
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let mx = mean(x);
    let my = mean(y);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return f64::NAN;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// How units of the two networks are paired for correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationPairing {
    /// Unit `j` of the first network against unit `j` of the second.
    MatchedIndex,
    /// Every unit of the first network against every unit of the second.
    AllPairs,
}

/// Distribution of per-unit correlations between two networks' activations
/// at one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub layer: usize,
    pub pairing: CorrelationPairing,
    /// One coefficient per retained unit pair, always within [-1, 1].
    pub r_values: Vec<f64>,
    /// Unit pairs dropped because one side was constant over the probe set.
    pub dead_units: usize,
    pub mean_r: f64,
    pub median_r: f64,
    pub fraction_positive: f64,
}

/// Correlate layer-`k` activations of two same-architecture networks over a
/// probe set.
pub fn correlation_distribution(
    net_a: &Network,
    net_b: &Network,
    layer: usize,
    probe: &LabeledDataset,
    pairing: CorrelationPairing,
) -> Result<CorrelationReport> {
    if layer >= net_a.hidden_count() || layer >= net_b.hidden_count() {
        return Err(Error::Config(format!(
            "layer {layer} is out of range for the compared networks"
        )));
    }
    let width_a = net_a.realized_widths[layer + 1];
    let width_b = net_b.realized_widths[layer + 1];
    if width_a != width_b {
        return Err(Error::Config(format!(
            "layer {layer} widths differ: {width_a} vs {width_b}"
        )));
    }
    let series = |net: &Network| -> Result<Vec<Vec<f64>>> {
        // unit-major: series[j][s] is unit j's activation on probe sample s
        let mut acts = vec![Vec::with_capacity(probe.len()); width_a];
        for s in &probe.samples {
            let trace = net.forward(&s.features)?;
            for (j, &v) in trace.hidden[layer].iter().enumerate() {
                acts[j].push(v);
            }
        }
        Ok(acts)
    };
    let a = series(net_a)?;
    let b = series(net_b)?;

    let mut r_values = Vec::new();
    let mut dead_units = 0;
    let mut push = |x: &[f64], y: &[f64]| {
        let r = pearson(x, y);
        if r.is_nan() {
            dead_units += 1;
        } else {
            r_values.push(r);
        }
    };
    match pairing {
        CorrelationPairing::MatchedIndex => {
            for j in 0..width_a {
                push(&a[j], &b[j]);
            }
        }
        CorrelationPairing::AllPairs => {
            for x in &a {
                for y in &b {
                    push(x, y);
                }
            }
        }
    }

    // summary stats are zero when every unit pair was dead; dead_units
    // carries the real story, and zeros keep the report JSON-clean
    let (mean_r, median_r, fraction_positive) = if r_values.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (
            mean(&r_values),
            median(&r_values),
            r_values.iter().filter(|&&r| r > 0.0).count() as f64 / r_values.len() as f64,
        )
    };
    Ok(CorrelationReport {
        layer,
        pairing,
        mean_r,
        median_r,
        fraction_positive,
        r_values,
        dead_units,
    })
}

/// One point on a sweep curve: position on the axis plus named metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub metrics: std::collections::BTreeMap<String, f64>,
}

/// A metric curve along one experiment axis; `x` is strictly increasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCurve {
    pub axis: String,
    pub points: Vec<SweepPoint>,
    pub seeds: Vec<u64>,
}

impl SweepCurve {
    /// Assemble a curve from unordered points, sorting by `x` and merging
    /// equal positions by averaging their metrics.
    pub fn from_points(axis: impl Into<String>, mut points: Vec<SweepPoint>, seeds: Vec<u64>) -> Result<Self> {
        if points.iter().any(|p| !p.x.is_finite()) {
            return Err(Error::Numeric("non-finite sweep axis value".into()));
        }
        points.sort_by(|a, b| a.x.partial_cmp(&b.x).expect("finite axis"));
        let mut merged: Vec<SweepPoint> = Vec::with_capacity(points.len());
        for p in points {
            match merged.last_mut() {
                Some(last) if last.x == p.x => {
                    let n = last.metrics.get("merged_count").copied().unwrap_or(1.0);
                    for (k, v) in &p.metrics {
                        let prev = last.metrics.get(k).copied().unwrap_or(0.0);
                        last.metrics.insert(k.clone(), (prev * n + v) / (n + 1.0));
                    }
                    last.metrics.insert("merged_count".into(), n + 1.0);
                }
                _ => merged.push(p),
            }
        }
        Ok(SweepCurve {
            axis: axis.into(),
            points: merged,
            seeds,
        })
    }

    /// Values of one metric along the curve.
    pub fn metric(&self, name: &str) -> Vec<f64> {
        self.points
            .iter()
            .filter_map(|p| p.metrics.get(name).copied())
            .collect()
    }

    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.x).collect()
    }
}

/// Distance-preservation statistics of random linear maps and random ReLU
/// networks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomProjectionStats {
    pub dims_in: usize,
    pub dims_out: usize,
    pub n_points: usize,
    pub n_trials: usize,
    /// Per-trial maximum pairwise distortion of the scaled Gaussian map.
    pub linear_max_distortions: Vec<f64>,
    pub linear_median_max_distortion: f64,
    /// Distribution of pairwise distance ratios through a random ReLU MLP.
    pub mlp_ratio_mean: f64,
    pub mlp_ratio_median: f64,
    pub mlp_ratio_min: f64,
    pub mlp_ratio_max: f64,
}

/// Maximum relative pairwise-distance distortion between a point set and its
/// image: `max |d(f(x), f(y)) / d(x, y) - 1|` over all pairs.
pub fn max_pairwise_distortion(original: &[Vec<f64>], mapped: &[Vec<f64>]) -> Result<f64> {
    if original.len() != mapped.len() || original.len() < 2 {
        return Err(Error::Parameter(
            "distortion needs two equally sized sets of >= 2 points".into(),
        ));
    }
    let mut worst = 0.0f64;
    for i in 0..original.len() {
        for j in (i + 1)..original.len() {
            let d_in = euclidean(&original[i], &original[j]);
            let d_out = euclidean(&mapped[i], &mapped[j]);
            if d_in == 0.0 {
                continue;
            }
            worst = worst.max((d_out / d_in - 1.0).abs());
        }
    }
    Ok(worst)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Check how well random maps preserve pairwise distances.
///
/// Per trial: draw `n_points` standard Gaussian points in `dims_in`
/// dimensions, project them with a Gaussian matrix scaled by
/// `1/sqrt(dims_out)`, and record the maximum pairwise distortion. The same
/// points also pass through a random two-layer ReLU network, whose pairwise
/// distance ratios are aggregated across all trials.
pub fn random_projection_check(
    dims_in: usize,
    dims_out: usize,
    n_points: usize,
    n_trials: usize,
    seed: u64,
) -> Result<RandomProjectionStats> {
    if dims_in < 2 || dims_out < 2 {
        return Err(Error::Parameter("projection dims must be >= 2".into()));
    }
    if n_points < 2 || n_trials == 0 {
        return Err(Error::Parameter("need >= 2 points and >= 1 trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let relu_sigma = Normal::new(0.0, (2.0 / dims_in as f64).sqrt()).expect("he sigma");

    let mut linear_max_distortions = Vec::with_capacity(n_trials);
    let mut mlp_ratios = Vec::new();
    for _ in 0..n_trials {
        let points: Vec<Vec<f64>> = (0..n_points)
            .map(|_| (0..dims_in).map(|_| std_normal.sample(&mut rng)).collect())
            .collect();

        // scaled Gaussian linear map
        let scale = 1.0 / (dims_out as f64).sqrt();
        let matrix: Vec<f64> = (0..dims_in * dims_out)
            .map(|_| std_normal.sample(&mut rng) * scale)
            .collect();
        let projected: Vec<Vec<f64>> = points
            .iter()
            .map(|p| {
                (0..dims_out)
                    .map(|r| {
                        matrix[r * dims_in..(r + 1) * dims_in]
                            .iter()
                            .zip(p)
                            .map(|(w, v)| w * v)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        linear_max_distortions.push(max_pairwise_distortion(&points, &projected)?);

        // random two-layer ReLU net: dims_in -> dims_in -> dims_out
        let w1: Vec<f64> = (0..dims_in * dims_in).map(|_| relu_sigma.sample(&mut rng)).collect();
        let w2_sigma = Normal::new(0.0, (2.0 / dims_in as f64).sqrt()).expect("he sigma");
        let w2: Vec<f64> = (0..dims_in * dims_out).map(|_| w2_sigma.sample(&mut rng)).collect();
        let through_net: Vec<Vec<f64>> = points
            .iter()
            .map(|p| {
                let hidden: Vec<f64> = (0..dims_in)
                    .map(|r| {
                        w1[r * dims_in..(r + 1) * dims_in]
                            .iter()
                            .zip(p)
                            .map(|(w, v)| w * v)
                            .sum::<f64>()
                            .max(0.0)
                    })
                    .collect();
                (0..dims_out)
                    .map(|r| {
                        w2[r * dims_in..(r + 1) * dims_in]
                            .iter()
                            .zip(&hidden)
                            .map(|(w, v)| w * v)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        for i in 0..n_points {
            for j in (i + 1)..n_points {
                let d_in = euclidean(&points[i], &points[j]);
                if d_in > 0.0 {
                    mlp_ratios.push(euclidean(&through_net[i], &through_net[j]) / d_in);
                }
            }
        }
    }

    Ok(RandomProjectionStats {
        dims_in,
        dims_out,
        n_points,
        n_trials,
        linear_median_max_distortion: median(&linear_max_distortions),
        linear_max_distortions,
        mlp_ratio_mean: mean(&mlp_ratios),
        mlp_ratio_median: median(&mlp_ratios),
        mlp_ratio_min: mlp_ratios.iter().cloned().fold(f64::INFINITY, f64::min),
        mlp_ratio_max: mlp_ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Export tapped activations for every sample as CSV in the dataset schema
/// (`orig_label[,hijack_label],f0..`), so external tools can embed or plot
/// them.
pub fn export_features(
    net: &Network,
    ds: &LabeledDataset,
    layer: TapPoint,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut rows: Vec<String> = Vec::with_capacity(ds.len() + 1);
    let first = crate::network::tap(&net.forward(&ds.samples[0].features)?, layer)?;
    let with_hijack = ds.has_hijack_labels();
    let mut header = String::from("orig_label");
    if with_hijack {
        header.push_str(",hijack_label");
    }
    for i in 0..first.len() {
        header.push_str(&format!(",f{i}"));
    }
    rows.push(header);
    for s in &ds.samples {
        let tapped = crate::network::tap(&net.forward(&s.features)?, layer)?;
        let mut row = s.original_label.to_string();
        if with_hijack {
            row.push_str(&format!(",{}", s.hijack_label.expect("all-or-none rule")));
        }
        for v in &tapped {
            row.push_str(&format!(",{v}"));
        }
        rows.push(row);
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(file, "{row}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
