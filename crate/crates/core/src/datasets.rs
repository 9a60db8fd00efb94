//! Dual-labeled datasets: synthetic generators, CSV/IDX loaders, and
//! deterministic splits.
//!
//! Every sample carries an original-task label and, optionally, a label for
//! a second (hijack) task. All randomness is driven by explicit seeds so
//! that any dataset, split, or reference selection can be reproduced
//! bit-for-bit.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

/// One data point: a feature vector plus its task labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub original_label: usize,
    /// Label for the hijack task; `None` when the dataset only carries the
    /// original task.
    pub hijack_label: Option<usize>,
}

/// An ordered collection of samples with declared class counts.
///
/// Invariants (checked at construction): samples nonempty, uniform feature
/// dimension, labels within the declared counts, and hijack labels present
/// either for all samples or for none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub n_classes_original: usize,
    /// Number of hijack-task classes; 0 when hijack labels are absent.
    pub n_classes_hijack: usize,
    pub feature_dim: usize,
    pub name: String,
}

/// Which label to stratify a split by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratify {
    Original,
    Hijack,
    None,
}

/// Parameters for a deterministic train/test split.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratify_by: Stratify,
}

impl LabeledDataset {
    /// Validate invariants and build a dataset.
    pub fn new(
        samples: Vec<Sample>,
        n_classes_original: usize,
        n_classes_hijack: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("dataset has no samples".into()));
        }
        let feature_dim = samples[0].features.len();
        if feature_dim == 0 {
            return Err(Error::Data("samples have zero-length features".into()));
        }
        let first_has_hijack = samples[0].hijack_label.is_some();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::Data(format!(
                    "sample {i} has feature length {} but the dataset dimension is {feature_dim}",
                    s.features.len()
                )));
            }
            if s.original_label >= n_classes_original {
                return Err(Error::Data(format!(
                    "sample {i} has original label {} outside [0, {n_classes_original})",
                    s.original_label
                )));
            }
            if s.hijack_label.is_some() != first_has_hijack {
                return Err(Error::Data(format!(
                    "sample {i} breaks the all-or-none hijack label rule"
                )));
            }
            if let Some(h) = s.hijack_label {
                if h >= n_classes_hijack {
                    return Err(Error::Data(format!(
                        "sample {i} has hijack label {h} outside [0, {n_classes_hijack})"
                    )));
                }
            }
        }
        Ok(LabeledDataset {
            samples,
            n_classes_original,
            n_classes_hijack,
            feature_dim,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Whether every sample carries a hijack label.
    pub fn has_hijack_labels(&self) -> bool {
        self.samples.first().is_some_and(|s| s.hijack_label.is_some())
    }

    /// Swap the two tasks: hijack labels become the original labels.
    ///
    /// The previous original labels are kept as hijack labels, so the result
    /// is still dual-labeled. Errors when hijack labels are absent.
    pub fn with_hijack_as_original(&self) -> Result<LabeledDataset> {
        if !self.has_hijack_labels() {
            return Err(Error::Config(format!(
                "dataset '{}' has no hijack labels to promote",
                self.name
            )));
        }
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                features: s.features.clone(),
                original_label: s.hijack_label.expect("checked above"),
                hijack_label: Some(s.original_label),
            })
            .collect();
        LabeledDataset::new(
            samples,
            self.n_classes_hijack,
            self.n_classes_original,
            format!("{}-swapped", self.name),
        )
    }

    /// Keep only samples whose original label is in `classes`, relabeling
    /// them to `0..classes.len()` in ascending order of the old label.
    pub fn restrict_original_classes(&self, classes: &[usize]) -> Result<LabeledDataset> {
        let mapping = class_mapping(classes, self.n_classes_original, "original")?;
        let samples: Vec<Sample> = self
            .samples
            .iter()
            .filter_map(|s| {
                mapping.get(&s.original_label).map(|&new| Sample {
                    features: s.features.clone(),
                    original_label: new,
                    hijack_label: s.hijack_label,
                })
            })
            .collect();
        LabeledDataset::new(
            samples,
            mapping.len(),
            self.n_classes_hijack,
            format!("{}-orig{}", self.name, mapping.len()),
        )
    }

    /// Keep only samples whose hijack label is in `classes`, relabeling them
    /// to `0..classes.len()` in ascending order of the old label.
    pub fn restrict_hijack_classes(&self, classes: &[usize]) -> Result<LabeledDataset> {
        if !self.has_hijack_labels() {
            return Err(Error::Config(format!(
                "dataset '{}' has no hijack labels to restrict",
                self.name
            )));
        }
        let mapping = class_mapping(classes, self.n_classes_hijack, "hijack")?;
        let samples: Vec<Sample> = self
            .samples
            .iter()
            .filter_map(|s| {
                let h = s.hijack_label.expect("checked above");
                mapping.get(&h).map(|&new| Sample {
                    features: s.features.clone(),
                    original_label: s.original_label,
                    hijack_label: Some(new),
                })
            })
            .collect();
        LabeledDataset::new(
            samples,
            self.n_classes_original,
            mapping.len(),
            format!("{}-hijack{}", self.name, mapping.len()),
        )
    }
}

fn class_mapping(
    classes: &[usize],
    available: usize,
    kind: &str,
) -> Result<BTreeMap<usize, usize>> {
    if classes.is_empty() {
        return Err(Error::Config(format!("empty {kind} class subset")));
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != classes.len() {
        return Err(Error::Config(format!("duplicate entries in {kind} class subset")));
    }
    if let Some(&max) = sorted.last() {
        if max >= available {
            return Err(Error::Config(format!(
                "{kind} class {max} requested but only {available} classes exist"
            )));
        }
    }
    Ok(sorted.into_iter().enumerate().map(|(new, old)| (old, new)).collect())
}

/// Generate a dual-labeled Gaussian-blob dataset.
///
/// Each original class and each hijack class gets a random unit direction
/// (fixed by `seed`); the cluster for label pair `(o, h)` is centered at
/// `orig_sep * dir_o + hijack_sep * dir_h` with isotropic noise of standard
/// deviation `noise_sigma`. The two tasks therefore share geometry without
/// being identical, and their separability is independently tunable.
///
/// Samples are emitted in `(original, hijack, replicate)` order, so the
/// result is bitwise reproducible for a fixed seed.
#[allow(clippy::too_many_arguments)]
pub fn generate_dual_blobs(
    n_orig: usize,
    m_hijack: usize,
    dim: usize,
    n_per_cell: usize,
    orig_sep: f64,
    hijack_sep: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_orig < 2 {
        return Err(Error::Parameter(format!("n_orig must be >= 2, got {n_orig}")));
    }
    if m_hijack < 2 {
        return Err(Error::Parameter(format!("m_hijack must be >= 2, got {m_hijack}")));
    }
    if dim < 2 {
        return Err(Error::Parameter(format!("dim must be >= 2, got {dim}")));
    }
    if n_per_cell == 0 {
        return Err(Error::Parameter("n_per_cell must be >= 1".into()));
    }
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(Error::Parameter(format!(
            "noise_sigma must be finite and >= 0, got {noise_sigma}"
        )));
    }
    if !orig_sep.is_finite() || !hijack_sep.is_finite() {
        return Err(Error::Parameter("separations must be finite".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let orig_dirs: Vec<Vec<f64>> = (0..n_orig).map(|_| unit_vector(dim, &mut rng)).collect();
    let hijack_dirs: Vec<Vec<f64>> = (0..m_hijack).map(|_| unit_vector(dim, &mut rng)).collect();

    let mut samples = Vec::with_capacity(n_orig * m_hijack * n_per_cell);
    for (o, od) in orig_dirs.iter().enumerate() {
        for (h, hd) in hijack_dirs.iter().enumerate() {
            for _ in 0..n_per_cell {
                let features: Vec<f64> = (0..dim)
                    .map(|d| {
                        let noise = noise_sigma * std_normal.sample(&mut rng);
                        orig_sep * od[d] + hijack_sep * hd[d] + noise
                    })
                    .collect();
                samples.push(Sample {
                    features,
                    original_label: o,
                    hijack_label: Some(h),
                });
            }
        }
    }
    LabeledDataset::new(
        samples,
        n_orig,
        m_hijack,
        format!("dual-blobs-{n_orig}x{m_hijack}d{dim}s{seed}"),
    )
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| std_normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Load a dataset from the CSV schema
/// `orig_label[,hijack_label],f0,f1,...,f{d-1}` (UTF-8, header row,
/// LF or CRLF line endings).
///
/// Class counts are inferred as `max label + 1`.
pub fn load_csv(path: impl AsRef<Path>, has_hijack_column: bool) -> Result<LabeledDataset> {
    load_csv_with_counts(path, has_hijack_column, None, None)
}

/// [`load_csv`] with explicit class-count overrides for sparse files whose
/// rows do not realize every class.
pub fn load_csv_with_counts(
    path: impl AsRef<Path>,
    has_hijack_column: bool,
    n_classes_original: Option<usize>,
    n_classes_hijack: Option<usize>,
) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: cannot read header: {e}", path.display())))?
        .clone();
    let label_cols = if has_hijack_column { 2 } else { 1 };
    if headers.len() < label_cols + 1 {
        return Err(Error::Format(format!(
            "{}: header has {} columns but at least {} are required",
            path.display(),
            headers.len(),
            label_cols + 1
        )));
    }
    if headers.get(0) != Some("orig_label") {
        return Err(Error::Format(format!(
            "{}: first column must be 'orig_label', found '{}'",
            path.display(),
            headers.get(0).unwrap_or("")
        )));
    }
    if has_hijack_column && headers.get(1) != Some("hijack_label") {
        return Err(Error::Format(format!(
            "{}: second column must be 'hijack_label', found '{}'",
            path.display(),
            headers.get(1).unwrap_or("")
        )));
    }
    let feature_dim = headers.len() - label_cols;

    let mut samples = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1; // 1-based data row, matching error messages
        let record =
            record.map_err(|e| Error::Format(format!("{}: row {row}: {e}", path.display())))?;
        if record.len() != headers.len() {
            return Err(Error::Format(format!(
                "{}: row {row}: expected {} fields, found {}",
                path.display(),
                headers.len(),
                record.len()
            )));
        }
        let original_label = parse_label(record.get(0).unwrap_or(""), path, row, "orig_label")?;
        let hijack_label = if has_hijack_column {
            Some(parse_label(record.get(1).unwrap_or(""), path, row, "hijack_label")?)
        } else {
            None
        };
        let mut features = Vec::with_capacity(feature_dim);
        for col in label_cols..headers.len() {
            let cell = record.get(col).unwrap_or("");
            let value: f64 = cell.trim().parse().map_err(|_| {
                Error::Format(format!(
                    "{}: row {row}: non-numeric feature '{cell}' in column {}",
                    path.display(),
                    headers.get(col).unwrap_or("?")
                ))
            })?;
            features.push(value);
        }
        samples.push(Sample {
            features,
            original_label,
            hijack_label,
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    let max_orig = samples.iter().map(|s| s.original_label).max().unwrap_or(0);
    let n_orig = match n_classes_original {
        Some(n) if n > max_orig => n,
        Some(n) => {
            return Err(Error::Config(format!(
                "class-count override {n} but a label {max_orig} is present"
            )))
        }
        None => max_orig + 1,
    };
    let n_hijack = if has_hijack_column {
        let max_h = samples.iter().filter_map(|s| s.hijack_label).max().unwrap_or(0);
        match n_classes_hijack {
            Some(m) if m > max_h => m,
            Some(m) => {
                return Err(Error::Config(format!(
                    "class-count override {m} but a hijack label {max_h} is present"
                )))
            }
            None => max_h + 1,
        }
    } else {
        0
    };

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    LabeledDataset::new(samples, n_orig, n_hijack, name)
}

fn parse_label(cell: &str, path: &Path, row: usize, col: &str) -> Result<usize> {
    let trimmed = cell.trim();
    let value: i64 = trimmed.parse().map_err(|_| {
        Error::Format(format!(
            "{}: row {row}: non-integer {col} '{trimmed}'",
            path.display()
        ))
    })?;
    if value < 0 {
        return Err(Error::Format(format!(
            "{}: row {row}: negative {col} {value}",
            path.display()
        )));
    }
    Ok(value as usize)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an image/label pair in the big-endian IDX format.
///
/// Pixels are scaled to `[0, 1]` by dividing by 255 and flattened row-major.
/// The result carries original labels only.
pub fn load_idx_images(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = read_all(images_path)?;
    let label_bytes = read_all(labels_path)?;

    let (image_magic, image_dims) = parse_idx_header(&image_bytes, 3, images_path)?;
    if image_magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic 0x{image_magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}",
            images_path.display()
        )));
    }
    let (label_magic, label_dims) = parse_idx_header(&label_bytes, 1, labels_path)?;
    if label_magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic 0x{label_magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}",
            labels_path.display()
        )));
    }

    let count = image_dims[0] as usize;
    let rows = image_dims[1] as usize;
    let cols = image_dims[2] as usize;
    if label_dims[0] as usize != count {
        return Err(Error::Format(format!(
            "image/label count mismatch: {count} images vs {} labels",
            label_dims[0]
        )));
    }
    let pixel_offset = 4 + 3 * 4;
    let pixels = &image_bytes[pixel_offset..];
    if pixels.len() != count * rows * cols {
        return Err(Error::Format(format!(
            "{}: expected {} pixel bytes, found {}",
            images_path.display(),
            count * rows * cols,
            pixels.len()
        )));
    }
    let labels = &label_bytes[4 + 4..];
    if labels.len() != count {
        return Err(Error::Format(format!(
            "{}: expected {count} label bytes, found {}",
            labels_path.display(),
            labels.len()
        )));
    }

    let dim = rows * cols;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let features = pixels[i * dim..(i + 1) * dim]
            .iter()
            .map(|&p| f64::from(p) / 255.0)
            .collect();
        samples.push(Sample {
            features,
            original_label: labels[i] as usize,
            hijack_label: None,
        });
    }
    let n_classes = samples.iter().map(|s| s.original_label).max().unwrap_or(0) + 1;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    LabeledDataset::new(samples, n_classes, 0, name)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn parse_idx_header(bytes: &[u8], ndims: usize, path: &Path) -> Result<(u32, Vec<u32>)> {
    let header_len = 4 + ndims * 4;
    if bytes.len() < header_len {
        return Err(Error::Format(format!(
            "{}: truncated header ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let dims = (0..ndims)
        .map(|i| {
            let start = 4 + i * 4;
            u32::from_be_bytes(bytes[start..start + 4].try_into().expect("4 bytes"))
        })
        .collect();
    Ok((magic, dims))
}

/// Split a dataset into disjoint train/test parts.
///
/// Rounding rule, per stratum of size `n`: `train = floor(f * n)`,
/// `test = floor((1 - f) * n)`, and the single leftover sample (if any)
/// goes to train; strata with at least two samples always keep at least one
/// sample on each side. Output order preserves the input order within each
/// part.
pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "train_fraction must be in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    if ds.len() < 2 {
        return Err(Error::Data("cannot split a dataset with fewer than 2 samples".into()));
    }
    if spec.stratify_by == Stratify::Hijack && !ds.has_hijack_labels() {
        return Err(Error::Config("cannot stratify by hijack: labels absent".into()));
    }

    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let key = match spec.stratify_by {
            Stratify::Original => s.original_label,
            Stratify::Hijack => s.hijack_label.expect("checked above"),
            Stratify::None => 0,
        };
        strata.entry(key).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for indices in strata.values() {
        let n = indices.len();
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        let train_floor = (spec.train_fraction * n as f64).floor() as usize;
        let test_floor = ((1.0 - spec.train_fraction) * n as f64).floor() as usize;
        let leftover = n.saturating_sub(train_floor + test_floor);
        let mut take = (train_floor + leftover).min(n);
        if n >= 2 {
            take = take.clamp(1, n - 1);
        }
        train_idx.extend_from_slice(&shuffled[..take]);
        test_idx.extend_from_slice(&shuffled[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let pick = |idx: &[usize], suffix: &str| -> Result<LabeledDataset> {
        LabeledDataset::new(
            idx.iter().map(|&i| ds.samples[i].clone()).collect(),
            ds.n_classes_original,
            ds.n_classes_hijack,
            format!("{}-{suffix}", ds.name),
        )
    };
    Ok((pick(&train_idx, "train")?, pick(&test_idx, "test")?))
}

/// A reference database selection plus the withheld remainder.
///
/// The `queries` dataset never contains any of the selected reference
/// samples, so evaluations on it are honest.
#[derive(Debug, Clone)]
pub struct ReferenceSelection {
    /// Exactly `n_classes_hijack * samples_per_class` entries, grouped by
    /// ascending hijack class.
    pub references: Vec<(Sample, usize)>,
    pub queries: LabeledDataset,
}

/// Pick `samples_per_class` exemplars per hijack class, deterministically.
///
/// Selection is seeded: within each class the member indices are shuffled
/// and the first `samples_per_class` are taken.
pub fn build_reference_db_from(
    ds: &LabeledDataset,
    samples_per_class: usize,
    seed: u64,
) -> Result<ReferenceSelection> {
    if samples_per_class == 0 {
        return Err(Error::Parameter("samples_per_class must be >= 1".into()));
    }
    if !ds.has_hijack_labels() {
        return Err(Error::Config(format!(
            "dataset '{}' carries no hijack labels",
            ds.name
        )));
    }
    let m = ds.n_classes_hijack;
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..m).map(|c| (c, Vec::new())).collect();
    for (i, s) in ds.samples.iter().enumerate() {
        by_class
            .get_mut(&s.hijack_label.expect("checked above"))
            .expect("label within declared count")
            .push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(m * samples_per_class);
    let mut withheld = vec![false; ds.len()];
    for (class, indices) in &by_class {
        if indices.len() < samples_per_class {
            return Err(Error::Data(format!(
                "hijack class {class} has {} samples but {samples_per_class} are required",
                indices.len()
            )));
        }
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        let mut picks: Vec<usize> = shuffled[..samples_per_class].to_vec();
        picks.sort_unstable();
        for &i in &picks {
            withheld[i] = true;
            selected.push((ds.samples[i].clone(), *class));
        }
    }

    let remaining: Vec<Sample> = ds
        .samples
        .iter()
        .enumerate()
        .filter(|(i, _)| !withheld[*i])
        .map(|(_, s)| s.clone())
        .collect();
    if remaining.is_empty() {
        return Err(Error::Data(
            "reference selection consumed every sample; nothing left to query".into(),
        ));
    }
    let queries = LabeledDataset::new(
        remaining,
        ds.n_classes_original,
        ds.n_classes_hijack,
        format!("{}-queries", ds.name),
    )?;
    Ok(ReferenceSelection {
        references: selected,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn dual_blobs_size_and_labels() {
        let ds = generate_dual_blobs(2, 2, 4, 5, 5.0, 5.0, 0.1, 7).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.feature_dim, 4);
        assert_eq!(ds.n_classes_original, 2);
        assert_eq!(ds.n_classes_hijack, 2);
        assert!(ds.has_hijack_labels());
    }

    #[test]
    fn dual_blobs_zero_noise_collapses_cells() {
        let ds = generate_dual_blobs(2, 3, 4, 4, 2.0, 3.0, 0.0, 11).unwrap();
        for chunk in ds.samples.chunks(4) {
            for s in chunk {
                assert_eq!(s.features, chunk[0].features);
                assert_eq!(s.original_label, chunk[0].original_label);
                assert_eq!(s.hijack_label, chunk[0].hijack_label);
            }
        }
    }

    #[test]
    fn dual_blobs_deterministic() {
        let a = generate_dual_blobs(3, 5, 16, 10, 4.0, 4.0, 0.5, 1).unwrap();
        let b = generate_dual_blobs(3, 5, 16, 10, 4.0, 4.0, 0.5, 1).unwrap();
        assert_eq!(a, b);
        let c = generate_dual_blobs(3, 5, 16, 10, 4.0, 4.0, 0.5, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dual_blobs_rejects_bad_params() {
        assert!(generate_dual_blobs(1, 2, 4, 1, 1.0, 1.0, 0.1, 0).is_err());
        assert!(generate_dual_blobs(2, 1, 4, 1, 1.0, 1.0, 0.1, 0).is_err());
        assert!(generate_dual_blobs(2, 2, 1, 1, 1.0, 1.0, 0.1, 0).is_err());
        assert!(generate_dual_blobs(2, 2, 4, 1, 1.0, 1.0, -0.1, 0).is_err());
    }

    #[test]
    fn zero_noise_hijack_classes_nearest_centroid_separable() {
        // brute-force nearest-centroid check on the noise-free geometry
        let ds = generate_dual_blobs(3, 4, 8, 2, 3.0, 3.0, 0.0, 5).unwrap();
        let m = ds.n_classes_hijack;
        let mut centroids = vec![vec![0.0; ds.feature_dim]; m];
        let mut counts = vec![0usize; m];
        for s in &ds.samples {
            let h = s.hijack_label.unwrap();
            counts[h] += 1;
            for (c, x) in centroids[h].iter_mut().zip(&s.features) {
                *c += x;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
        for s in &ds.samples {
            let best = (0..m)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(&s.features)
                        .map(|(c, x)| (c - x) * (c - x))
                        .sum();
                    let db: f64 = centroids[b]
                        .iter()
                        .zip(&s.features)
                        .map(|(c, x)| (c - x) * (c - x))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(best, s.hijack_label.unwrap());
        }
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn csv_roundtrip_schema() {
        let f = write_temp("orig_label,hijack_label,f0,f1\n0,1,0.5,1.5\n1,0,2.0,3.0\n2,1,-1.0,0.25\n");
        let ds = load_csv(f.path(), true).unwrap();
        assert_eq!(ds.feature_dim, 2);
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_classes_original, 3);
        assert_eq!(ds.n_classes_hijack, 2);
        assert_eq!(ds.samples[0].features, vec![0.5, 1.5]);
    }

    #[test]
    fn csv_without_hijack_column() {
        let f = write_temp("orig_label,f0\n0,1.0\n1,2.0\n");
        let ds = load_csv(f.path(), false).unwrap();
        assert!(!ds.has_hijack_labels());
        assert_eq!(ds.n_classes_hijack, 0);
        assert_eq!(ds.feature_dim, 1);
    }

    #[test]
    fn csv_bad_cell_names_row() {
        let f = write_temp("orig_label,hijack_label,f0,f1\n2,0,1.5,abc\n");
        let err = load_csv(f.path(), true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 1"), "message: {msg}");
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn csv_negative_label_rejected() {
        let f = write_temp("orig_label,f0\n-1,1.0\n");
        let err = load_csv(f.path(), false).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn csv_ragged_row_rejected() {
        let f = write_temp("orig_label,f0,f1\n0,1.0,2.0\n1,3.0\n");
        let err = load_csv(f.path(), false).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("row 2"), "message: {err}");
    }

    #[test]
    fn csv_crlf_accepted() {
        let f = write_temp("orig_label,f0\r\n0,1.0\r\n1,2.0\r\n");
        let ds = load_csv(f.path(), false).unwrap();
        assert_eq!(ds.len(), 2);
    }

    fn idx_pair(count: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&(count as u32).to_be_bytes());
        images.extend_from_slice(&(rows as u32).to_be_bytes());
        images.extend_from_slice(&(cols as u32).to_be_bytes());
        for i in 0..count * rows * cols {
            images.push((i % 256) as u8);
        }
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(count as u32).to_be_bytes());
        for i in 0..count {
            labels.push((i % 3) as u8);
        }
        (images, labels)
    }

    #[test]
    fn idx_shapes_and_scaling() {
        let (images, labels) = idx_pair(10, 28, 28);
        let fi = write_temp_bytes(&images);
        let fl = write_temp_bytes(&labels);
        let ds = load_idx_images(fi.path(), fl.path()).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.feature_dim, 784);
        assert!(!ds.has_hijack_labels());
        // pixel 255 lands at flat index 255 of the first image
        assert_eq!(ds.samples[0].features[255], 1.0);
        assert_eq!(ds.samples[0].features[0], 0.0);
    }

    fn write_temp_bytes(content: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn idx_wrong_magic_rejected() {
        let (mut images, labels) = idx_pair(2, 2, 2);
        images[3] = 0x99;
        let fi = write_temp_bytes(&images);
        let fl = write_temp_bytes(&labels);
        let err = load_idx_images(fi.path(), fl.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let (images, mut labels) = idx_pair(10, 4, 4);
        labels[7] = 9; // declare 9 labels against 10 images
        labels.pop();
        let fi = write_temp_bytes(&images);
        let fl = write_temp_bytes(&labels);
        let err = load_idx_images(fi.path(), fl.path()).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "message: {err}");
    }

    #[test]
    fn split_deterministic_and_disjoint() {
        let ds = generate_dual_blobs(2, 5, 4, 2, 3.0, 3.0, 0.3, 3).unwrap();
        let spec = SplitSpec {
            train_fraction: 0.7,
            seed: 9,
            stratify_by: Stratify::Original,
        };
        let (tr1, te1) = split(&ds, &spec).unwrap();
        let (tr2, te2) = split(&ds, &spec).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        assert_eq!(tr1.len() + te1.len(), ds.len());

        // union as multisets equals the input
        let mut all: Vec<&Sample> = tr1.samples.iter().chain(te1.samples.iter()).collect();
        let mut orig: Vec<&Sample> = ds.samples.iter().collect();
        let key = |s: &&Sample| {
            (
                s.original_label,
                s.hijack_label,
                s.features.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            )
        };
        all.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(all, orig);
    }

    #[test]
    fn split_20_samples_fraction_07() {
        let ds = generate_dual_blobs(2, 2, 4, 5, 3.0, 3.0, 0.2, 1).unwrap();
        let (tr, te) = split(
            &ds,
            &SplitSpec {
                train_fraction: 0.7,
                seed: 0,
                stratify_by: Stratify::None,
            },
        )
        .unwrap();
        assert_eq!(tr.len(), 14);
        assert_eq!(te.len(), 6);
    }

    #[test]
    fn split_stratified_uniform_four_class() {
        // 100 samples, 4 original classes of 25, fraction 0.5:
        // per class train = floor(12.5) = 12, test = floor(12.5) = 12,
        // leftover -> train, so 13 train / 12 test per class.
        let samples: Vec<Sample> = (0..100)
            .map(|i| Sample {
                features: vec![i as f64, 0.0],
                original_label: i % 4,
                hijack_label: None,
            })
            .collect();
        let ds = LabeledDataset::new(samples, 4, 0, "uniform").unwrap();
        let (tr, te) = split(
            &ds,
            &SplitSpec {
                train_fraction: 0.5,
                seed: 42,
                stratify_by: Stratify::Original,
            },
        )
        .unwrap();
        for class in 0..4 {
            let in_train = tr.samples.iter().filter(|s| s.original_label == class).count();
            let in_test = te.samples.iter().filter(|s| s.original_label == class).count();
            assert_eq!(in_train, 13, "class {class}");
            assert_eq!(in_test, 12, "class {class}");
        }
    }

    #[test]
    fn split_keeps_small_classes_on_both_sides() {
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                features: vec![i as f64],
                original_label: i / 2,
                hijack_label: None,
            })
            .collect();
        let ds = LabeledDataset::new(samples, 2, 0, "tiny").unwrap();
        let (tr, te) = split(
            &ds,
            &SplitSpec {
                train_fraction: 0.9,
                seed: 1,
                stratify_by: Stratify::Original,
            },
        )
        .unwrap();
        for class in 0..2 {
            assert!(tr.samples.iter().any(|s| s.original_label == class));
            assert!(te.samples.iter().any(|s| s.original_label == class));
        }
    }

    #[test]
    fn split_single_sample_errors() {
        let ds = LabeledDataset::new(
            vec![Sample {
                features: vec![1.0],
                original_label: 0,
                hijack_label: None,
            }],
            1,
            0,
            "one",
        )
        .unwrap();
        assert!(split(
            &ds,
            &SplitSpec {
                train_fraction: 0.5,
                seed: 0,
                stratify_by: Stratify::None,
            }
        )
        .is_err());
    }

    #[test]
    fn reference_selection_counts_and_withholding() {
        let ds = generate_dual_blobs(2, 5, 4, 3, 3.0, 3.0, 0.2, 1).unwrap();
        let sel = build_reference_db_from(&ds, 1, 7).unwrap();
        assert_eq!(sel.references.len(), 5);
        let classes: Vec<usize> = sel.references.iter().map(|(_, c)| *c).collect();
        assert_eq!(classes, vec![0, 1, 2, 3, 4]);
        assert_eq!(sel.queries.len(), ds.len() - 5);
        for (r, _) in &sel.references {
            assert!(!sel.queries.samples.contains(r));
        }
    }

    #[test]
    fn reference_selection_deterministic() {
        let ds = generate_dual_blobs(2, 4, 4, 4, 3.0, 3.0, 0.2, 1).unwrap();
        let a = build_reference_db_from(&ds, 2, 5).unwrap();
        let b = build_reference_db_from(&ds, 2, 5).unwrap();
        assert_eq!(a.references, b.references);
        assert_eq!(a.queries, b.queries);
    }

    #[test]
    fn reference_selection_rejects_bad_params() {
        let ds = generate_dual_blobs(2, 4, 4, 2, 3.0, 3.0, 0.2, 1).unwrap();
        assert!(build_reference_db_from(&ds, 0, 5).is_err());
        let err = build_reference_db_from(&ds, 10, 5).unwrap_err();
        assert!(err.to_string().contains("class"), "message: {err}");
    }

    proptest::proptest! {
        /// Splits are disjoint, cover the input as multisets, respect the
        /// per-stratum floor rule, and are deterministic per seed.
        #[test]
        fn split_partitions_the_dataset(
            n_orig in 2usize..5,
            m_hijack in 2usize..5,
            n_per_cell in 1usize..5,
            fraction in 0.05f64..0.95,
            seed in 0u64..500,
            stratify_idx in 0usize..3,
        ) {
            let ds = generate_dual_blobs(n_orig, m_hijack, 3, n_per_cell, 2.0, 2.0, 0.2, seed)
                .unwrap();
            let stratify = [Stratify::Original, Stratify::Hijack, Stratify::None][stratify_idx];
            let spec = SplitSpec { train_fraction: fraction, seed, stratify_by: stratify };
            let result = split(&ds, &spec);
            let Ok((tr, te)) = result else {
                // only legitimate failure: one side would be empty
                proptest::prop_assume!(false);
                unreachable!();
            };
            proptest::prop_assert_eq!(tr.len() + te.len(), ds.len());

            let key = |s: &Sample| {
                (
                    s.original_label,
                    s.hijack_label,
                    s.features.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                )
            };
            let mut all: Vec<_> = tr.samples.iter().chain(te.samples.iter()).map(key).collect();
            let mut orig: Vec<_> = ds.samples.iter().map(key).collect();
            all.sort();
            orig.sort();
            proptest::prop_assert_eq!(all, orig);

            let (tr2, te2) = split(&ds, &spec).unwrap();
            proptest::prop_assert_eq!(&tr, &tr2);
            proptest::prop_assert_eq!(&te, &te2);

            // every stratum with >= 2 samples appears on both sides
            if stratify == Stratify::Original {
                for class in 0..n_orig {
                    let total = ds.samples.iter().filter(|s| s.original_label == class).count();
                    if total >= 2 {
                        proptest::prop_assert!(tr.samples.iter().any(|s| s.original_label == class));
                        proptest::prop_assert!(te.samples.iter().any(|s| s.original_label == class));
                    }
                }
            }
        }
    }

    #[test]
    fn restrict_relabels_densely() {
        let ds = generate_dual_blobs(4, 6, 4, 2, 3.0, 3.0, 0.2, 1).unwrap();
        let sub = ds.restrict_original_classes(&[1, 3]).unwrap();
        assert_eq!(sub.n_classes_original, 2);
        assert!(sub.samples.iter().all(|s| s.original_label < 2));
        let subh = ds.restrict_hijack_classes(&[0, 2, 5]).unwrap();
        assert_eq!(subh.n_classes_hijack, 3);
        assert!(subh.samples.iter().all(|s| s.hijack_label.unwrap() < 3));
        assert!(ds.restrict_original_classes(&[9]).is_err());
    }
}
