//! Distance-based zero-shot hijacking: extract knowledge vectors from a
//! frozen model, index per-class references, and classify queries by
//! nearest reference in that space.

use crate::datasets::Sample;
use crate::error::{Error, Result};
use crate::network::{self, Network, TapPoint};
use serde::{Deserialize, Serialize};

/// What a model reveals about one input: its logits (black-box access) or
/// one hidden layer's activations (white-box access).
pub type BekSource = TapPoint;

/// Extracted knowledge for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BekVector {
    pub values: Vec<f64>,
    pub source: BekSource,
    pub sample_id: u64,
}

/// Distance metric over extracted vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L2,
    Cosine,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::L2 => write!(f, "l2"),
            Metric::Cosine => write!(f, "cosine"),
        }
    }
}

/// Extract the knowledge vector of `x` from a frozen network.
pub fn extract_bek(net: &Network, x: &[f64], source: BekSource) -> Result<BekVector> {
    let trace = net.forward(x)?;
    Ok(BekVector {
        values: network::tap(&trace, source)?,
        source,
        sample_id: 0,
    })
}

/// Extract knowledge vectors for a batch, numbering them by position.
pub fn extract_bek_batch(net: &Network, xs: &[&[f64]], source: BekSource) -> Result<Vec<BekVector>> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let mut bek = extract_bek(net, x, source)?;
            bek.sample_id = i as u64;
            Ok(bek)
        })
        .collect()
}

/// Distance between two equally long vectors.
///
/// Cosine distance with a zero vector on either side is defined as the
/// maximal value 2.0; [`distance_flagged`] reports when that happened.
pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    distance_flagged(a, b, metric).map(|(d, _)| d)
}

/// Like [`distance`], also returning whether the zero-vector cosine rule
/// fired.
pub fn distance_flagged(a: &[f64], b: &[f64], metric: Metric) -> Result<(f64, bool)> {
    if a.len() != b.len() {
        return Err(Error::Parameter(format!(
            "distance over mismatched lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    match metric {
        Metric::L2 => {
            let d = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            Ok((d, false))
        }
        Metric::Cosine => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Ok((2.0, true));
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            Ok((1.0 - dot / (na * nb), false))
        }
    }
}

/// The attacker's per-class reference index.
///
/// Every hijack class in `[0, m)` holds at least one entry; all vectors share
/// one length and one source.
#[derive(Debug, Clone)]
pub struct ReferenceDb {
    pub entries: Vec<(BekVector, usize)>,
    pub m: usize,
    pub source: BekSource,
}

impl ReferenceDb {
    /// Validate coverage and consistency, inferring `m` as the largest
    /// class index plus one.
    pub fn new(entries: Vec<(BekVector, usize)>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::Parameter("reference database cannot be empty".into()))?;
        let source = first.0.source;
        let dim = first.0.values.len();
        let m = entries.iter().map(|(_, c)| c + 1).max().expect("nonempty");
        let mut covered = vec![false; m];
        for (bek, class) in &entries {
            if bek.source != source {
                return Err(Error::Config(format!(
                    "mixed sources in reference database: {} and {}",
                    bek.source, source
                )));
            }
            if bek.values.len() != dim {
                return Err(Error::Config(format!(
                    "mixed vector lengths in reference database: {} and {dim}",
                    bek.values.len()
                )));
            }
            if bek.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite reference vector".into()));
            }
            covered[*class] = true;
        }
        if let Some(missing) = covered.iter().position(|&c| !c) {
            return Err(Error::Data(format!(
                "hijack class {missing} has no reference entry"
            )));
        }
        Ok(ReferenceDb { entries, m, source })
    }

    pub fn dim(&self) -> usize {
        self.entries[0].0.values.len()
    }
}

/// Ranked classification of one query: classes ordered by ascending
/// distance to their nearest reference entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HijackVerdict {
    /// Each hijack class exactly once, best match first.
    pub ranked_labels: Vec<usize>,
    /// Distance of each ranked class's nearest entry; non-decreasing.
    pub distances: Vec<f64>,
}

impl HijackVerdict {
    /// The inferred label: nearest reference class.
    pub fn top1(&self) -> usize {
        self.ranked_labels[0]
    }
}

/// Classify a query vector against the reference database.
///
/// A class's distance is the minimum over its entries; classes are ranked
/// ascending, ties broken by the lower class index.
pub fn classify(db: &ReferenceDb, query: &BekVector, metric: Metric) -> Result<HijackVerdict> {
    classify_flagged(db, query, metric).map(|(v, _)| v)
}

fn classify_flagged(
    db: &ReferenceDb,
    query: &BekVector,
    metric: Metric,
) -> Result<(HijackVerdict, usize)> {
    if query.source != db.source {
        return Err(Error::Config(format!(
            "query source {} does not match database source {}",
            query.source, db.source
        )));
    }
    if query.values.len() != db.dim() {
        return Err(Error::Config(format!(
            "query length {} does not match database vectors of length {}",
            query.values.len(),
            db.dim()
        )));
    }
    if query.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite query vector".into()));
    }
    let mut best = vec![f64::INFINITY; db.m];
    let mut zero_flags = 0usize;
    for (bek, class) in &db.entries {
        let (d, flagged) = distance_flagged(&bek.values, &query.values, metric)?;
        if flagged {
            zero_flags += 1;
        }
        if d < best[*class] {
            best[*class] = d;
        }
    }
    let mut ranked: Vec<usize> = (0..db.m).collect();
    ranked.sort_by(|&a, &b| {
        best[a]
            .partial_cmp(&best[b])
            .expect("distances are finite")
            .then(a.cmp(&b))
    });
    let distances = ranked.iter().map(|&c| best[c]).collect();
    Ok((
        HijackVerdict {
            ranked_labels: ranked,
            distances,
        },
        zero_flags,
    ))
}

/// Fraction of queries whose true label appears among the first `n` ranked
/// classes.
pub fn top_n_accuracy(
    db: &ReferenceDb,
    queries: &[(BekVector, usize)],
    metric: Metric,
    n: usize,
) -> Result<f64> {
    if n == 0 || n > db.m {
        return Err(Error::Parameter(format!(
            "top-N must satisfy 1 <= N <= {}, got {n}",
            db.m
        )));
    }
    if queries.is_empty() {
        return Err(Error::Parameter("top-N over an empty query set".into()));
    }
    let mut hits = 0;
    for (bek, truth) in queries {
        let verdict = classify(db, bek, metric)?;
        if verdict.ranked_labels[..n].contains(truth) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Random-guess probability for an `m`-class task.
pub fn hijack_lower_bound(m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Parameter("lower bound needs m >= 1".into()));
    }
    Ok(1.0 / m as f64)
}

/// Attack results in the shape the run report serializes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    /// `top_n[i]` is the top-(i+1) accuracy.
    pub top_n: Vec<f64>,
    pub lower_bound: f64,
    pub metric: String,
    pub source: String,
    pub m: usize,
    pub num_queries: usize,
    pub seed: u64,
}

/// Full outcome of [`run_attack`]: the serializable report plus per-query
/// verdicts and diagnostics.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub report: AttackReport,
    pub verdicts: Vec<HijackVerdict>,
    /// Number of distance evaluations that hit the zero-vector cosine rule.
    pub zero_vector_flags: usize,
}

/// Run the whole attack: extract vectors for references and queries, build
/// the database, and score top-1..top-N accuracy.
///
/// The victim network is only read; query samples must carry hijack labels.
#[allow(clippy::too_many_arguments)]
pub fn run_attack(
    net: &Network,
    source: BekSource,
    references: &[(Sample, usize)],
    queries: &[Sample],
    metric: Metric,
    n_max: usize,
    seed: u64,
) -> Result<AttackOutcome> {
    if references.is_empty() {
        return Err(Error::Parameter("attack needs at least one reference".into()));
    }
    if queries.is_empty() {
        return Err(Error::Parameter("attack needs at least one query".into()));
    }
    let mut entries = Vec::with_capacity(references.len());
    for (i, (sample, class)) in references.iter().enumerate() {
        let mut bek = extract_bek(net, &sample.features, source)?;
        bek.sample_id = i as u64;
        entries.push((bek, *class));
    }
    let db = ReferenceDb::new(entries)?;
    if n_max == 0 || n_max > db.m {
        return Err(Error::Parameter(format!(
            "n_max must satisfy 1 <= N <= {}, got {n_max}",
            db.m
        )));
    }

    let mut query_beks = Vec::with_capacity(queries.len());
    for (i, sample) in queries.iter().enumerate() {
        let truth = sample.hijack_label.ok_or_else(|| {
            Error::Config(format!("query sample {i} carries no hijack label"))
        })?;
        let mut bek = extract_bek(net, &sample.features, source)?;
        bek.sample_id = i as u64;
        query_beks.push((bek, truth));
    }

    let mut verdicts = Vec::with_capacity(queries.len());
    let mut zero_vector_flags = 0;
    let mut hits_at = vec![0usize; n_max];
    for (bek, truth) in &query_beks {
        let (verdict, flags) = classify_flagged(&db, bek, metric)?;
        zero_vector_flags += flags;
        if let Some(rank) = verdict.ranked_labels.iter().position(|c| c == truth) {
            for (n, hit) in hits_at.iter_mut().enumerate() {
                if rank <= n {
                    *hit += 1;
                }
            }
        }
        verdicts.push(verdict);
    }
    let top_n: Vec<f64> = hits_at
        .iter()
        .map(|&h| h as f64 / queries.len() as f64)
        .collect();

    Ok(AttackOutcome {
        report: AttackReport {
            top_n,
            lower_bound: hijack_lower_bound(db.m)?,
            metric: metric.to_string(),
            source: source.to_string(),
            m: db.m,
            num_queries: queries.len(),
            seed,
        },
        verdicts,
        zero_vector_flags,
    })
}

/// Keep the `k` largest logit entries in place and mask every other entry
/// with the vector's minimum value.
pub fn truncate_logits(bek: &BekVector, k: usize) -> Result<BekVector> {
    if bek.source != BekSource::Logits {
        return Err(Error::Parameter(
            "logit truncation applies to logits-sourced vectors only".into(),
        ));
    }
    let len = bek.values.len();
    if k == 0 || k > len {
        return Err(Error::Parameter(format!(
            "truncation k must satisfy 1 <= k <= {len}, got {k}"
        )));
    }
    if k == len {
        return Ok(bek.clone());
    }
    let min = bek.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| {
        bek.values[b]
            .partial_cmp(&bek.values[a])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; len];
    for &i in &order[..k] {
        keep[i] = true;
    }
    let values = bek
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| if keep[i] { v } else { min })
        .collect();
    Ok(BekVector {
        values,
        source: bek.source,
        sample_id: bek.sample_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_dual_blobs;
    use crate::network::{build, Activation, InitScheme, NetworkSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn bek(values: Vec<f64>, source: BekSource) -> BekVector {
        BekVector {
            values,
            source,
            sample_id: 0,
        }
    }

    fn logit_bek(values: Vec<f64>) -> BekVector {
        bek(values, BekSource::Logits)
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&[3.0, 4.0], &[0.0, 0.0], Metric::L2).unwrap(), 5.0);
        let v = [0.3, -1.2, 4.0];
        assert!(distance(&v, &v, Metric::Cosine).unwrap().abs() < 1e-15);
        assert!((distance(&[1.0, 0.0], &[0.0, 1.0], Metric::Cosine).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_vector_is_maximal_and_flagged() {
        let (d, flagged) = distance_flagged(&[0.0, 0.0], &[1.0, 2.0], Metric::Cosine).unwrap();
        assert_eq!(d, 2.0);
        assert!(flagged);
        assert!(distance(&[1.0], &[1.0, 2.0], Metric::L2).is_err());
    }

    #[test]
    fn classify_nearest_and_tie_rule() {
        let db = ReferenceDb::new(vec![
            (logit_bek(vec![0.0, 0.0]), 0),
            (logit_bek(vec![10.0, 10.0]), 1),
        ])
        .unwrap();
        let verdict = classify(&db, &logit_bek(vec![1.0, 1.0]), Metric::L2).unwrap();
        assert_eq!(verdict.top1(), 0);

        // equidistant: class indices break the tie upward from the lowest
        let db = ReferenceDb::new(vec![
            (logit_bek(vec![1.0, 0.0]), 0),
            (logit_bek(vec![-1.0, 0.0]), 1),
        ])
        .unwrap();
        let verdict = classify(&db, &logit_bek(vec![0.0, 5.0]), Metric::L2).unwrap();
        assert_eq!(verdict.ranked_labels, vec![0, 1]);
    }

    #[test]
    fn extract_equals_the_forward_trace_tap() {
        let net = build(&NetworkSpec::new(
            vec![4, 6, 3],
            Activation::Tanh,
            1.0,
            InitScheme::Gaussian { sigma: 0.7 },
            12,
        ))
        .unwrap();
        let x = [0.4, -1.0, 2.2, 0.05];
        let trace = net.forward(&x).unwrap();
        let fv = extract_bek(&net, &x, BekSource::Layer(0)).unwrap();
        assert_eq!(fv.values, trace.hidden[0]);
        let lg = extract_bek(&net, &x, BekSource::Logits).unwrap();
        assert_eq!(lg.values, trace.logits);
        assert!(extract_bek(&net, &x, BekSource::Layer(1)).is_err());
    }

    #[test]
    fn classify_rejects_non_finite_queries() {
        let db = ReferenceDb::new(vec![(logit_bek(vec![0.0, 0.0]), 0)]).unwrap();
        let query = logit_bek(vec![f64::NAN, 1.0]);
        assert!(matches!(
            classify(&db, &query, Metric::L2).unwrap_err(),
            Error::Numeric(_)
        ));
    }

    #[test]
    fn classify_rejects_source_mismatch() {
        let db = ReferenceDb::new(vec![(logit_bek(vec![0.0, 0.0]), 0)]).unwrap();
        let query = bek(vec![1.0, 1.0], BekSource::Layer(0));
        assert!(matches!(
            classify(&db, &query, Metric::L2).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn reference_db_requires_full_coverage() {
        let err = ReferenceDb::new(vec![
            (logit_bek(vec![0.0]), 0),
            (logit_bek(vec![1.0]), 2),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("class 1"), "message: {err}");
    }

    /// Brute-force ranking oracle: sort every (distance, class) pair and
    /// keep the first appearance of each class.
    fn oracle_ranking(db: &ReferenceDb, query: &BekVector, metric: Metric) -> Vec<usize> {
        let mut pairs: Vec<(f64, usize)> = db
            .entries
            .iter()
            .map(|(b, c)| (distance(&b.values, &query.values, metric).unwrap(), *c))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut seen = vec![false; db.m];
        let mut ranking = Vec::new();
        for (_, c) in pairs {
            if !seen[c] {
                seen[c] = true;
                ranking.push(c);
            }
        }
        ranking
    }

    #[test]
    fn classify_matches_oracle_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for case in 0..100 {
            let m = rng.random_range(2..=6usize);
            let dim = rng.random_range(2..=8usize);
            let entries_per_class = rng.random_range(1..=4usize);
            let mut entries = Vec::new();
            for class in 0..m {
                for _ in 0..entries_per_class {
                    let values: Vec<f64> =
                        (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
                    entries.push((logit_bek(values), class));
                }
            }
            let db = ReferenceDb::new(entries).unwrap();
            for metric in [Metric::L2, Metric::Cosine] {
                let query = logit_bek((0..dim).map(|_| rng.random_range(-5.0..5.0)).collect());
                let verdict = classify(&db, &query, metric).unwrap();
                assert_eq!(
                    verdict.ranked_labels,
                    oracle_ranking(&db, &query, metric),
                    "case {case} metric {metric}"
                );
            }
        }
    }

    #[test]
    fn top_n_monotone_and_exhaustive() {
        let ds = generate_dual_blobs(2, 4, 6, 4, 3.0, 3.0, 0.5, 3).unwrap();
        let net = build(&NetworkSpec::new(
            vec![6, 8, 2],
            Activation::Relu,
            1.0,
            InitScheme::He,
            5,
        ))
        .unwrap();
        let sel = crate::datasets::build_reference_db_from(&ds, 2, 11).unwrap();
        let entries = sel
            .references
            .iter()
            .enumerate()
            .map(|(i, (s, c))| {
                let mut b = extract_bek(&net, &s.features, BekSource::Logits).unwrap();
                b.sample_id = i as u64;
                (b, *c)
            })
            .collect();
        let db = ReferenceDb::new(entries).unwrap();
        let queries: Vec<(BekVector, usize)> = sel
            .queries
            .samples
            .iter()
            .map(|s| {
                (
                    extract_bek(&net, &s.features, BekSource::Logits).unwrap(),
                    s.hijack_label.unwrap(),
                )
            })
            .collect();
        let mut last = 0.0;
        for n in 1..=db.m {
            let acc = top_n_accuracy(&db, &queries, Metric::L2, n).unwrap();
            assert!(acc >= last);
            last = acc;
        }
        assert_eq!(last, 1.0);
        assert!(top_n_accuracy(&db, &queries, Metric::L2, 0).is_err());
        assert!(top_n_accuracy(&db, &queries, Metric::L2, db.m + 1).is_err());
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let entries: Vec<(BekVector, usize)> = (0..5)
            .map(|c| (logit_bek(vec![c as f64 * 2.0, 1.0]), c))
            .collect();
        let db = ReferenceDb::new(entries.clone()).unwrap();
        assert_eq!(top_n_accuracy(&db, &entries, Metric::L2, 1).unwrap(), 1.0);
    }

    #[test]
    fn lower_bound_values() {
        assert_eq!(hijack_lower_bound(2).unwrap(), 0.5);
        assert_eq!(hijack_lower_bound(6).unwrap(), 1.0 / 6.0);
        assert!((hijack_lower_bound(85).unwrap() - 0.011764705882352941).abs() < 1e-15);
        assert!(hijack_lower_bound(0).is_err());
    }

    #[test]
    fn run_attack_never_mutates_the_network() {
        let ds = generate_dual_blobs(2, 3, 5, 4, 3.0, 3.0, 0.4, 9).unwrap();
        let net = build(&NetworkSpec::new(
            vec![5, 6, 2],
            Activation::Relu,
            1.0,
            InitScheme::He,
            3,
        ))
        .unwrap();
        let sel = crate::datasets::build_reference_db_from(&ds, 1, 4).unwrap();
        let before = crate::network::serialize(&net).unwrap();
        let outcome = run_attack(
            &net,
            BekSource::Logits,
            &sel.references,
            &sel.queries.samples,
            Metric::L2,
            3,
            0,
        )
        .unwrap();
        let after = crate::network::serialize(&net).unwrap();
        assert_eq!(before, after);
        assert_eq!(outcome.report.m, 3);
        assert_eq!(outcome.report.top_n.len(), 3);
        assert_eq!(outcome.verdicts.len(), sel.queries.len());
        assert_eq!(outcome.report.num_queries, sel.queries.len());
        // full coverage at N = m
        assert_eq!(outcome.report.top_n[2], 1.0);
    }

    #[test]
    fn truncate_logits_rule() {
        let v = logit_bek(vec![3.0, 9.0, 5.0]);
        let t1 = truncate_logits(&v, 1).unwrap();
        assert_eq!(t1.values, vec![3.0, 9.0, 3.0]);
        let t_all = truncate_logits(&v, 3).unwrap();
        assert_eq!(t_all.values, v.values);
        assert!(truncate_logits(&v, 0).is_err());
        assert!(truncate_logits(&v, 4).is_err());
        let fv = bek(vec![1.0, 2.0], BekSource::Layer(0));
        assert!(truncate_logits(&fv, 1).is_err());
    }

    proptest! {
        /// Rankings are invariant under a shared positive scale for l2 and
        /// a per-vector positive scale for cosine.
        #[test]
        fn ranking_scale_invariances(
            seed in 0u64..1000,
            shared_scale in 0.01f64..100.0,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = rng.random_range(2..=5usize);
            let dim = rng.random_range(2..=6usize);
            let mut entries = Vec::new();
            for class in 0..m {
                for _ in 0..rng.random_range(1..=3usize) {
                    let values: Vec<f64> = (0..dim)
                        .map(|_| rng.random_range(-4.0..4.0) + 0.1)
                        .collect();
                    entries.push((logit_bek(values), class));
                }
            }
            let query = logit_bek((0..dim).map(|_| rng.random_range(-4.0..4.0) + 0.1).collect());
            let db = ReferenceDb::new(entries.clone()).unwrap();
            let base_l2 = classify(&db, &query, Metric::L2).unwrap().ranked_labels;
            let base_cos = classify(&db, &query, Metric::Cosine).unwrap().ranked_labels;

            // l2: scale everything by one shared factor
            let scaled_entries: Vec<(BekVector, usize)> = entries
                .iter()
                .map(|(b, c)| {
                    (logit_bek(b.values.iter().map(|v| v * shared_scale).collect()), *c)
                })
                .collect();
            let scaled_query = logit_bek(query.values.iter().map(|v| v * shared_scale).collect());
            let db_l2 = ReferenceDb::new(scaled_entries).unwrap();
            prop_assert_eq!(
                classify(&db_l2, &scaled_query, Metric::L2).unwrap().ranked_labels,
                base_l2
            );

            // cosine: scale each vector by its own positive factor
            let per_vec: Vec<(BekVector, usize)> = entries
                .iter()
                .enumerate()
                .map(|(i, (b, c))| {
                    let s = 0.5 + (i as f64) * 0.37;
                    (logit_bek(b.values.iter().map(|v| v * s).collect()), *c)
                })
                .collect();
            let db_cos = ReferenceDb::new(per_vec).unwrap();
            let q_scaled = logit_bek(query.values.iter().map(|v| v * 3.25).collect());
            prop_assert_eq!(
                classify(&db_cos, &q_scaled, Metric::Cosine).unwrap().ranked_labels,
                base_cos
            );
        }
    }
}
