//! Width-compression defense: exhaustively train candidate widths, score
//! them on validation loss and parameter count, and pick the compressed
//! model by TOPSIS closeness to the ideal point.

use crate::datasets::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::hijack::{self, BekSource, Metric};
use crate::network::{self, Network, NetworkSpec, TapPoint};
use crate::training::{self, TrainConfig};
use serde::{Deserialize, Serialize};

/// One trained compression candidate.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub expansion: f64,
    pub net: Network,
    /// Original-task validation cross-entropy.
    pub loss: f64,
    pub params: usize,
}

/// TOPSIS weights over the two cost criteria (validation loss, parameter
/// count). Must be positive and sum to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TopsisConfig {
    pub w_loss: f64,
    pub w_params: f64,
}

impl Default for TopsisConfig {
    fn default() -> Self {
        TopsisConfig {
            w_loss: 0.5,
            w_params: 0.5,
        }
    }
}

impl TopsisConfig {
    fn validate(&self) -> Result<()> {
        if !(self.w_loss > 0.0 && self.w_params > 0.0) {
            return Err(Error::Parameter("TOPSIS weights must be positive".into()));
        }
        if ((self.w_loss + self.w_params) - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "TOPSIS weights must sum to 1, got {}",
                self.w_loss + self.w_params
            )));
        }
        Ok(())
    }
}

/// The default search grid: 14 expansion ratios linearly spanning
/// [0.10, 0.75].
pub fn default_expansion_grid() -> Vec<f64> {
    (0..14).map(|i| 0.10 + i as f64 * 0.05).collect()
}

/// Train one candidate per expansion ratio and score it.
///
/// A candidate whose training diverges is dropped (the search continues);
/// any other error aborts.
pub fn enumerate_candidates(
    base_spec: &NetworkSpec,
    expansions: &[f64],
    train_ds: &LabeledDataset,
    val_ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Vec<Candidate>> {
    if expansions.is_empty() {
        return Err(Error::Parameter("empty expansion grid".into()));
    }
    if expansions.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
        return Err(Error::Parameter("expansions must be positive and finite".into()));
    }
    let mut candidates = Vec::with_capacity(expansions.len());
    for &expansion in expansions {
        let mut spec = base_spec.clone();
        spec.width_expansion = expansion;
        let net = network::build(&spec)?;
        match training::train(&net, train_ds, cfg) {
            Ok((trained, _)) => {
                let loss = training::dataset_loss(&trained, val_ds)?;
                candidates.push(Candidate {
                    expansion,
                    params: trained.param_count(),
                    net: trained,
                    loss,
                });
            }
            Err(Error::Numeric(_)) => continue, // divergent candidate: excluded
            Err(e) => return Err(e),
        }
    }
    if candidates.is_empty() {
        return Err(Error::Numeric("every compression candidate diverged".into()));
    }
    Ok(candidates)
}

/// Closeness scores and the selected row of one TOPSIS ranking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopsisOutcome {
    pub closeness: Vec<f64>,
    pub selected: usize,
}

/// Rank rows of `(loss, params)` cost pairs by TOPSIS.
///
/// Procedure: vector-normalize each column (divide by its Euclidean norm),
/// apply the weights, take column minima as the ideal point and maxima as
/// the anti-ideal, and score each row `C = d_anti / (d_ideal + d_anti)`.
/// The highest closeness wins; ties prefer fewer parameters, then the
/// earlier row.
pub fn topsis_rank(rows: &[(f64, f64)], cfg: &TopsisConfig) -> Result<TopsisOutcome> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(Error::Parameter("TOPSIS over an empty candidate table".into()));
    }
    if rows.iter().any(|(l, p)| !l.is_finite() || !p.is_finite()) {
        return Err(Error::Numeric("non-finite TOPSIS criteria".into()));
    }
    let norm_loss = rows.iter().map(|(l, _)| l * l).sum::<f64>().sqrt();
    let norm_params = rows.iter().map(|(_, p)| p * p).sum::<f64>().sqrt();
    let scaled: Vec<(f64, f64)> = rows
        .iter()
        .map(|(l, p)| {
            (
                if norm_loss > 0.0 { cfg.w_loss * l / norm_loss } else { 0.0 },
                if norm_params > 0.0 { cfg.w_params * p / norm_params } else { 0.0 },
            )
        })
        .collect();
    // both criteria are costs: the ideal point is the column minimum
    let ideal = (
        scaled.iter().map(|v| v.0).fold(f64::INFINITY, f64::min),
        scaled.iter().map(|v| v.1).fold(f64::INFINITY, f64::min),
    );
    let anti = (
        scaled.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max),
        scaled.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let closeness: Vec<f64> = scaled
        .iter()
        .map(|&(l, p)| {
            let d_ideal = ((l - ideal.0).powi(2) + (p - ideal.1).powi(2)).sqrt();
            let d_anti = ((l - anti.0).powi(2) + (p - anti.1).powi(2)).sqrt();
            if d_ideal + d_anti == 0.0 {
                1.0
            } else {
                d_anti / (d_ideal + d_anti)
            }
        })
        .collect();

    let mut selected = 0;
    for i in 1..rows.len() {
        let better = closeness[i] > closeness[selected]
            || (closeness[i] == closeness[selected] && rows[i].1 < rows[selected].1);
        if better {
            selected = i;
        }
    }
    Ok(TopsisOutcome { closeness, selected })
}

/// Select the compressed model from a candidate table.
pub fn topsis_select<'a>(
    candidates: &'a [Candidate],
    cfg: &TopsisConfig,
) -> Result<(&'a Candidate, TopsisOutcome)> {
    let rows: Vec<(f64, f64)> = candidates
        .iter()
        .map(|c| (c.loss, c.params as f64))
        .collect();
    let outcome = topsis_rank(&rows, cfg)?;
    Ok((&candidates[outcome.selected], outcome))
}

/// Alternative selector: minimize `alpha * loss + beta * params`.
///
/// Both coefficients must be supplied explicitly; there are no defaults.
pub fn scalarized_select(rows: &[(f64, f64)], alpha: f64, beta: f64) -> Result<usize> {
    if rows.is_empty() {
        return Err(Error::Parameter("scalarized selection over an empty table".into()));
    }
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::Parameter("scalarized selector needs finite alpha and beta".into()));
    }
    let mut best = 0;
    let score = |r: &(f64, f64)| alpha * r.0 + beta * r.1;
    for i in 1..rows.len() {
        if score(&rows[i]) < score(&rows[best]) {
            best = i;
        }
    }
    Ok(best)
}

/// Side-by-side accuracy of the baseline and the compressed model, on the
/// original task and under both attack sources.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionComparison {
    pub expansion: f64,
    pub original_acc_base: f64,
    pub original_acc_compressed: f64,
    pub hijack_logits_base: f64,
    pub hijack_logits_compressed: f64,
    pub hijack_fv_base: f64,
    pub hijack_fv_compressed: f64,
}

/// Evaluate a compressed model against its baseline.
///
/// Both networks are scored on original-task test accuracy and on hijack
/// top-1 under the logits source and the last-hidden feature source, using
/// the same reference/query split.
pub fn compression_report(
    base: &Network,
    compressed: &Network,
    expansion: f64,
    test_ds: &LabeledDataset,
    references: &[(Sample, usize)],
    queries: &[Sample],
    metric: Metric,
) -> Result<CompressionComparison> {
    let top1 = |net: &Network, source: BekSource| -> Result<f64> {
        let outcome = hijack::run_attack(net, source, references, queries, metric, 1, 0)?;
        Ok(outcome.report.top_n[0])
    };
    let fv_of = |net: &Network| TapPoint::Layer(net.hidden_count().saturating_sub(1));
    Ok(CompressionComparison {
        expansion,
        original_acc_base: training::dataset_accuracy(base, test_ds)?,
        original_acc_compressed: training::dataset_accuracy(compressed, test_ds)?,
        hijack_logits_base: top1(base, BekSource::Logits)?,
        hijack_logits_compressed: top1(compressed, BekSource::Logits)?,
        hijack_fv_base: top1(base, fv_of(base))?,
        hijack_fv_compressed: top1(compressed, fv_of(compressed))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build_reference_db_from, generate_dual_blobs, split, SplitSpec, Stratify};
    use crate::network::{Activation, InitScheme};
    use proptest::prelude::*;

    #[test]
    fn default_grid_has_14_points_in_range() {
        let grid = default_expansion_grid();
        assert_eq!(grid.len(), 14);
        assert!((grid[0] - 0.10).abs() < 1e-12);
        assert!((grid[13] - 0.75).abs() < 1e-12);
        for w in grid.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn topsis_two_candidate_hand_values() {
        // losses {0.6, 0.8}, params {100, 50}, equal weights.
        // loss column norm = 1.0 -> weighted 0.3, 0.4
        // params norm = sqrt(12500) -> weighted 0.4472135954999579, 0.2236067977499790
        // C0 = 0.1 / (0.1 + 0.22360679774997896) = 0.30901699437494745
        // C1 = 0.22360679774997896 / 0.32360679774997896 = 0.6909830056250526
        let rows = [(0.6, 100.0), (0.8, 50.0)];
        let outcome = topsis_rank(&rows, &TopsisConfig::default()).unwrap();
        assert!((outcome.closeness[0] - 0.30901699437494745).abs() < 1e-12);
        assert!((outcome.closeness[1] - 0.6909830056250526).abs() < 1e-12);
        assert_eq!(outcome.selected, 1);
    }

    #[test]
    fn topsis_single_candidate_closeness_one() {
        let outcome = topsis_rank(&[(0.4, 120.0)], &TopsisConfig::default()).unwrap();
        assert_eq!(outcome.closeness, vec![1.0]);
        assert_eq!(outcome.selected, 0);
    }

    #[test]
    fn topsis_identical_candidates_select_first() {
        let rows = [(0.5, 80.0), (0.5, 80.0), (0.5, 80.0)];
        let outcome = topsis_rank(&rows, &TopsisConfig::default()).unwrap();
        assert_eq!(outcome.selected, 0);
        assert!(outcome.closeness.iter().all(|&c| c == 1.0));
    }

    #[test]
    fn topsis_rejects_bad_weights() {
        let rows = [(0.5, 80.0)];
        assert!(topsis_rank(&rows, &TopsisConfig { w_loss: 0.9, w_params: 0.2 }).is_err());
        assert!(topsis_rank(&rows, &TopsisConfig { w_loss: 1.0, w_params: 0.0 }).is_err());
        assert!(topsis_rank(&[], &TopsisConfig::default()).is_err());
    }

    fn is_dominated(rows: &[(f64, f64)], i: usize) -> bool {
        rows.iter().enumerate().any(|(j, r)| {
            j != i
                && r.0 <= rows[i].0
                && r.1 <= rows[i].1
                && (r.0 < rows[i].0 || r.1 < rows[i].1)
        })
    }

    #[test]
    fn dominated_candidate_never_selected_three_way() {
        // enumerate 3-candidate tables over a small value grid
        let losses = [0.2, 0.5, 0.8];
        let params = [10.0, 50.0, 90.0];
        let cfg = TopsisConfig::default();
        for &l0 in &losses {
            for &p0 in &params {
                for &l1 in &losses {
                    for &p1 in &params {
                        for &l2 in &losses {
                            for &p2 in &params {
                                let rows = [(l0, p0), (l1, p1), (l2, p2)];
                                let outcome = topsis_rank(&rows, &cfg).unwrap();
                                assert!(
                                    !is_dominated(&rows, outcome.selected),
                                    "selected dominated row in {rows:?}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn scale_invariance_of_selection() {
        let rows = [(0.3, 200.0), (0.5, 120.0), (0.9, 40.0)];
        let cfg = TopsisConfig::default();
        let base = topsis_rank(&rows, &cfg).unwrap().selected;
        let scaled: Vec<(f64, f64)> = rows.iter().map(|(l, p)| (l * 37.0, p * 0.01)).collect();
        assert_eq!(topsis_rank(&scaled, &cfg).unwrap().selected, base);
    }

    #[test]
    fn removing_a_non_selected_candidate_keeps_a_dominant_winner() {
        let rows = vec![(0.2, 30.0), (0.8, 200.0), (0.5, 100.0)];
        let cfg = TopsisConfig::default();
        let outcome = topsis_rank(&rows, &cfg).unwrap();
        assert_eq!(outcome.selected, 0);
        let reduced = vec![rows[0], rows[2]];
        assert_eq!(topsis_rank(&reduced, &cfg).unwrap().selected, 0);
    }

    #[test]
    fn scalarized_selector_minimizes_explicitly() {
        let rows = [(0.2, 100.0), (0.9, 10.0)];
        assert_eq!(scalarized_select(&rows, 1.0, 0.0).unwrap(), 0);
        assert_eq!(scalarized_select(&rows, 0.0, 1.0).unwrap(), 1);
        assert!(scalarized_select(&rows, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn enumerate_candidates_trains_the_whole_grid() {
        let ds = generate_dual_blobs(2, 2, 5, 8, 4.0, 1.5, 0.4, 3).unwrap();
        let (train_ds, val_ds) = split(
            &ds,
            &SplitSpec {
                train_fraction: 0.7,
                seed: 1,
                stratify_by: Stratify::Original,
            },
        )
        .unwrap();
        let spec = NetworkSpec::new(vec![5, 8, 2], Activation::Relu, 1.0, InitScheme::He, 2);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.1,
            seed: 4,
            shuffle: true,
        };
        let grid = [0.25, 0.5, 1.0];
        let cands = enumerate_candidates(&spec, &grid, &train_ds, &val_ds, &cfg).unwrap();
        assert_eq!(cands.len(), 3);
        assert!(cands.windows(2).all(|w| w[0].params < w[1].params));
        let again = enumerate_candidates(&spec, &grid, &train_ds, &val_ds, &cfg).unwrap();
        for (a, b) in cands.iter().zip(&again) {
            assert_eq!(a.net, b.net);
            assert_eq!(a.loss, b.loss);
        }
    }

    #[test]
    fn comparison_of_a_model_with_itself_is_symmetric() {
        let ds = generate_dual_blobs(2, 3, 5, 6, 4.0, 2.0, 0.4, 5).unwrap();
        let (train_ds, test_ds) = split(
            &ds,
            &SplitSpec {
                train_fraction: 0.7,
                seed: 2,
                stratify_by: Stratify::Original,
            },
        )
        .unwrap();
        let spec = NetworkSpec::new(vec![5, 8, 2], Activation::Relu, 1.0, InitScheme::He, 6);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 8,
            learning_rate: 0.1,
            seed: 7,
            shuffle: true,
        };
        let (net, _) = training::train(&network::build(&spec).unwrap(), &train_ds, &cfg).unwrap();
        let sel = build_reference_db_from(&test_ds, 1, 8).unwrap();
        let row = compression_report(
            &net,
            &net,
            1.0,
            &test_ds,
            &sel.references,
            &sel.queries.samples,
            Metric::L2,
        )
        .unwrap();
        assert_eq!(row.original_acc_base, row.original_acc_compressed);
        assert_eq!(row.hijack_logits_base, row.hijack_logits_compressed);
        assert_eq!(row.hijack_fv_base, row.hijack_fv_compressed);
    }

    proptest! {
        /// The TOPSIS winner is always Pareto-optimal in (loss, params).
        #[test]
        fn selected_candidate_is_pareto_optimal(
            table in proptest::collection::vec((0.01f64..10.0, 1.0f64..1000.0), 1..20)
        ) {
            let outcome = topsis_rank(&table, &TopsisConfig::default()).unwrap();
            prop_assert!(!is_dominated(&table, outcome.selected));
        }
    }
}
