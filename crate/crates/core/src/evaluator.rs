//! Gallery scoring, Recall@K, and per-dataset retrieval reports.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchgen::{Benchmark, Dataset, Sample, Split};
use crate::numerics::{NumericsError, ParamStore, UnitVector};
use crate::trainer::model::Model;

pub const METRICS_SCHEMA: &str = "metrics/v1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty gallery ({context})")]
    EmptyGallery { context: String },
    #[error("no queries in {split:?} of dataset {dataset_id}")]
    EmptySplit { dataset_id: usize, split: Split },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Ranks gallery ids by descending dot product with the query.
/// Equal scores fall back to ascending target id so rankings are total
/// orders regardless of float coincidences.
pub fn score_gallery(
    q: &UnitVector,
    gallery: &[(usize, UnitVector)],
) -> Result<Vec<usize>, EvalError> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery {
            context: "score_gallery".into(),
        });
    }
    let mut scored: Vec<(f64, usize)> = gallery
        .iter()
        .map(|(id, t)| (q.as_array().dot(t.as_array()), *id))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// Percentage of queries whose top-k ranking hits at least one of their
/// positive ids.
pub fn recall_at_k(rankings: &[Vec<usize>], positives: &[Vec<usize>], k: usize) -> f64 {
    assert_eq!(rankings.len(), positives.len(), "one positive set per query");
    assert!(!rankings.is_empty(), "recall over zero queries is undefined");
    let hits = rankings
        .iter()
        .zip(positives.iter())
        .filter(|(ranking, pos)| ranking.iter().take(k).any(|id| pos.contains(id)))
        .count();
    100.0 * hits as f64 / rankings.len() as f64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset_id: usize,
    pub queries: usize,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean_recall: f64,
    /// Batch-free mean of the calibrator's interpolation weight over the
    /// split's queries; absent when the model runs uncalibrated.
    pub mean_lambda: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub seed: u64,
    pub config_hash: String,
    pub step: u64,
    pub split: Split,
    pub per_dataset: Vec<DatasetMetrics>,
    pub macro_r_at_1: f64,
    pub macro_r_at_5: f64,
    pub macro_r_at_10: f64,
    pub macro_mean_recall: f64,
}

/// Run metadata stamped into every report.
#[derive(Clone, Debug, Default)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
    pub step: u64,
}

fn eval_dataset(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
    split: Split,
) -> Result<DatasetMetrics, EvalError> {
    let queries: &[Sample] = match split {
        Split::Train => &dataset.train,
        Split::Val => &dataset.val,
        Split::Test => &dataset.test,
        Split::Gallery => &dataset.gallery,
    };
    if queries.is_empty() {
        return Err(EvalError::EmptySplit {
            dataset_id: dataset.id,
            split,
        });
    }
    if dataset.gallery.is_empty() {
        return Err(EvalError::EmptyGallery {
            context: format!("dataset {}", dataset.id),
        });
    }
    let gallery: Vec<(usize, UnitVector)> = dataset
        .gallery
        .iter()
        .map(|s| {
            Ok((
                s.target_id,
                model.encoder.encode_target(store, &s.target_features)?,
            ))
        })
        .collect::<Result<_, NumericsError>>()?;

    let mut rankings = Vec::with_capacity(queries.len());
    let mut positives = Vec::with_capacity(queries.len());
    let mut lambda_sum = 0.0;
    let mut lambda_count = 0usize;
    for sample in queries {
        let enc = model.encode_query(store, sample)?;
        if let Some(cal) = &enc.calibration {
            lambda_sum += cal.lambda;
            lambda_count += 1;
        }
        rankings.push(score_gallery(&enc.q, &gallery)?);
        positives.push(vec![sample.target_id]);
    }
    let r1 = recall_at_k(&rankings, &positives, 1);
    let r5 = recall_at_k(&rankings, &positives, 5);
    let r10 = recall_at_k(&rankings, &positives, 10);
    Ok(DatasetMetrics {
        dataset_id: dataset.id,
        queries: queries.len(),
        r_at_1: r1,
        r_at_5: r5,
        r_at_10: r10,
        mean_recall: (r1 + r5 + r10) / 3.0,
        mean_lambda: (lambda_count > 0).then(|| lambda_sum / lambda_count as f64),
    })
}

/// Evaluates every dataset's `split` queries against that dataset's own
/// gallery. Read-only on the model and parameters.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    benchmark: &Benchmark,
    split: Split,
    meta: &RunMeta,
) -> Result<MetricsReport, EvalError> {
    let per_dataset: Vec<DatasetMetrics> = benchmark
        .datasets
        .iter()
        .map(|d| eval_dataset(model, store, d, split))
        .collect::<Result<_, _>>()?;
    let n = per_dataset.len() as f64;
    let macro_of = |f: fn(&DatasetMetrics) -> f64| per_dataset.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        schema: METRICS_SCHEMA.into(),
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
        step: meta.step,
        split,
        macro_r_at_1: macro_of(|d| d.r_at_1),
        macro_r_at_5: macro_of(|d| d.r_at_5),
        macro_r_at_10: macro_of(|d| d.r_at_10),
        macro_mean_recall: macro_of(|d| d.mean_recall),
        per_dataset,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

impl fmt::Display for MetricsReport {
    /// Aligned table for terminal reading; the JSON form is the machine one.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "split={:?} seed={} step={} config={}",
            self.split,
            self.seed,
            self.step,
            if self.config_hash.is_empty() {
                "-"
            } else {
                &self.config_hash
            }
        )?;
        writeln!(
            f,
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>12}",
            "dataset", "queries", "R@1", "R@5", "R@10", "mR", "mean_lambda"
        )?;
        for d in &self.per_dataset {
            let lam = match d.mean_lambda {
                Some(l) => format!("{l:.4}"),
                None => "-".to_string(),
            };
            writeln!(
                f,
                "{:>8} {:>8} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>12}",
                d.dataset_id, d.queries, d.r_at_1, d.r_at_5, d.r_at_10, d.mean_recall, lam
            )?;
        }
        writeln!(
            f,
            "{:>8} {:>8} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>12}",
            "macro",
            "-",
            self.macro_r_at_1,
            self.macro_r_at_5,
            self.macro_r_at_10,
            self.macro_mean_recall,
            "-"
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DenseArray;
    use crate::seeds;
    use rand::prelude::*;

    fn unit(rng: &mut impl Rng, dim: usize) -> UnitVector {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        UnitVector::normalize(&DenseArray::vector(v)).unwrap()
    }

    #[test]
    fn self_similarity_ranks_first() {
        let mut rng = seeds::stream(40, "test");
        let q = unit(&mut rng, 8);
        let gallery: Vec<(usize, UnitVector)> = (0..20)
            .map(|i| (i, if i == 13 { q.clone() } else { unit(&mut rng, 8) }))
            .collect();
        let ranked = score_gallery(&q, &gallery).unwrap();
        assert_eq!(ranked[0], 13);
    }

    #[test]
    fn ties_break_toward_lower_target_id() {
        let e1 = UnitVector::normalize(&DenseArray::vector(vec![1.0, 0.0])).unwrap();
        let e2 = UnitVector::normalize(&DenseArray::vector(vec![0.0, 1.0])).unwrap();
        // Both gallery items orthogonal to the query: identical score 0.
        let gallery = vec![(7, e2.clone()), (3, e2.clone()), (5, e2)];
        let ranked = score_gallery(&e1, &gallery).unwrap();
        assert_eq!(ranked, vec![3, 5, 7]);
    }

    #[test]
    fn ranking_matches_brute_force_sort() {
        let mut rng = seeds::stream(41, "test");
        let q = unit(&mut rng, 12);
        let gallery: Vec<(usize, UnitVector)> =
            (0..50).map(|i| (i, unit(&mut rng, 12))).collect();
        let ranked = score_gallery(&q, &gallery).unwrap();

        let mut brute: Vec<(f64, usize)> = gallery
            .iter()
            .map(|(id, t)| (q.as_array().dot(t.as_array()), *id))
            .collect();
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expect: Vec<usize> = brute.into_iter().map(|(_, id)| id).collect();
        assert_eq!(ranked, expect);
    }

    #[test]
    fn empty_gallery_is_an_error() {
        let mut rng = seeds::stream(42, "test");
        let q = unit(&mut rng, 4);
        assert!(matches!(
            score_gallery(&q, &[]),
            Err(EvalError::EmptyGallery { .. })
        ));
    }

    #[test]
    fn recall_counts_rank_positions() {
        // Positive ranks 1, 4, 11 across three queries.
        let mk = |pos_rank: usize| -> Vec<usize> {
            // Ranking of 15 ids where the positive (id 99) sits at pos_rank.
            let mut r: Vec<usize> = (0..15).collect();
            r.insert(pos_rank - 1, 99);
            r.truncate(15);
            r
        };
        let rankings = vec![mk(1), mk(4), mk(11)];
        let positives = vec![vec![99], vec![99], vec![99]];
        let r1 = recall_at_k(&rankings, &positives, 1);
        let r5 = recall_at_k(&rankings, &positives, 5);
        let r10 = recall_at_k(&rankings, &positives, 10);
        assert!((r1 - 100.0 / 3.0).abs() < 1e-9);
        assert!((r5 - 200.0 / 3.0).abs() < 1e-9);
        assert!((r10 - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn recall_is_total_when_k_covers_the_gallery() {
        let rankings = vec![vec![2, 1, 0], vec![0, 2, 1]];
        let positives = vec![vec![0], vec![1]];
        assert_eq!(recall_at_k(&rankings, &positives, 3), 100.0);
    }

    #[test]
    fn recall_monotone_in_k() {
        let mut rng = seeds::stream(43, "test");
        for _ in 0..20 {
            let n = 10;
            let rankings: Vec<Vec<usize>> = (0..n)
                .map(|_| {
                    let mut ids: Vec<usize> = (0..30).collect();
                    for i in (1..ids.len()).rev() {
                        let j = rng.random_range(0..=i);
                        ids.swap(i, j);
                    }
                    ids
                })
                .collect();
            let positives: Vec<Vec<usize>> =
                (0..n).map(|_| vec![rng.random_range(0..30)]).collect();
            let mut prev = 0.0;
            for k in 1..=30 {
                let r = recall_at_k(&rankings, &positives, k);
                assert!(r >= prev - 1e-12);
                prev = r;
            }
            assert_eq!(prev, 100.0);
        }
    }
}
