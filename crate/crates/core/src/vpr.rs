//! Place-recognition task loss and retrieval evaluation.

use crate::error::{Error, Result};
use crate::manifold::{euclidean_distance_grad, euclidean_unchecked};
use crate::numeric::Matrix;
use crate::relational::{EmbeddingBatch, LossValue};

/// Largest K reported in a [`RecallReport`] curve by default.
pub const DEFAULT_K_MAX: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mining {
    /// Hardest positive and hardest negative per anchor.
    #[default]
    BatchHard,
    /// Every (anchor, positive, negative) triplet in the batch.
    AllPairs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    pub mining: Mining,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            mining: Mining::BatchHard,
        }
    }
}

/// Euclidean triplet loss on the rows of `s` with exact gradient.
///
/// Anchors without a positive or without a negative are skipped; the loss is
/// the mean over the remaining anchors (or triplets, for `AllPairs`).
pub fn triplet_loss(s: &EmbeddingBatch, labels: &[usize], cfg: &TripletConfig) -> Result<LossValue> {
    if labels.len() != s.rows() {
        return Err(Error::DimensionMismatch {
            expected: s.rows(),
            actual: labels.len(),
        });
    }
    if !(cfg.margin.is_finite() && cfg.margin >= 0.0) {
        return Err(Error::InvalidConfig(format!("margin {} must be >= 0", cfg.margin)));
    }
    let n = s.rows();
    let mut dist = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean_unchecked(s.row(i), s.row(j));
            dist.set(i, j, d);
            dist.set(j, i, d);
        }
    }

    // (anchor, positive, negative) with hinge active, and the term count.
    let mut active = Vec::new();
    let mut count = 0usize;
    let mut value = 0.0;
    for a in 0..n {
        let positives = (0..n).filter(|&j| j != a && labels[j] == labels[a]);
        let negatives = (0..n).filter(|&j| labels[j] != labels[a]);
        match cfg.mining {
            Mining::BatchHard => {
                let hp = positives.fold(None, |best: Option<usize>, j| match best {
                    Some(b) if dist.get(a, b) >= dist.get(a, j) => Some(b),
                    _ => Some(j),
                });
                let hn = negatives.fold(None, |best: Option<usize>, j| match best {
                    Some(b) if dist.get(a, b) <= dist.get(a, j) => Some(b),
                    _ => Some(j),
                });
                if let (Some(p), Some(ng)) = (hp, hn) {
                    count += 1;
                    let inner = dist.get(a, p) - dist.get(a, ng) + cfg.margin;
                    if inner > 0.0 {
                        value += inner;
                        active.push((a, p, ng));
                    }
                }
            }
            Mining::AllPairs => {
                let negatives: Vec<usize> = negatives.collect();
                for p in positives {
                    for &ng in &negatives {
                        count += 1;
                        let inner = dist.get(a, p) - dist.get(a, ng) + cfg.margin;
                        if inner > 0.0 {
                            value += inner;
                            active.push((a, p, ng));
                        }
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::NoValidTriplet);
    }

    let w = 1.0 / count as f64;
    let mut grad = Matrix::zeros(n, s.cols());
    for (a, p, ng) in active {
        let (_, gap) = euclidean_distance_grad(s.row(a), s.row(p));
        let (_, gan) = euclidean_distance_grad(s.row(a), s.row(ng));
        for k in 0..s.cols() {
            grad.add_at(a, k, w * (gap[k] - gan[k]));
            grad.add_at(p, k, -w * gap[k]);
            grad.add_at(ng, k, w * gan[k]);
        }
    }
    Ok(LossValue {
        value: value * w,
        grad,
    })
}

/// True-positive database indices for each query.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    positives: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn new(positives: Vec<Vec<usize>>) -> Self {
        Self { positives }
    }

    pub fn positives(&self, query: usize) -> &[usize] {
        self.positives.get(query).map_or(&[], |v| v.as_slice())
    }

    pub fn num_queries(&self) -> usize {
        self.positives.len()
    }

    fn validate(&self, num_queries: usize, db_size: usize) -> Result<()> {
        if self.positives.len() > num_queries {
            return Err(Error::InvalidConfig(format!(
                "ground truth lists {} queries but only {num_queries} were given",
                self.positives.len()
            )));
        }
        for (q, pos) in self.positives.iter().enumerate() {
            if let Some(&bad) = pos.iter().find(|&&i| i >= db_size) {
                return Err(Error::InvalidConfig(format!(
                    "query {q}: database index {bad} out of range (size {db_size})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub ar_at_1: f64,
    pub ar_at_1pct: f64,
    /// `curve[k - 1]` is Recall@k in percent.
    pub curve: Vec<f64>,
    pub num_queries_evaluated: usize,
    pub num_queries_skipped: usize,
}

/// `max(1, round(0.01 * db_size))`, rounding half away from zero.
pub fn one_percent_k(db_size: usize) -> usize {
    ((db_size as f64 * 0.01).round() as usize).max(1)
}

/// 0-based rank of the best-ranked positive for each query that has one.
/// Ranking is by Euclidean distance with ties going to the lower index.
fn first_positive_ranks(
    queries: &EmbeddingBatch,
    database: &EmbeddingBatch,
    truth: &GroundTruth,
) -> Result<(Vec<usize>, usize)> {
    if database.rows() == 0 {
        return Err(Error::Empty("database is empty"));
    }
    if queries.cols() != database.cols() {
        return Err(Error::DimensionMismatch {
            expected: database.cols(),
            actual: queries.cols(),
        });
    }
    truth.validate(queries.rows(), database.rows())?;

    let mut ranks = Vec::new();
    let mut skipped = 0;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(database.rows());
    for q in 0..queries.rows() {
        let pos = truth.positives(q);
        if pos.is_empty() {
            skipped += 1;
            continue;
        }
        order.clear();
        order.extend(
            database
                .iter_rows()
                .enumerate()
                .map(|(i, row)| (euclidean_unchecked(queries.row(q), row), i)),
        );
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let rank = order
            .iter()
            .position(|(_, i)| pos.contains(i))
            .expect("positive indices validated against database size");
        ranks.push(rank);
    }
    if ranks.is_empty() {
        return Err(Error::Empty("no query has a true positive"));
    }
    Ok((ranks, skipped))
}

fn percent_within(ranks: &[usize], k: usize) -> f64 {
    let hits = ranks.iter().filter(|&&r| r < k).count();
    100.0 * hits as f64 / ranks.len() as f64
}

/// Percentage of evaluated queries with a true positive among their `k`
/// nearest database rows.
pub fn recall_at_k(
    queries: &EmbeddingBatch,
    database: &EmbeddingBatch,
    truth: &GroundTruth,
    k: usize,
) -> Result<f64> {
    if k == 0 || k > database.rows() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must lie in 1..={}",
            database.rows()
        )));
    }
    let (ranks, _) = first_positive_ranks(queries, database, truth)?;
    Ok(percent_within(&ranks, k))
}

pub fn ar_at_one_percent(
    queries: &EmbeddingBatch,
    database: &EmbeddingBatch,
    truth: &GroundTruth,
) -> Result<f64> {
    recall_at_k(queries, database, truth, one_percent_k(database.rows()))
}

/// Full report with the Recall@K curve for `K = 1..=min(k_max, db_size)`.
pub fn evaluate(
    queries: &EmbeddingBatch,
    database: &EmbeddingBatch,
    truth: &GroundTruth,
    k_max: usize,
) -> Result<RecallReport> {
    let (ranks, skipped) = first_positive_ranks(queries, database, truth)?;
    let k_max = k_max.clamp(1, database.rows());
    let curve = (1..=k_max).map(|k| percent_within(&ranks, k)).collect();
    Ok(RecallReport {
        ar_at_1: percent_within(&ranks, 1),
        ar_at_1pct: percent_within(&ranks, one_percent_k(database.rows())),
        curve,
        num_queries_evaluated: ranks.len(),
        num_queries_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, seeded_rng};

    fn rows(r: &[&[f64]]) -> Matrix {
        Matrix::from_rows(r).unwrap()
    }

    #[test]
    fn triplet_inactive_anchor() {
        // anchor 0: d(a,p) = 1, d(a,n) = 3
        let s = rows(&[&[0.0], &[1.0], &[3.0]]);
        let labels = [0, 0, 1];
        let cfg = TripletConfig {
            margin: 0.5,
            mining: Mining::BatchHard,
        };
        let out = triplet_loss(&s, &labels, &cfg).unwrap();
        // anchor 1: d(a,p)=1, d(a,n)=2 -> 0; anchor 2 has no positive
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn triplet_active_anchor() {
        // anchor 0: d(a,p) = 2, d(a,n) = 1 -> 2 - 1 + 0.2 = 1.2
        // anchor 1: d(a,p) = 2, d(a,n) = 3 -> 0
        let s = rows(&[&[0.0], &[2.0], &[-1.0]]);
        let cfg = TripletConfig {
            margin: 0.2,
            mining: Mining::BatchHard,
        };
        let out = triplet_loss(&s, &[0, 0, 1], &cfg).unwrap();
        assert!((out.value - 1.2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn triplet_degenerate_equals_margin() {
        let s = Matrix::from_rows(&[[1.0, 1.0]; 4]).unwrap();
        for mining in [Mining::BatchHard, Mining::AllPairs] {
            let cfg = TripletConfig { margin: 0.3, mining };
            let out = triplet_loss(&s, &[0, 0, 1, 1], &cfg).unwrap();
            assert!((out.value - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn triplet_requires_valid_triplet() {
        let s = rows(&[&[0.0], &[1.0]]);
        assert_eq!(
            triplet_loss(&s, &[0, 1], &TripletConfig::default()),
            Err(Error::NoValidTriplet)
        );
        assert_eq!(
            triplet_loss(&s, &[4, 4], &TripletConfig::default()),
            Err(Error::NoValidTriplet)
        );
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(31);
        let labels = [0, 0, 1, 1, 2, 2, 0];
        for mining in [Mining::BatchHard, Mining::AllPairs] {
            let cfg = TripletConfig { margin: 0.5, mining };
            let s = rng.normal_matrix(7, 3, 1.0);
            let out = triplet_loss(&s, &labels, &cfg).unwrap();
            let fd = finite_diff_grad(
                |x| {
                    let m = Matrix::from_vec(7, 3, x.to_vec()).unwrap();
                    triplet_loss(&m, &labels, &cfg).unwrap().value
                },
                s.as_slice(),
                1e-6,
            )
            .unwrap();
            for (a, b) in out.grad.as_slice().iter().zip(&fd) {
                assert!((a - b).abs() < 1e-7, "{mining:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn recall_examples() {
        let db = rows(&[&[0.0, 0.0], &[5.0, 0.0], &[0.0, 5.0]]);
        let q = rows(&[&[5.0, 0.0]]);
        let truth = GroundTruth::new(vec![vec![1]]);
        assert_eq!(recall_at_k(&q, &db, &truth, 1).unwrap(), 100.0);

        let far = GroundTruth::new(vec![vec![2]]);
        let q = rows(&[&[0.1, 0.0]]);
        assert_eq!(recall_at_k(&q, &db, &far, 2).unwrap(), 0.0);
        assert_eq!(recall_at_k(&q, &db, &far, 3).unwrap(), 100.0);
    }

    #[test]
    fn recall_ties_prefer_lower_index() {
        let db = rows(&[&[1.0], &[-1.0]]);
        let q = rows(&[&[0.0]]);
        assert_eq!(recall_at_k(&q, &db, &GroundTruth::new(vec![vec![0]]), 1).unwrap(), 100.0);
        assert_eq!(recall_at_k(&q, &db, &GroundTruth::new(vec![vec![1]]), 1).unwrap(), 0.0);
    }

    #[test]
    fn recall_errors_and_skips() {
        let db = rows(&[&[0.0], &[1.0]]);
        let q = rows(&[&[0.0], &[1.0]]);
        let truth = GroundTruth::new(vec![vec![0], vec![]]);
        let report = evaluate(&q, &db, &truth, 25).unwrap();
        assert_eq!(report.num_queries_evaluated, 1);
        assert_eq!(report.num_queries_skipped, 1);
        assert_eq!(report.curve.len(), 2);
        assert!(recall_at_k(&q, &db, &truth, 0).is_err());
        assert!(recall_at_k(&q, &db, &truth, 3).is_err());
        assert!(recall_at_k(&q, &db, &GroundTruth::new(vec![vec![7]]), 1).is_err());
        let empty = Matrix::zeros(0, 1);
        assert!(evaluate(&q, &empty, &truth, 1).is_err());
    }

    #[test]
    fn one_percent_rule() {
        assert_eq!(one_percent_k(200), 2);
        assert_eq!(one_percent_k(50), 1);
        assert_eq!(one_percent_k(100), 1);
        assert_eq!(one_percent_k(150), 2);
        assert_eq!(one_percent_k(1), 1);
    }
}
