//! Full-catalog ranking metrics and dataset diagnostics.

use std::cmp::Ordering;
use std::collections::HashSet;

use ndarray::Array1;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::dataio::{ModalityFeatures, Phase, SplitView};
use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 2] = [10, 20];

/// Produces one score row per requested user.
pub trait Scorer: Sync {
    fn score_users(&self, split: &SplitView, users: &[usize], phase: Phase) -> Result<Mat>;
}

/// Items in descending score order, ties broken by lower index, excluded items removed.
pub fn rank_items(scores: &[f64], exclusions: &HashSet<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|i| !exclusions.contains(i))
        .collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// 1-based rank of `target` under [`rank_items`] ordering, or `None` when it is excluded.
pub fn rank_of(scores: &[f64], target: usize, exclusions: &HashSet<usize>) -> Option<usize> {
    if exclusions.contains(&target) {
        return None;
    }
    let t = scores[target];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| {
            j != target && !exclusions.contains(&j) && (s > t || (s == t && j < target))
        })
        .count();
    Some(ahead + 1)
}

pub fn hit_rate_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub phase: Phase,
    pub num_users: usize,
    pub cutoffs: Vec<CutoffMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.cutoffs.iter().find(|c| c.k == k)
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |c| c.hr)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |c| c.ndcg)
    }

    /// `HR@k…` then `N@k…` column names.
    pub fn header(&self) -> Vec<String> {
        let hr = self.cutoffs.iter().map(|c| format!("HR@{}", c.k));
        let nd = self.cutoffs.iter().map(|c| format!("N@{}", c.k));
        hr.chain(nd).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        let hr = self.cutoffs.iter().map(|c| c.hr);
        let nd = self.cutoffs.iter().map(|c| c.ndcg);
        hr.chain(nd).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Remove history items (and the validation item when testing) from the candidates.
    pub exclude_history: bool,
    pub batch_users: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            exclude_history: true,
            batch_users: 256,
        }
    }
}

/// Target rank for every user, in user order.
pub fn user_ranks(
    scorer: &dyn Scorer,
    split: &SplitView,
    phase: Phase,
    opts: &EvalOptions,
) -> Result<Vec<Option<usize>>> {
    let users: Vec<usize> = (0..split.num_users()).collect();
    let chunks: Vec<Result<Vec<Option<usize>>>> = users
        .par_chunks(opts.batch_users.max(1))
        .map(|chunk| {
            let scores = scorer.score_users(split, chunk, phase)?;
            if scores.dim() != (chunk.len(), split.num_items) {
                return Err(Error::Dimension(format!(
                    "scorer returned {:?} for {} users × {} items",
                    scores.dim(),
                    chunk.len(),
                    split.num_items
                )));
            }
            Ok(chunk
                .iter()
                .zip(scores.outer_iter())
                .map(|(&u, row)| {
                    let excl: HashSet<usize> = if opts.exclude_history {
                        split.history(u, phase).into_iter().collect()
                    } else {
                        HashSet::new()
                    };
                    let row = row.to_vec();
                    rank_of(&row, split.target(u, phase), &excl)
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(users.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn report_from_ranks(ranks: &[Option<usize>], phase: Phase, ks: &[usize]) -> MetricsReport {
    let n = ranks.len().max(1) as f64;
    let cutoffs = ks
        .iter()
        .map(|&k| CutoffMetrics {
            k,
            hr: ranks.iter().map(|&r| hit_rate_at_k(r, k)).sum::<f64>() / n,
            ndcg: ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n,
        })
        .collect();
    MetricsReport {
        phase,
        num_users: ranks.len(),
        cutoffs,
        config_hash: None,
        epoch: None,
    }
}

pub fn evaluate(
    scorer: &dyn Scorer,
    split: &SplitView,
    phase: Phase,
    ks: &[usize],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let ranks = user_ranks(scorer, split, phase, opts)?;
    Ok(report_from_ranks(&ranks, phase, ks))
}

/// Mean pairwise cosine similarity of item features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDiagnostic {
    pub mean: f64,
    pub pairs: u64,
    /// Standard error of the mean; zero when every pair was used.
    pub std_error: f64,
    pub sampled: bool,
}

pub const EXHAUSTIVE_PAIR_LIMIT: u64 = 10_000_000;

pub fn feature_similarity_diagnostic<R: Rng + ?Sized>(
    features: &ModalityFeatures,
    sample_pairs: u64,
    rng: &mut R,
) -> Result<SimilarityDiagnostic> {
    let n = features.num_items();
    if n < 2 {
        return Err(Error::Precondition("need at least two items".into()));
    }
    let rows: Vec<Array1<f64>> = features
        .matrix
        .outer_iter()
        .map(|r| {
            let r = r.mapv(f64::from);
            let norm = r.dot(&r).sqrt();
            if norm > 0.0 {
                r / norm
            } else {
                r
            }
        })
        .collect();
    let total = n as u64 * (n as u64 - 1) / 2;
    if total <= EXHAUSTIVE_PAIR_LIMIT {
        let sum: f64 = (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| rows[i].dot(&rows[j])).sum::<f64>())
            .collect::<Vec<_>>()
            .iter()
            .sum();
        return Ok(SimilarityDiagnostic {
            mean: sum / total as f64,
            pairs: total,
            std_error: 0.0,
            sampled: false,
        });
    }
    let m = sample_pairs.max(2);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..m {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let c = rows[i].dot(&rows[j]);
        sum += c;
        sq += c * c;
    }
    let mean = sum / m as f64;
    let var = (sq / m as f64 - mean * mean).max(0.0) * m as f64 / (m - 1) as f64;
    Ok(SimilarityDiagnostic {
        mean,
        pairs: m,
        std_error: (var / m as f64).sqrt(),
        sampled: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Modality;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn signed_zeros_tie() {
        let none = HashSet::new();
        assert_eq!(rank_items(&[-0.0, 0.0], &none), vec![0, 1]);
        assert_eq!(rank_of(&[0.0, -0.0], 1, &none), Some(2));
    }

    #[test]
    fn ranking_examples() {
        let none = HashSet::new();
        assert_eq!(rank_items(&[3.0, 1.0, 2.0], &none), vec![0, 2, 1]);
        assert_eq!(
            rank_items(&[3.0, 1.0, 2.0], &HashSet::from([0])),
            vec![2, 1]
        );
        assert_eq!(rank_items(&[1.0, 1.0, 1.0], &none), vec![0, 1, 2]);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 1, &none), Some(2));
        assert_eq!(rank_of(&[1.0, 5.0], 0, &HashSet::from([1])), Some(1));
        assert_eq!(rank_of(&[1.0, 5.0], 0, &HashSet::from([0])), None);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(hit_rate_at_k(Some(1), 10), 1.0);
        assert_eq!(hit_rate_at_k(Some(11), 10), 0.0);
        assert_eq!(ndcg_at_k(Some(1), 10), 1.0);
        assert!((ndcg_at_k(Some(4), 10) - 0.430_676_558).abs() < 1e-8);
        assert_eq!(ndcg_at_k(Some(11), 10), 0.0);
        let ranks = [Some(1), Some(5), Some(15), Some(25)];
        let r = report_from_ranks(&ranks, Phase::Test, &[10, 20]);
        assert_eq!(r.hr(10), 0.5);
        assert_eq!(r.hr(20), 0.75);
        assert_eq!(r.header(), vec!["HR@10", "HR@20", "N@10", "N@20"]);
    }

    struct Perfect;

    impl Scorer for Perfect {
        fn score_users(&self, split: &SplitView, users: &[usize], phase: Phase) -> Result<Mat> {
            let mut m = Mat::zeros((users.len(), split.num_items));
            for (r, &u) in users.iter().enumerate() {
                m[[r, split.target(u, phase)]] = 1.0;
            }
            Ok(m)
        }
    }

    #[test]
    fn perfect_scorer_scores_one() {
        let split = SplitView {
            num_items: 6,
            train: vec![vec![0, 1], vec![2], vec![3, 4]],
            valid: vec![2, 3, 5],
            test: vec![3, 4, 0],
        };
        for phase in [Phase::Valid, Phase::Test] {
            let r = evaluate(
                &Perfect,
                &split,
                phase,
                &DEFAULT_KS,
                &EvalOptions::default(),
            )
            .unwrap();
            assert_eq!(r.values(), vec![1.0; 4]);
        }
    }

    #[test]
    fn similarity_diagnostic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = ModalityFeatures::new(Modality::Text, Array2::from_elem((5, 3), 2.0)).unwrap();
        let d = feature_similarity_diagnostic(&same, 1000, &mut rng).unwrap();
        assert!((d.mean - 1.0).abs() < 1e-6 && !d.sampled);
        let ortho = ModalityFeatures::new(
            Modality::Visual,
            array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0]],
        )
        .unwrap();
        let d = feature_similarity_diagnostic(&ortho, 1000, &mut rng).unwrap();
        assert_eq!(d.mean, 0.0);
        assert_eq!(d.pairs, 3);
    }
}
