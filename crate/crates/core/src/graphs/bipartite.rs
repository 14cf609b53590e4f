//! User-item bipartite adjacency and degree-sensitive edge pruning.

use rand::Rng;

use super::{normalize_symmetric, GraphKind, SparseGraph};
use crate::error::{Error, Result};

/// `Â = [[0, R], [Rᵀ, 0]]` from training histories; repeated interactions
/// collapse to one edge.
pub fn build_bipartite(train: &[Vec<usize>], num_items: usize) -> Result<SparseGraph> {
    let num_users = train.len();
    let n = num_users + num_items;
    let mut pairs: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    if let Some(&(_, i)) = pairs.iter().find(|&&(_, i)| i >= num_items) {
        return Err(Error::Dimension(format!(
            "item {i} out of range for {num_items} items"
        )));
    }
    let edges = pairs
        .into_iter()
        .flat_map(|(u, i)| [(u, num_users + i, 1.0), (num_users + i, u, 1.0)])
        .collect();
    SparseGraph::from_edges(n, n, GraphKind::UserItemBipartite { num_users }, edges)
}

/// Undirected edges `(a, b)` with `a < b` and their normalised retention
/// probabilities `p_ab ∝ 1 / (√deg(a) √deg(b))`.
pub fn edge_retention_probabilities(g: &SparseGraph) -> Vec<(usize, usize, f64)> {
    let deg = g.degrees();
    let mut edges: Vec<(usize, usize, f64)> = g
        .edges()
        .filter(|&(r, c, _)| r < c)
        .map(|(r, c, _)| {
            (
                r,
                c,
                1.0 / ((deg[r] as f64).sqrt() * (deg[c] as f64).sqrt()),
            )
        })
        .collect();
    let total: f64 = edges.iter().map(|e| e.2).sum();
    edges.iter_mut().for_each(|e| e.2 /= total);
    edges
}

/// Keep `⌊keep_fraction · |E|⌋` undirected edges, drawn without replacement
/// with probability proportional to `p_ab`; both directions of a kept edge
/// survive with weight 1.
pub fn prune_edges<R: Rng + ?Sized>(
    g: &SparseGraph,
    keep_fraction: f64,
    rng: &mut R,
) -> Result<SparseGraph> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    if keep_fraction == 1.0 {
        return Ok(g.unweighted());
    }
    let probs = edge_retention_probabilities(g);
    let keep = (keep_fraction * probs.len() as f64).floor() as usize;
    let weights: Vec<f64> = probs.iter().map(|e| e.2).collect();
    let kept = sample_proportional_without_replacement(&weights, keep, rng);
    let edges = kept
        .into_iter()
        .flat_map(|e| {
            let (a, b, _) = probs[e];
            [(a, b, 1.0), (b, a, 1.0)]
        })
        .collect();
    SparseGraph::from_edges(g.n_rows(), g.n_cols(), g.kind(), edges)
}

/// Indices of `keep` entries drawn without replacement, each draw picking a
/// remaining index with probability proportional to its weight.
///
/// Implemented with exponential keys `ln(U) / w`: the `keep` largest keys have
/// the same distribution as successive proportional draws.
pub fn sample_proportional_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    keep: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(e, &w)| {
            let u: f64 = 1.0 - rng.random::<f64>();
            (u.ln() / w, e)
        })
        .collect();
    let by_key_desc = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if keep < keyed.len() {
        keyed.select_nth_unstable_by(keep, by_key_desc);
        keyed.truncate(keep);
    }
    let mut out: Vec<usize> = keyed.into_iter().map(|(_, e)| e).collect();
    out.sort_unstable();
    out
}

/// Prune, then normalise with the post-pruning degrees.
pub fn denoised_adjacency<R: Rng + ?Sized>(
    g: &SparseGraph,
    keep_fraction: f64,
    rng: &mut R,
) -> Result<SparseGraph> {
    Ok(normalize_symmetric(&prune_edges(g, keep_fraction, rng)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bipartite_construction() {
        let g = build_bipartite(&[vec![0]], 1).unwrap();
        assert_eq!(g.nnz(), 2);
        assert!(g.is_symmetric());

        let g = build_bipartite(&[vec![1, 1, 0], vec![2]], 3).unwrap();
        assert_eq!(g.nnz(), 2 * 3);
        assert_eq!(g.weight(0, 2 + 1), Some(1.0));
        assert!(build_bipartite(&[vec![3]], 3).is_err());
    }

    #[test]
    fn full_keep_is_identity() {
        let g = build_bipartite(&[vec![0], vec![1], vec![2]], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(prune_edges(&g, 1.0, &mut rng).unwrap(), g);
        assert!(prune_edges(&g, 0.0, &mut rng).is_err());
        assert!(prune_edges(&g, 1.5, &mut rng).is_err());
    }

    #[test]
    fn four_to_one_weights_keep_one_of_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 10_000;
        let heavy = (0..trials)
            .filter(|_| {
                sample_proportional_without_replacement(&[4.0, 1.0], 1, &mut rng) == vec![0]
            })
            .count();
        let f = heavy as f64 / trials as f64;
        assert!((f - 0.8).abs() < 0.02, "{f}");
    }

    #[test]
    fn retention_probabilities_follow_degrees() {
        // u0–i0 has degrees (1, 1); u1–i1 has degrees (4, 4): a 4:1 ratio.
        let train = vec![
            vec![0],
            vec![1, 2, 3, 4],
            vec![1, 5],
            vec![1, 6],
            vec![1, 7],
        ];
        let g = build_bipartite(&train, 8).unwrap();
        let probs = edge_retention_probabilities(&g);
        let total: f64 = probs.iter().map(|e| e.2).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let num_users = train.len();
        let p = |u: usize, i: usize| {
            probs
                .iter()
                .find(|e| e.0 == u && e.1 == num_users + i)
                .unwrap()
                .2
        };
        assert!((p(0, 0) / p(1, 1) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn equal_degrees_prune_uniformly() {
        let g = build_bipartite(&[vec![0], vec![1]], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let trials = 10_000;
        let mut first = 0;
        for _ in 0..trials {
            let p = prune_edges(&g, 0.5, &mut rng).unwrap();
            assert_eq!(p.nnz(), 2);
            if p.weight(0, 2).is_some() {
                first += 1;
            }
        }
        let f = first as f64 / trials as f64;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn pruning_never_adds_edges_and_stays_bipartite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let train: Vec<Vec<usize>> = (0..6)
            .map(|u| (0..5).filter(|i| (u + i) % 2 == 0).collect())
            .collect();
        let g = build_bipartite(&train, 5).unwrap();
        for _ in 0..50 {
            let p = denoised_adjacency(&g, 0.8, &mut rng).unwrap();
            assert!(p.is_symmetric());
            assert_eq!(p.nnz(), 2 * ((0.8 * (g.nnz() / 2) as f64).floor() as usize));
            assert!(p.edges().all(|(r, c, _)| g.weight(r, c).is_some()));
            assert!(p.spectral_radius(200) <= 1.0 + 1e-6);
        }
    }
}
