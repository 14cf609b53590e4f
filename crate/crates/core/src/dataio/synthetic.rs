//! Synthetic interaction logs and cluster-structured feature matrices.
//!
//! Three generators cover the experiments that cannot use the real catalogs:
//! a deterministic cycle (pure sequential signal), a feature-neighbour walk
//! (the next item is always one of the feature-nearest neighbours of the
//! current one) and uniformly random histories (no signal at all).

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{InteractionLog, Modality, ModalityFeatures};
use crate::error::{Error, Result};
use crate::graphs::nearest_neighbors;

/// Cluster-structured Gaussian features.
///
/// Item `i` belongs to cluster `i * clusters / num_items`. Its feature row is
/// `separation · u_c + ε` with `u_c` a random unit direction and `ε ~ N(0, I)`,
/// so `separation` is the cluster-centre norm in units of the per-coordinate
/// noise σ. With zero clusters every row is plain `N(0, I)` noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub num_items: usize,
    pub dim: usize,
    pub clusters: usize,
    pub separation: f64,
}

impl FeatureSpec {
    pub fn cluster_of(&self, item: usize) -> Option<usize> {
        (self.clusters > 0).then(|| item * self.clusters / self.num_items)
    }
}

pub fn generate_synthetic<R: Rng + ?Sized>(
    spec: &FeatureSpec,
    modality: Modality,
    rng: &mut R,
) -> Result<ModalityFeatures> {
    if spec.dim == 0 || spec.num_items == 0 {
        return Err(Error::Dimension(
            "synthetic features need items and dim ≥ 1".into(),
        ));
    }
    let centers: Vec<Array1<f64>> = (0..spec.clusters)
        .map(|_| {
            let v: Array1<f64> = (0..spec.dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.dot(&v).sqrt().max(f64::MIN_POSITIVE);
            v / norm
        })
        .collect();
    let mut m = Array2::<f32>::zeros((spec.num_items, spec.dim));
    for (i, mut row) in m.outer_iter_mut().enumerate() {
        let center = spec.cluster_of(i).map(|c| &centers[c]);
        for (j, x) in row.iter_mut().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            let shift = center.map_or(0.0, |c| spec.separation * c[j]);
            *x = (shift + noise) as f32;
        }
    }
    ModalityFeatures::new(modality, m)
}

/// A generated log together with its item features.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub log: InteractionLog,
    pub features: Vec<ModalityFeatures>,
}

/// `next = (current + 1) mod num_items`, random start, length uniform in `[min_len, max_len]`.
pub fn cyclic<R: Rng + ?Sized>(
    num_users: usize,
    num_items: usize,
    min_len: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<InteractionLog> {
    check_lengths(min_len, max_len)?;
    let sequences = (0..num_users)
        .map(|_| {
            let start = rng.random_range(0..num_items);
            let len = rng.random_range(min_len..=max_len);
            (0..len).map(|t| (start + t) % num_items).collect()
        })
        .collect();
    InteractionLog::from_sequences(num_items, sequences)
}

/// Uniformly random histories of distinct items over i.i.d. Gaussian features.
pub fn random_histories<R: Rng + ?Sized>(
    num_users: usize,
    num_items: usize,
    min_len: usize,
    max_len: usize,
    feature_dim: usize,
    rng: &mut R,
) -> Result<SyntheticDataset> {
    check_lengths(min_len, max_len)?;
    if max_len > num_items {
        return Err(Error::Config("histories longer than the catalog".into()));
    }
    let sequences = (0..num_users)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            rand::seq::index::sample(rng, num_items, len).into_vec()
        })
        .collect();
    let log = InteractionLog::from_sequences(num_items, sequences)?;
    let spec = FeatureSpec {
        num_items,
        dim: feature_dim,
        clusters: 0,
        separation: 0.0,
    };
    let features = Modality::ALL
        .iter()
        .map(|&m| generate_synthetic(&spec, m, rng))
        .collect::<Result<_>>()?;
    Ok(SyntheticDataset { log, features })
}

/// Parameters of [`neighbor_walk`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborWalkSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub clusters: usize,
    pub feature_dim: usize,
    pub separation: f64,
    /// Each step moves to one of this many feature-nearest neighbours.
    pub neighbors: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for NeighborWalkSpec {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 400,
            clusters: 50,
            feature_dim: 32,
            separation: 10.0,
            neighbors: 5,
            min_len: 4,
            max_len: 6,
        }
    }
}

/// Histories that walk the feature-neighbour graph without revisiting items.
///
/// Neighbours are computed on the text modality by cosine similarity, so
/// every item in a history (including the held-out last two) is among the
/// `neighbors` text-feature-nearest neighbours of its predecessor.
pub fn neighbor_walk<R: Rng + ?Sized>(
    spec: &NeighborWalkSpec,
    rng: &mut R,
) -> Result<SyntheticDataset> {
    check_lengths(spec.min_len, spec.max_len)?;
    let fspec = FeatureSpec {
        num_items: spec.num_items,
        dim: spec.feature_dim,
        clusters: spec.clusters,
        separation: spec.separation,
    };
    let text = generate_synthetic(&fspec, Modality::Text, rng)?;
    let visual = generate_synthetic(&fspec, Modality::Visual, rng)?;
    let knn = nearest_neighbors(&text, spec.neighbors)?;

    let mut sequences = Vec::with_capacity(spec.num_users);
    let mut attempts = 0usize;
    while sequences.len() < spec.num_users {
        attempts += 1;
        if attempts > spec.num_users * 1000 {
            return Err(Error::Config(
                "neighbour graph too sparse for the requested history lengths".into(),
            ));
        }
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut seq = vec![rng.random_range(0..spec.num_items)];
        while seq.len() < len {
            let cur = *seq.last().unwrap();
            let options: Vec<usize> = knn[cur]
                .iter()
                .copied()
                .filter(|i| !seq.contains(i))
                .collect();
            match options.choose(rng) {
                Some(&next) => seq.push(next),
                None => break,
            }
        }
        if seq.len() == len {
            sequences.push(seq);
        }
    }
    let log = InteractionLog::from_sequences(spec.num_items, sequences)?;
    Ok(SyntheticDataset {
        log,
        features: vec![text, visual],
    })
}

fn check_lengths(min_len: usize, max_len: usize) -> Result<()> {
    if min_len < 3 || max_len < min_len {
        return Err(Error::Config(format!(
            "history lengths must satisfy 3 ≤ min ({min_len}) ≤ max ({max_len})"
        )));
    }
    Ok(())
}

/// Mean pairwise cosine similarity within and across clusters.
pub fn cluster_cosine_means(features: &ModalityFeatures, spec: &FeatureSpec) -> (f64, f64) {
    let rows: Vec<Array1<f64>> = features
        .matrix
        .outer_iter()
        .map(|r| r.mapv(f64::from))
        .collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.dot(r).sqrt()).collect();
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let c = rows[i].dot(&rows[j]) / (norms[i] * norms[j]);
            if spec.cluster_of(i) == spec.cluster_of(j) {
                within += c;
                nw += 1;
            } else {
                between += c;
                nb += 1;
            }
        }
    }
    (within / nw.max(1) as f64, between / nb.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_clusters_are_iid_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = FeatureSpec {
            num_items: 2000,
            dim: 4,
            clusters: 0,
            separation: 10.0,
        };
        let f = generate_synthetic(&spec, Modality::Text, &mut rng).unwrap();
        let mean = f.matrix.mapv(f64::from).mean().unwrap();
        let var = f
            .matrix
            .mapv(|x| (f64::from(x) - mean).powi(2))
            .mean()
            .unwrap();
        assert!(mean.abs() < 0.05, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn separated_clusters_are_more_similar_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = FeatureSpec {
            num_items: 60,
            dim: 32,
            clusters: 6,
            separation: 10.0,
        };
        let f = generate_synthetic(&spec, Modality::Visual, &mut rng).unwrap();
        let (within, between) = cluster_cosine_means(&f, &spec);
        assert!(within > between + 0.3, "within {within} between {between}");
    }

    #[test]
    fn cyclic_sequences_follow_successor_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let log = cyclic(50, 30, 8, 15, &mut rng).unwrap();
        for s in &log.sequences {
            assert!((8..=15).contains(&s.len()));
            assert!(s.windows(2).all(|w| w[1] == (w[0] + 1) % 30));
        }
    }

    #[test]
    fn walks_stay_on_the_neighbour_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = NeighborWalkSpec {
            num_users: 40,
            ..NeighborWalkSpec::default()
        };
        let ds = neighbor_walk(&spec, &mut rng).unwrap();
        let knn = nearest_neighbors(&ds.features[0], spec.neighbors).unwrap();
        for s in &ds.log.sequences {
            for w in s.windows(2) {
                assert!(knn[w[0]].contains(&w[1]));
            }
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), s.len(), "history repeats an item");
        }
    }
}
