//! Frozen multimodal item-item graph: cosine similarity, kNN sparsification,
//! symmetric normalisation and weighted aggregation across modalities.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GraphKind, SparseGraph};
use crate::dataio::{Modality, ModalityFeatures};
use crate::error::{Error, Result};

/// Dense cosine similarities plus the number of zero-norm rows encountered.
#[derive(Debug, Clone)]
pub struct CosineSimilarity {
    pub matrix: Array2<f64>,
    /// Zero-norm rows get similarity 0 against every item, themselves included.
    pub zero_norm_rows: usize,
}

fn unit_rows(features: &ModalityFeatures) -> (Vec<Array1<f64>>, usize) {
    let mut zero = 0;
    let rows = features
        .matrix
        .outer_iter()
        .map(|r| {
            let v = r.mapv(f64::from);
            let n = v.dot(&v).sqrt();
            if n > 0.0 {
                v / n
            } else {
                zero += 1;
                Array1::zeros(v.len())
            }
        })
        .collect();
    (rows, zero)
}

pub fn cosine_similarity_matrix(features: &ModalityFeatures) -> CosineSimilarity {
    let (rows, zero_norm_rows) = unit_rows(features);
    let n = rows.len();
    let mut matrix = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let s = rows[i].dot(&rows[j]);
            matrix[[i, j]] = s;
            matrix[[j, i]] = s;
        }
    }
    // Exact 1 on the diagonal of non-degenerate rows.
    for (i, r) in rows.iter().enumerate() {
        if r.iter().any(|&x| x != 0.0) {
            matrix[[i, i]] = 1.0;
        }
    }
    CosineSimilarity {
        matrix,
        zero_norm_rows,
    }
}

/// Indices of the `k` largest entries of `row`, skipping `skip`.
///
/// Ordered by value descending, ties broken by lower index.
pub fn top_k_indices(row: &[f64], skip: usize, k: usize) -> Vec<usize> {
    let by_rank = |a: &usize, b: &usize| -> Ordering {
        row[*b]
            .partial_cmp(&row[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut cand: Vec<usize> = (0..row.len()).filter(|&j| j != skip).collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k, by_rank);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_rank);
    cand
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::Config(format!("kNN needs 1 ≤ k < {n}, got k = {k}")));
    }
    Ok(())
}

/// Directed 0/1 kNN graph: row `i` links to its `k` most similar other items.
pub fn knn_sparsify(similarity: &Array2<f64>, k: usize) -> Result<SparseGraph> {
    let n = similarity.nrows();
    if similarity.ncols() != n {
        return Err(Error::Dimension("similarity matrix must be square".into()));
    }
    check_k(k, n)?;
    let edges = similarity
        .outer_iter()
        .enumerate()
        .flat_map(|(i, row)| {
            let row = row.to_vec();
            top_k_indices(&row, i, k)
                .into_iter()
                .map(move |j| (i, j, 1.0))
        })
        .collect();
    SparseGraph::from_edges(n, n, GraphKind::ItemItem, edges)
}

/// Per-item `k` nearest neighbours by cosine similarity, without materialising
/// the full similarity matrix.
pub fn nearest_neighbors(features: &ModalityFeatures, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = features.num_items();
    check_k(k, n)?;
    let (rows, _) = unit_rows(features);
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let sims: Vec<f64> = rows.iter().map(|r| rows[i].dot(r)).collect();
            top_k_indices(&sims, i, k)
        })
        .collect())
}

/// Keep `(i, j)` when either direction is present; weights reset to 1.
pub fn symmetrize_union(g: &SparseGraph) -> Result<SparseGraph> {
    let mut edges: Vec<(usize, usize, f64)> = g
        .edges()
        .flat_map(|(r, c, _)| [(r, c, 1.0), (c, r, 1.0)])
        .collect();
    edges.sort_by_key(|e| (e.0, e.1));
    edges.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    SparseGraph::from_edges(g.n_rows(), g.n_cols(), g.kind(), edges)
}

/// `D^{-1/2} Â D^{-1/2}` with degrees counted on the unweighted graph.
pub fn normalize_symmetric(g: &SparseGraph) -> SparseGraph {
    let deg = g.degrees();
    let weights = g
        .edges()
        .map(|(r, c, _)| {
            assert!(
                deg[r] > 0 && deg[c] > 0,
                "edge ({r}, {c}) touches a zero-degree node"
            );
            1.0 / ((deg[r] as f64) * (deg[c] as f64)).sqrt()
        })
        .collect();
    g.with_weights(weights)
}

/// Convex modality weights `α_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityWeights(BTreeMap<Modality, f64>);

impl ModalityWeights {
    pub fn new(weights: impl IntoIterator<Item = (Modality, f64)>) -> Result<Self> {
        let map: BTreeMap<Modality, f64> = weights.into_iter().collect();
        if map.values().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return Err(Error::Config(
                "modality weights must be non-negative".into(),
            ));
        }
        let total: f64 = map.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "modality weights sum to {total}, not 1"
            )));
        }
        Ok(Self(map))
    }

    /// All weight on one modality.
    pub fn only(m: Modality) -> Self {
        Self(
            Modality::ALL
                .iter()
                .map(|&x| (x, if x == m { 1.0 } else { 0.0 }))
                .collect(),
        )
    }

    pub fn get(&self, m: Modality) -> f64 {
        self.0.get(&m).copied().unwrap_or(0.0)
    }

    /// Renormalise over the modalities actually present.
    pub fn restricted_to(&self, present: &[Modality]) -> Result<Self> {
        let total: f64 = present.iter().map(|&m| self.get(m)).sum();
        if total <= 0.0 {
            return Err(Error::Config(
                "all modality weight falls on modalities without features".into(),
            ));
        }
        Self::new(present.iter().map(|&m| (m, self.get(m) / total)))
    }
}

/// `S = Σ_m α_m S̃^m`; edges shared between modalities add up and zero-weight
/// contributions are dropped.
pub fn aggregate_modalities(
    graphs: &[(Modality, SparseGraph)],
    weights: &ModalityWeights,
) -> Result<SparseGraph> {
    let Some((_, first)) = graphs.first() else {
        return Err(Error::Dimension("no modality graphs to aggregate".into()));
    };
    let n = first.n_rows();
    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (m, g) in graphs {
        if g.n_rows() != n || g.n_cols() != n {
            return Err(Error::Dimension(format!(
                "{m} graph is {}×{}, expected {n}×{n}",
                g.n_rows(),
                g.n_cols()
            )));
        }
        let alpha = weights.get(*m);
        if alpha == 0.0 {
            continue;
        }
        for (r, c, w) in g.edges() {
            *acc.entry((r, c)).or_insert(0.0) += alpha * w;
        }
    }
    let edges = acc.into_iter().map(|((r, c), w)| (r, c, w)).collect();
    SparseGraph::from_edges(n, n, GraphKind::ItemItem, edges)
}

/// Per-modality normalised kNN graphs and their weighted sum.
#[derive(Debug, Clone)]
pub struct ItemGraph {
    pub per_modality: Vec<(Modality, SparseGraph)>,
    pub combined: SparseGraph,
}

/// Normalised, union-symmetrised kNN graph for one modality.
pub fn modality_graph(features: &ModalityFeatures, k: usize) -> Result<SparseGraph> {
    let n = features.num_items();
    let knn = nearest_neighbors(features, k)?;
    let edges = knn
        .into_iter()
        .enumerate()
        .flat_map(|(i, js)| js.into_iter().map(move |j| (i, j, 1.0)))
        .collect();
    let directed = SparseGraph::from_edges(n, n, GraphKind::ItemItem, edges)?;
    Ok(normalize_symmetric(&symmetrize_union(&directed)?))
}

pub fn build_item_graph(
    features: &[ModalityFeatures],
    k: usize,
    weights: &ModalityWeights,
) -> Result<ItemGraph> {
    let per_modality = features
        .iter()
        .map(|f| Ok((f.modality, modality_graph(f, k)?)))
        .collect::<Result<Vec<_>>>()?;
    let present: Vec<Modality> = per_modality.iter().map(|(m, _)| *m).collect();
    let combined = aggregate_modalities(&per_modality, &weights.restricted_to(&present)?)?;
    Ok(ItemGraph {
        per_modality,
        combined,
    })
}
