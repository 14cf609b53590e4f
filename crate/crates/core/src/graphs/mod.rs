//! Item-item and user-item graphs.

mod bipartite;
mod item;
mod sparse;

pub use bipartite::{
    build_bipartite, denoised_adjacency, edge_retention_probabilities, prune_edges,
    sample_proportional_without_replacement,
};
pub use item::{
    aggregate_modalities, build_item_graph, cosine_similarity_matrix, knn_sparsify, modality_graph,
    nearest_neighbors, normalize_symmetric, symmetrize_union, top_k_indices, CosineSimilarity,
    ItemGraph, ModalityWeights,
};
pub use sparse::{GraphKind, SparseGraph};
