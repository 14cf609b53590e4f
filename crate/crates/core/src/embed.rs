//! ID embedding tables, modality projections and LightGCN-style propagation.

use std::sync::Arc;

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{LinearMap, Mat, Tape, Var};
use crate::dataio::{Modality, ModalityFeatures};
use crate::error::{Error, Result};
use crate::graphs::SparseGraph;

/// Uniform Xavier initialisation, `U(-a, a)` with `a = √(6 / (rows + cols))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub user_table: Mat,
    pub item_table: Mat,
}

impl EmbeddingTables {
    pub fn xavier<R: Rng + ?Sized>(
        num_users: usize,
        num_items: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            user_table: xavier_uniform(num_users, dim, rng),
            item_table: xavier_uniform(num_items, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.item_table.ncols()
    }
}

/// Affine map from raw modality features into the embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityProjection {
    pub modality: Modality,
    /// `feature_dim × d`
    pub weight: Mat,
    /// `1 × d`
    pub bias: Mat,
}

impl ModalityProjection {
    pub fn xavier<R: Rng + ?Sized>(
        modality: Modality,
        feature_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            modality,
            weight: xavier_uniform(feature_dim, dim, rng),
            bias: Mat::zeros((1, dim)),
        }
    }
}

/// Which graphs feed the final embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Propagation {
    /// Raw ID tables, no graph.
    None,
    /// `h_i = item_table + h̃_i`, `h_u = user_table`.
    ItemItem,
    /// `h_i = item_table + ĥ_i`, `h_u = ĥ_u`.
    UserItem,
    /// `h_i = h̃_i + ĥ_i`, `h_u = ĥ_u`.
    Both,
}

impl Propagation {
    pub fn uses_item_graph(self) -> bool {
        matches!(self, Propagation::ItemItem | Propagation::Both)
    }

    pub fn uses_user_graph(self) -> bool {
        matches!(self, Propagation::UserItem | Propagation::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedEmbeddings {
    /// `h_u`
    pub users: Mat,
    /// `h_i`
    pub items: Mat,
    /// `ĥ`, user rows then item rows; `None` when the user-item graph is unused.
    pub user_item: Option<Mat>,
    /// `h̃`; `None` when the item-item graph is unused.
    pub item_item: Option<Mat>,
}

/// `L` rounds of `X ← G X` on the tape.
pub fn propagate_on_tape(tape: &mut Tape, graph: &Arc<SparseGraph>, x: Var, layers: usize) -> Var {
    let map: Arc<dyn LinearMap> = graph.clone();
    (0..layers).fold(x, |x, _| tape.linear_map(x, map.clone()))
}

/// `G^L X0`; the last layer's signal only.
pub fn propagate(graph: &SparseGraph, x0: &Mat, layers: usize) -> Result<Mat> {
    if x0.nrows() != graph.n_cols() {
        return Err(Error::Dimension(format!(
            "signal has {} rows, graph has {} nodes",
            x0.nrows(),
            graph.n_cols()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let out = propagate_on_tape(&mut tape, &Arc::new(graph.clone()), x, layers);
    Ok(tape.value(out).clone())
}

/// Graphs and depths used by [`embed_on_tape`].
#[derive(Clone)]
pub struct GraphInputs {
    pub mode: Propagation,
    pub item_graph: Option<Arc<SparseGraph>>,
    pub user_graph: Option<Arc<SparseGraph>>,
    pub item_layers: usize,
    pub user_layers: usize,
}

/// Tape handles of one embedding forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub users: Var,
    pub items: Var,
    pub user_item: Option<Var>,
    pub item_item: Option<Var>,
}

pub fn embed_on_tape(
    tape: &mut Tape,
    inputs: &GraphInputs,
    user_table: Var,
    item_table: Var,
) -> Result<EmbeddingVars> {
    let num_users = tape.shape(user_table).0;
    let num_items = tape.shape(item_table).0;
    let item_item = if inputs.mode.uses_item_graph() {
        let g = inputs
            .item_graph
            .as_ref()
            .ok_or_else(|| Error::Precondition("item-item graph required".into()))?;
        if g.n_rows() != num_items {
            return Err(Error::Dimension(format!(
                "item graph has {} nodes for {num_items} items",
                g.n_rows()
            )));
        }
        Some(propagate_on_tape(tape, g, item_table, inputs.item_layers))
    } else {
        None
    };
    let user_item = if inputs.mode.uses_user_graph() {
        let g = inputs
            .user_graph
            .as_ref()
            .ok_or_else(|| Error::Precondition("user-item graph required".into()))?;
        if g.n_rows() != num_users + num_items {
            return Err(Error::Dimension(format!(
                "user-item graph has {} nodes for {num_users} users and {num_items} items",
                g.n_rows()
            )));
        }
        let stacked = tape.vstack(user_table, item_table);
        Some(propagate_on_tape(tape, g, stacked, inputs.user_layers))
    } else {
        None
    };
    let hat = user_item.map(|h| {
        (
            tape.slice_rows(h, 0, num_users),
            tape.slice_rows(h, num_users, num_items),
        )
    });
    let (users, items) = match (item_item, hat) {
        (None, None) => (user_table, item_table),
        (Some(tilde), None) => (user_table, tape.add(item_table, tilde)),
        (None, Some((hu, hi))) => (hu, tape.add(item_table, hi)),
        (Some(tilde), Some((hu, hi))) => (hu, tape.add(tilde, hi)),
    };
    Ok(EmbeddingVars {
        users,
        items,
        user_item,
        item_item,
    })
}

/// Final user and item embeddings for fixed tables.
pub fn forward_embeddings(
    tables: &EmbeddingTables,
    inputs: &GraphInputs,
) -> Result<PropagatedEmbeddings> {
    let mut tape = Tape::new();
    let u = tape.constant(tables.user_table.clone());
    let i = tape.constant(tables.item_table.clone());
    let vars = embed_on_tape(&mut tape, inputs, u, i)?;
    Ok(PropagatedEmbeddings {
        users: tape.value(vars.users).clone(),
        items: tape.value(vars.items).clone(),
        user_item: vars.user_item.map(|v| tape.value(v).clone()),
        item_item: vars.item_item.map(|v| tape.value(v).clone()),
    })
}

/// Feature rows as `f64`, in the given order.
pub fn feature_rows(features: &ModalityFeatures, rows: &[usize]) -> Mat {
    features.matrix.select(Axis(0), rows).mapv(f64::from)
}

/// `F W + b` on the tape, for feature rows already gathered.
pub fn project_on_tape(tape: &mut Tape, rows: Mat, weight: Var, bias: Var) -> Result<Var> {
    if rows.ncols() != tape.shape(weight).0 {
        return Err(Error::Dimension(format!(
            "features have {} columns, projection expects {}",
            rows.ncols(),
            tape.shape(weight).0
        )));
    }
    let f = tape.constant(rows);
    let fw = tape.matmul(f, weight);
    Ok(tape.add_row(fw, bias))
}

/// `h^m` for every item.
pub fn project_modality(features: &ModalityFeatures, proj: &ModalityProjection) -> Result<Mat> {
    if proj.bias.dim() != (1, proj.weight.ncols()) {
        return Err(Error::Dimension("projection bias must be 1 × d".into()));
    }
    let mut tape = Tape::new();
    let w = tape.constant(proj.weight.clone());
    let b = tape.constant(proj.bias.clone());
    let all: Vec<usize> = (0..features.num_items()).collect();
    let out = project_on_tape(&mut tape, feature_rows(features, &all), w, b)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{GraphKind, SparseGraph};
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair_graph() -> SparseGraph {
        SparseGraph::from_edges(2, 2, GraphKind::ItemItem, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap()
    }

    #[test]
    fn zero_layers_is_identity_and_one_layer_swaps() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(propagate(&pair_graph(), &x, 0).unwrap(), x);
        assert_eq!(
            propagate(&pair_graph(), &x, 1).unwrap(),
            array![[3.0, 4.0], [1.0, 2.0]]
        );
        assert!(propagate(&pair_graph(), &Array2::zeros((3, 2)), 1).is_err());
    }

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = EmbeddingTables::xavier(30, 50, 64, &mut rng);
        let a = (6.0 / (30.0 + 64.0f64)).sqrt();
        assert!(t.user_table.iter().all(|v| v.abs() <= a));
        assert_eq!(t.dim(), 64);
    }

    #[test]
    fn empty_user_graph_leaves_item_graph_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tables = EmbeddingTables::xavier(2, 2, 3, &mut rng);
        let inputs = GraphInputs {
            mode: Propagation::Both,
            item_graph: Some(Arc::new(pair_graph())),
            user_graph: Some(Arc::new(SparseGraph::empty(
                4,
                4,
                GraphKind::UserItemBipartite { num_users: 2 },
            ))),
            item_layers: 1,
            user_layers: 2,
        };
        let out = forward_embeddings(&tables, &inputs).unwrap();
        assert_eq!(out.items, out.item_item.unwrap());
        assert!(out.users.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_layers_double_the_item_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tables = EmbeddingTables::xavier(1, 2, 3, &mut rng);
        let inputs = GraphInputs {
            mode: Propagation::Both,
            item_graph: Some(Arc::new(pair_graph())),
            user_graph: Some(Arc::new(
                SparseGraph::from_edges(
                    3,
                    3,
                    GraphKind::UserItemBipartite { num_users: 1 },
                    vec![(0, 1, 1.0), (1, 0, 1.0)],
                )
                .unwrap(),
            )),
            item_layers: 0,
            user_layers: 0,
        };
        let out = forward_embeddings(&tables, &inputs).unwrap();
        assert_eq!(out.items, &tables.item_table * 2.0);
        assert_eq!(out.users, tables.user_table);
    }

    #[test]
    fn base_mode_is_the_raw_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tables = EmbeddingTables::xavier(2, 3, 4, &mut rng);
        let inputs = GraphInputs {
            mode: Propagation::None,
            item_graph: None,
            user_graph: None,
            item_layers: 1,
            user_layers: 2,
        };
        let out = forward_embeddings(&tables, &inputs).unwrap();
        assert_eq!(out.items, tables.item_table);
        assert_eq!(out.users, tables.user_table);
    }

    #[test]
    fn projection_cases() {
        let feats =
            ModalityFeatures::new(Modality::Text, array![[1.0f32, 2.0], [3.0, -1.0]]).unwrap();
        let zero = ModalityProjection {
            modality: Modality::Text,
            weight: Mat::zeros((2, 2)),
            bias: Mat::zeros((1, 2)),
        };
        assert_eq!(project_modality(&feats, &zero).unwrap(), Mat::zeros((2, 2)));
        let ident = ModalityProjection {
            weight: Mat::eye(2),
            ..zero.clone()
        };
        assert_eq!(
            project_modality(&feats, &ident).unwrap(),
            array![[1.0, 2.0], [3.0, -1.0]]
        );
        let wrong = ModalityProjection {
            weight: Mat::zeros((3, 2)),
            ..zero
        };
        assert!(project_modality(&feats, &wrong).is_err());
    }
}
