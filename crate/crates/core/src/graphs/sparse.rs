use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{LinearMap, Mat};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MGRA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphKind {
    ItemItem,
    /// Rows/cols `0..num_users` are users, the rest items.
    UserItemBipartite {
        num_users: usize,
    },
}

/// Weighted sparse adjacency in compressed-row form.
///
/// Rows are sorted by column; there are no duplicate `(row, col)` pairs and
/// every stored weight is finite and strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    n_rows: usize,
    n_cols: usize,
    kind: GraphKind,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl SparseGraph {
    pub fn empty(n_rows: usize, n_cols: usize, kind: GraphKind) -> Self {
        Self {
            n_rows,
            n_cols,
            kind,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Build from `(row, col, weight)` triples in any order.
    pub fn from_edges(
        n_rows: usize,
        n_cols: usize,
        kind: GraphKind,
        mut edges: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        edges.sort_by_key(|e| (e.0, e.1));
        let mut g = Self::empty(n_rows, n_cols, kind);
        g.indices.reserve(edges.len());
        g.weights.reserve(edges.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, w) in &edges {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Dimension(format!(
                    "edge ({r}, {c}) outside a {n_rows}×{n_cols} graph"
                )));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Precondition(format!(
                    "edge ({r}, {c}) has weight {w}"
                )));
            }
            if prev == Some((r, c)) {
                return Err(Error::Precondition(format!("duplicate edge ({r}, {c})")));
            }
            prev = Some((r, c));
            g.indptr[r + 1] += 1;
            g.indices.push(c as u32);
            g.weights.push(w);
        }
        for i in 0..n_rows {
            g.indptr[i + 1] += g.indptr[i];
        }
        if let GraphKind::UserItemBipartite { num_users } = kind {
            if n_rows != n_cols {
                return Err(Error::Dimension(
                    "bipartite adjacency must be square".into(),
                ));
            }
            if let Some((r, c, _)) = g
                .edges()
                .find(|&(r, c, _)| (r < num_users) == (c < num_users))
            {
                return Err(Error::Precondition(format!(
                    "edge ({r}, {c}) lies inside a diagonal block of the bipartite graph"
                )));
            }
        }
        Ok(g)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.weights[r])
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (cols, ws) = self.row(i);
            cols.iter().zip(ws).map(move |(&c, &w)| (i, c as usize, w))
        })
    }

    /// Number of stored entries per row (the unweighted degree).
    pub fn degrees(&self) -> Vec<usize> {
        self.indptr.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn weight(&self, r: usize, c: usize) -> Option<f64> {
        let (cols, ws) = self.row(r);
        cols.binary_search(&(c as u32)).ok().map(|k| ws[k])
    }

    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols && self.edges().all(|(r, c, w)| self.weight(c, r) == Some(w))
    }

    /// Same edges with every weight set to 1.
    pub fn unweighted(&self) -> Self {
        let mut g = self.clone();
        g.weights.iter_mut().for_each(|w| *w = 1.0);
        g
    }

    pub(crate) fn with_weights(&self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.nnz());
        Self {
            weights,
            ..self.clone()
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n_rows, self.n_cols));
        for (r, c, w) in self.edges() {
            m[[r, c]] = w;
        }
        m
    }

    /// `G · X`
    pub fn spmm(&self, x: &Mat) -> Mat {
        assert_eq!(
            x.nrows(),
            self.n_cols,
            "spmm: row count of X must equal graph columns"
        );
        let mut out = Mat::zeros((self.n_rows, x.ncols()));
        for (i, mut orow) in out.outer_iter_mut().enumerate() {
            let (cols, ws) = self.row(i);
            for (&c, &w) in cols.iter().zip(ws) {
                orow.scaled_add(w, &x.row(c as usize));
            }
        }
        out
    }

    /// `Gᵀ · X`
    pub fn spmm_transpose(&self, x: &Mat) -> Mat {
        assert_eq!(
            x.nrows(),
            self.n_rows,
            "spmm_transpose: row count of X must equal graph rows"
        );
        let mut out = Mat::zeros((self.n_cols, x.ncols()));
        for (i, xrow) in x.outer_iter().enumerate() {
            let (cols, ws) = self.row(i);
            for (&c, &w) in cols.iter().zip(ws) {
                out.row_mut(c as usize).scaled_add(w, &xrow);
            }
        }
        out
    }

    /// Largest |eigenvalue| estimate by power iteration (symmetric graphs).
    pub fn spectral_radius(&self, iterations: usize) -> f64 {
        let n = self.n_rows;
        if n == 0 || self.nnz() == 0 {
            return 0.0;
        }
        let mut v = Mat::from_shape_fn((n, 1), |(i, _)| 1.0 + (i % 7) as f64 * 0.1);
        let mut lambda = 0.0;
        for _ in 0..iterations {
            // Two steps per iteration so a ±λ pair does not oscillate.
            let w = self.spmm(&self.spmm(&v));
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = (norm / vnorm).sqrt();
            v = w / norm;
        }
        lambda
    }

    /// Binary triple list: `MGRA`, u32 rows, u32 cols, u64 nnz, then (u32, u32, f32).
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.n_rows as u32).to_le_bytes())?;
        w.write_all(&(self.n_cols as u32).to_le_bytes())?;
        w.write_all(&(self.nnz() as u64).to_le_bytes())?;
        for (r, c, wt) in self.edges() {
            w.write_all(&(r as u32).to_le_bytes())?;
            w.write_all(&(c as u32).to_le_bytes())?;
            w.write_all(&(wt as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path, kind: GraphKind) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0u8; 20];
        r.read_exact(&mut header)
            .map_err(|_| Error::format(path, "truncated header"))?;
        if &header[..4] != MAGIC {
            return Err(Error::format(path, "missing MGRA magic"));
        }
        let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let nnz = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
        let mut payload = vec![0u8; nnz * 12];
        r.read_exact(&mut payload)
            .map_err(|_| Error::format(path, format!("expected {nnz} edge triples")))?;
        let edges = payload
            .chunks_exact(12)
            .map(|t| {
                (
                    u32::from_le_bytes(t[0..4].try_into().unwrap()) as usize,
                    u32::from_le_bytes(t[4..8].try_into().unwrap()) as usize,
                    f64::from(f32::from_le_bytes(t[8..12].try_into().unwrap())),
                )
            })
            .collect();
        Self::from_edges(rows, cols, kind, edges)
    }
}

impl LinearMap for SparseGraph {
    fn apply(&self, x: &Mat) -> Mat {
        self.spmm(x)
    }

    fn apply_adjoint(&self, g: &Mat) -> Mat {
        self.spmm_transpose(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_duplicates_and_bad_weights() {
        let k = GraphKind::ItemItem;
        assert!(SparseGraph::from_edges(2, 2, k, vec![(0, 1, 1.0), (0, 1, 2.0)]).is_err());
        assert!(SparseGraph::from_edges(2, 2, k, vec![(0, 1, 0.0)]).is_err());
        assert!(SparseGraph::from_edges(2, 2, k, vec![(0, 1, f64::NAN)]).is_err());
        assert!(SparseGraph::from_edges(2, 2, k, vec![(0, 2, 1.0)]).is_err());
        let bip = GraphKind::UserItemBipartite { num_users: 1 };
        assert!(SparseGraph::from_edges(3, 3, bip, vec![(1, 2, 1.0)]).is_err());
    }

    #[test]
    fn spmm_matches_dense() {
        let g = SparseGraph::from_edges(
            3,
            3,
            GraphKind::ItemItem,
            vec![(0, 1, 0.5), (1, 0, 2.0), (2, 2, 1.5), (2, 0, 1.0)],
        )
        .unwrap();
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let dense = g.to_dense();
        assert_eq!(g.spmm(&x), dense.dot(&x));
        assert_eq!(g.spmm_transpose(&x), dense.t().dot(&x));
    }

    #[test]
    fn binary_round_trip() {
        let g = SparseGraph::from_edges(
            4,
            4,
            GraphKind::UserItemBipartite { num_users: 2 },
            vec![(0, 2, 0.5), (2, 0, 0.5), (1, 3, 0.25), (3, 1, 0.25)],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.mgra");
        g.write_binary(&p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 20 + 4 * 12);
        let back = SparseGraph::read_binary(&p, g.kind()).unwrap();
        assert_eq!(back, g);
    }
}
