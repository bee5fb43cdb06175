//! Sparse 3D convolution over Gaussian queries hashed into cells by mean.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussians::SemanticGaussian;

/// Kernel over the 3×3×3 cell neighborhood. `kernels[o]` is the `m × m` map
/// for offset `o = (dx+1)·9 + (dy+1)·3 + (dz+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConv {
    pub cell_size: f64,
    pub kernels: Vec<DMatrix<f64>>,
}

pub const KERNEL_OFFSETS: usize = 27;

pub fn offset_index(dx: i64, dy: i64, dz: i64) -> usize {
    ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize
}

impl SparseConv {
    pub fn zeros(query_dim: usize, cell_size: f64) -> Self {
        SparseConv {
            cell_size,
            kernels: vec![DMatrix::zeros(query_dim, query_dim); KERNEL_OFFSETS],
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::invalid(format!("cell size must be positive, got {}", self.cell_size)));
        }
        if self.kernels.len() != KERNEL_OFFSETS || self.kernels.iter().any(|k| k.shape() != (m, m)) {
            return Err(Error::invalid(format!("sparse conv needs 27 kernels of shape {m}x{m}")));
        }
        Ok(())
    }
}

pub fn cell_key(g: &SemanticGaussian, cell_size: f64) -> [i64; 3] {
    let m = g.mean();
    [
        (m.x / cell_size).floor() as i64,
        (m.y / cell_size).floor() as i64,
        (m.z / cell_size).floor() as i64,
    ]
}

/// `q_i ← ReLU(Σ_o W_o · mean{q_j : cell(j) = cell(i) + o})` over occupied neighbor cells.
pub fn sparse_self_encode(
    gaussians: &[SemanticGaussian],
    queries: &[DVector<f64>],
    conv: &SparseConv,
) -> Result<Vec<DVector<f64>>> {
    if gaussians.len() != queries.len() {
        return Err(Error::invalid(format!(
            "{} Gaussians but {} queries",
            gaussians.len(),
            queries.len()
        )));
    }
    let Some(m) = queries.first().map(|q| q.len()) else {
        return Ok(Vec::new());
    };
    if queries.iter().any(|q| q.len() != m) {
        return Err(Error::invalid("queries have differing dimensions"));
    }
    conv.validate(m)?;

    let keys: Vec<[i64; 3]> = gaussians.iter().map(|g| cell_key(g, conv.cell_size)).collect();
    let mut members: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, k) in keys.iter().enumerate() {
        members.entry(*k).or_default().push(i);
    }
    let means: HashMap<[i64; 3], DVector<f64>> = members
        .iter()
        .map(|(k, idx)| {
            let mut s = DVector::zeros(m);
            for &i in idx {
                s += &queries[i];
            }
            (*k, s / idx.len() as f64)
        })
        .collect();

    Ok(keys
        .par_iter()
        .map(|k| {
            let mut out = DVector::zeros(m);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(mean) = means.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            out += &conv.kernels[offset_index(dx, dy, dz)] * mean;
                        }
                    }
                }
            }
            out.map(|v| v.max(0.0))
        })
        .collect())
}
