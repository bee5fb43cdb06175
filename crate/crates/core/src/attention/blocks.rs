//! Refinement blocks: sparse self-encoding, lifted-feature attention and
//! MLP property refinement, plus the `GW3D` weights file.
//!
//! `GW3D` layout (little-endian):
//!
//! ```text
//! magic "GW3D"
//! u32 version (= 1)
//! u32 blocks, query_dim, channels, hidden, num_classes, n_ref, n_samples, n_scales
//! f32 cell_size
//! per block, f32 row-major:
//!   27 sparse-conv kernels            query_dim × query_dim each, offset (dx,dy,dz) at (dx+1)·9+(dy+1)·3+(dz+1)
//!   reference-offset head             (n_ref·3) × query_dim
//!   sample-offset head                (n_ref·n_samples·3) × query_dim
//!   attention head                    (n_scales·n_ref·n_samples) × query_dim
//!   value projection                  query_dim × channels
//!   MLP w1, b1                        hidden × query_dim, hidden
//!   MLP w2, b2                        (11+num_classes) × hidden, 11+num_classes
//! ```

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio;
use crate::error::{Error, Result};
use crate::gaussians::{SemanticGaussian, GEOMETRY_PROPERTY_COUNT};
use crate::lidar::CameraModel;

use super::aggregate::aggregate_query_update;
use super::encode::{sparse_self_encode, SparseConv, KERNEL_OFFSETS};
use super::features::CameraPyramid;
use super::plan::{plan_from_query, PlanShape, QueryHeads};
use super::refine::{refine, Mlp};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockDims {
    pub query_dim: usize,
    pub channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub n_ref: usize,
    pub n_samples: usize,
    pub n_scales: usize,
    pub cell_size: f64,
}

impl BlockDims {
    pub fn property_dim(&self) -> usize {
        GEOMETRY_PROPERTY_COUNT + self.num_classes
    }

    fn plan_shape(&self, n_cameras: usize) -> PlanShape {
        PlanShape {
            n_ref: self.n_ref,
            n_samples: self.n_samples,
            n_scales: self.n_scales,
            n_cameras,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub conv: SparseConv,
    pub heads: QueryHeads,
    /// `query_dim × channels`.
    pub value_proj: DMatrix<f64>,
    pub mlp: Mlp,
}

impl BlockWeights {
    pub fn zeros(d: &BlockDims) -> Self {
        BlockWeights {
            conv: SparseConv::zeros(d.query_dim, d.cell_size),
            heads: QueryHeads::zeros(d.plan_shape(1), d.query_dim),
            value_proj: DMatrix::zeros(d.query_dim, d.channels),
            mlp: Mlp::zeros(d.query_dim, d.hidden, d.property_dim()),
        }
    }

    /// Uniform `±gain/√fan_in` entries drawn in file order; biases start at zero.
    pub fn random(d: &BlockDims, rng: &mut ChaCha8Rng, gain: f64) -> Self {
        let mut w = BlockWeights::zeros(d);
        for_each_matrix_mut(&mut w, |m, is_bias| {
            if is_bias {
                return;
            }
            let a = gain / (m.ncols() as f64).sqrt();
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    m[(r, c)] = rng.gen_range(-a..a);
                }
            }
        });
        w
    }

    fn dims_match(&self, d: &BlockDims) -> bool {
        let mut shapes = Vec::new();
        for_each_matrix(self, |m, _| shapes.push(m.shape()));
        let mut expected = Vec::new();
        for_each_matrix(&BlockWeights::zeros(d), |m, _| expected.push(m.shape()));
        self.conv.kernels.len() == KERNEL_OFFSETS && shapes == expected
    }
}

/// Visits every weight tensor in file order; vectors are passed as `n × 1` matrices
/// with `is_bias = true`.
fn for_each_matrix_mut(w: &mut BlockWeights, mut f: impl FnMut(&mut DMatrix<f64>, bool)) {
    for k in w.conv.kernels.iter_mut() {
        f(k, false);
    }
    f(&mut w.heads.reference, false);
    f(&mut w.heads.sample, false);
    f(&mut w.heads.attention, false);
    f(&mut w.value_proj, false);
    f(&mut w.mlp.w1, false);
    with_vector_as_matrix(&mut w.mlp.b1, |m| f(m, true));
    f(&mut w.mlp.w2, false);
    with_vector_as_matrix(&mut w.mlp.b2, |m| f(m, true));
}

fn for_each_matrix(w: &BlockWeights, mut f: impl FnMut(&DMatrix<f64>, bool)) {
    for k in &w.conv.kernels {
        f(k, false);
    }
    f(&w.heads.reference, false);
    f(&w.heads.sample, false);
    f(&w.heads.attention, false);
    f(&w.value_proj, false);
    f(&w.mlp.w1, false);
    f(&DMatrix::from_column_slice(w.mlp.b1.len(), 1, w.mlp.b1.as_slice()), true);
    f(&w.mlp.w2, false);
    f(&DMatrix::from_column_slice(w.mlp.b2.len(), 1, w.mlp.b2.as_slice()), true);
}

fn with_vector_as_matrix(v: &mut DVector<f64>, f: impl FnOnce(&mut DMatrix<f64>)) {
    let mut m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    f(&mut m);
    v.copy_from_slice(m.as_slice());
}

/// Weights for a stack of blocks sharing one set of dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStack {
    pub dims: BlockDims,
    pub blocks: Vec<BlockWeights>,
}

impl BlockStack {
    pub fn zeros(dims: BlockDims, n_blocks: usize) -> Self {
        BlockStack {
            dims,
            blocks: vec![BlockWeights::zeros(&dims); n_blocks],
        }
    }

    pub fn random(dims: BlockDims, n_blocks: usize, seed: u64, gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BlockStack {
            dims,
            blocks: (0..n_blocks).map(|_| BlockWeights::random(&dims, &mut rng, gain)).collect(),
        }
    }

    /// The weights for `b` blocks: the stored stack if it has exactly `b`
    /// blocks, or a single stored block repeated `b` times.
    pub fn for_block_count(&self, b: usize) -> Result<Vec<BlockWeights>> {
        if b == 0 {
            return Err(Error::invalid("block count must be at least 1"));
        }
        match self.blocks.len() {
            n if n == b => Ok(self.blocks.clone()),
            1 => Ok(vec![self.blocks[0].clone(); b]),
            n => Err(Error::invalid(format!("weights file holds {n} blocks, config asks for {b}"))),
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let d = &self.dims;
        binio::write_magic(w, b"GW3D")?;
        binio::write_u32(w, 1)?;
        for v in [
            self.blocks.len(),
            d.query_dim,
            d.channels,
            d.hidden,
            d.num_classes,
            d.n_ref,
            d.n_samples,
            d.n_scales,
        ] {
            binio::write_u32(w, binio::to_u32(v, "weights header field")?)?;
        }
        binio::write_f32(w, d.cell_size as f32)?;
        for b in &self.blocks {
            if !b.dims_match(d) {
                return Err(Error::invalid("block weights do not match the declared dimensions"));
            }
            let mut err = Ok(());
            for_each_matrix(b, |m, _| {
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        if err.is_ok() {
                            err = binio::write_f32(w, m[(r, c)] as f32);
                        }
                    }
                }
            });
            err?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, b"GW3D", "GW3D")?;
        let version = binio::read_u32(r)?;
        if version != 1 {
            return Err(Error::format("GW3D", format!("unsupported version {version}")));
        }
        let mut h = [0usize; 8];
        for v in h.iter_mut() {
            *v = binio::read_u32(r)? as usize;
        }
        let cell_size = binio::read_f32(r)? as f64;
        let dims = BlockDims {
            query_dim: h[1],
            channels: h[2],
            hidden: h[3],
            num_classes: h[4],
            n_ref: h[5],
            n_samples: h[6],
            n_scales: h[7],
            cell_size,
        };
        if dims.query_dim == 0 || dims.channels == 0 || dims.hidden == 0 || dims.num_classes == 0 {
            return Err(Error::format("GW3D", "zero-sized dimension in header"));
        }
        let mut blocks = Vec::with_capacity(h[0].min(64));
        for _ in 0..h[0] {
            let mut b = BlockWeights::zeros(&dims);
            let mut err = Ok(());
            for_each_matrix_mut(&mut b, |m, _| {
                for row in 0..m.nrows() {
                    for col in 0..m.ncols() {
                        if err.is_ok() {
                            match binio::read_f32(r) {
                                Ok(v) => m[(row, col)] = v as f64,
                                Err(e) => err = Err(e),
                            }
                        }
                    }
                }
            });
            err.map_err(|e| Error::format("GW3D", format!("truncated weights: {e}")))?;
            blocks.push(b);
        }
        Ok(BlockStack { dims, blocks })
    }
}

/// Seeded initial queries with entries uniform in `[-1, 1)`.
pub fn init_queries(n: usize, query_dim: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| DVector::from_fn(query_dim, |_, _| rng.gen_range(-1.0..1.0)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub gaussians: Vec<SemanticGaussian>,
    pub queries: Vec<DVector<f64>>,
}

/// One block: encode queries, add the attention update, refine properties.
pub fn run_block(
    gaussians: &[SemanticGaussian],
    queries: &[DVector<f64>],
    cameras: &[CameraModel],
    pyramids: &[CameraPyramid],
    weights: &BlockWeights,
    dims: &BlockDims,
    z_near: f64,
) -> Result<BlockOutput> {
    let encoded = sparse_self_encode(gaussians, queries, &weights.conv)?;
    let shape = dims.plan_shape(cameras.len());
    let results: Result<Vec<(SemanticGaussian, DVector<f64>)>> = gaussians
        .par_iter()
        .zip(encoded.par_iter())
        .map(|(g, q)| {
            let plan = plan_from_query(q, &weights.heads, shape)?;
            let dq = aggregate_query_update(g, &plan, cameras, pyramids, &weights.value_proj, z_near)?;
            let q = q + dq;
            let g = refine(g, &q, &weights.mlp)?;
            Ok((g, q))
        })
        .collect();
    let (gaussians, queries) = results?.into_iter().unzip();
    Ok(BlockOutput { gaussians, queries })
}

/// Applies the blocks in order. Forward only.
pub fn run_blocks(
    gaussians: &[SemanticGaussian],
    queries: &[DVector<f64>],
    cameras: &[CameraModel],
    pyramids: &[CameraPyramid],
    blocks: &[BlockWeights],
    dims: &BlockDims,
    z_near: f64,
) -> Result<BlockOutput> {
    if blocks.is_empty() {
        return Err(Error::invalid("at least one refinement block is required"));
    }
    if let Some(g) = gaussians.iter().find(|g| g.num_classes() != dims.num_classes) {
        return Err(Error::invalid(format!(
            "Gaussian has {} classes, weights expect {}",
            g.num_classes(),
            dims.num_classes
        )));
    }
    let mut out = BlockOutput {
        gaussians: gaussians.to_vec(),
        queries: queries.to_vec(),
    };
    for w in blocks {
        out = run_block(&out.gaussians, &out.queries, cameras, pyramids, w, dims, z_near)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> BlockDims {
        BlockDims {
            query_dim: 4,
            channels: 3,
            hidden: 5,
            num_classes: 3,
            n_ref: 2,
            n_samples: 2,
            n_scales: 2,
            cell_size: 1.0,
        }
    }

    #[test]
    fn weights_file_round_trip() {
        let stack = BlockStack::random(dims(), 2, 3, 1.0);
        let mut buf = Vec::new();
        stack.write(&mut buf).unwrap();
        let back = BlockStack::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.dims, stack.dims);
        assert_eq!(back.blocks.len(), 2);
        for (a, b) in stack.blocks.iter().zip(&back.blocks) {
            let (mut va, mut vb) = (Vec::new(), Vec::new());
            for_each_matrix(a, |m, _| va.extend(m.iter().copied()));
            for_each_matrix(b, |m, _| vb.extend(m.iter().copied()));
            assert_eq!(va.len(), vb.len());
            for (x, y) in va.iter().zip(&vb) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn weights_file_size_follows_layout() {
        let d = dims();
        let stack = BlockStack::zeros(d, 1);
        let mut buf = Vec::new();
        stack.write(&mut buf).unwrap();
        let m = d.query_dim;
        let floats = 27 * m * m
            + d.n_ref * 3 * m
            + d.n_ref * d.n_samples * 3 * m
            + d.n_scales * d.n_ref * d.n_samples * m
            + m * d.channels
            + d.hidden * m
            + d.hidden
            + d.property_dim() * d.hidden
            + d.property_dim();
        assert_eq!(buf.len(), 4 + 4 + 8 * 4 + 4 + floats * 4);
    }

    #[test]
    fn row_major_order_on_disk() {
        let d = dims();
        let mut stack = BlockStack::zeros(d, 1);
        stack.blocks[0].conv.kernels[0][(0, 1)] = 7.0;
        let mut buf = Vec::new();
        stack.write(&mut buf).unwrap();
        let first = 4 + 4 + 32 + 4;
        let v = f32::from_le_bytes(buf[first + 4..first + 8].try_into().unwrap());
        assert_eq!(v, 7.0);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let mut buf = Vec::new();
        BlockStack::zeros(dims(), 1).write(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(BlockStack::read(&mut buf.as_slice()), Err(Error::Format { .. })));
    }

    #[test]
    fn block_count_resolution() {
        let one = BlockStack::zeros(dims(), 1);
        assert_eq!(one.for_block_count(3).unwrap().len(), 3);
        let two = BlockStack::zeros(dims(), 2);
        assert!(two.for_block_count(3).is_err());
        assert!(two.for_block_count(0).is_err());
    }

    #[test]
    fn queries_are_seeded() {
        assert_eq!(init_queries(3, 4, 9), init_queries(3, 4, 9));
        assert_ne!(init_queries(3, 4, 9), init_queries(3, 4, 10));
    }
}
