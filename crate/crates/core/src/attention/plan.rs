//! Two-stage sampling plans: metric reference offsets around a Gaussian's
//! mean, then per-reference offsets in the lifted `(u, v, bin)` space, with
//! per-camera normalized attention weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussians::{SemanticGaussian, Vec3};

pub const DEFAULT_REFERENCE_POINTS: usize = 4;
pub const DEFAULT_SAMPLES_PER_REFERENCE: usize = 2;
pub const DEFAULT_SCALES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanShape {
    /// Reference points per Gaussian.
    pub n_ref: usize,
    /// Samples per projected reference point.
    pub n_samples: usize,
    pub n_scales: usize,
    pub n_cameras: usize,
}

impl PlanShape {
    /// Weights per camera: scales × references × samples.
    pub fn weights_per_camera(&self) -> usize {
        self.n_scales * self.n_ref * self.n_samples
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    shape: PlanShape,
    ref_offsets: Vec<Vec3>,
    /// `(Δu, Δv, Δbin)` per (reference, sample); pixels and bins.
    sample_offsets: Vec<[f64; 3]>,
    /// Indexed `[camera][scale][reference][sample]`.
    weights: Vec<f64>,
}

impl SamplingPlan {
    pub fn new(
        shape: PlanShape,
        ref_offsets: Vec<Vec3>,
        sample_offsets: Vec<[f64; 3]>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if shape.n_ref == 0 || shape.n_samples == 0 || shape.n_scales == 0 {
            return Err(Error::invalid(format!("degenerate plan shape {shape:?}")));
        }
        if ref_offsets.len() != shape.n_ref {
            return Err(Error::invalid(format!(
                "expected {} reference offsets, got {}",
                shape.n_ref,
                ref_offsets.len()
            )));
        }
        if sample_offsets.len() != shape.n_ref * shape.n_samples {
            return Err(Error::invalid(format!(
                "expected {} sample offsets, got {}",
                shape.n_ref * shape.n_samples,
                sample_offsets.len()
            )));
        }
        let per_cam = shape.weights_per_camera();
        if weights.len() != shape.n_cameras * per_cam {
            return Err(Error::invalid(format!(
                "expected {} attention weights, got {}",
                shape.n_cameras * per_cam,
                weights.len()
            )));
        }
        if ref_offsets.iter().any(|o| !o.iter().all(|v| v.is_finite()))
            || sample_offsets.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::invalid("non-finite sampling offset"));
        }
        for (c, w) in weights.chunks(per_cam.max(1)).enumerate() {
            let sum: f64 = w.iter().sum();
            if w.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("camera {c} weights are not normalized (sum {sum})")));
            }
        }
        Ok(SamplingPlan {
            shape,
            ref_offsets,
            sample_offsets,
            weights,
        })
    }

    /// Zero offsets and uniform weights.
    pub fn uniform(shape: PlanShape) -> Result<Self> {
        let per_cam = shape.weights_per_camera();
        SamplingPlan::new(
            shape,
            vec![Vec3::zeros(); shape.n_ref],
            vec![[0.0; 3]; shape.n_ref * shape.n_samples],
            vec![1.0 / per_cam as f64; shape.n_cameras * per_cam],
        )
    }

    pub fn shape(&self) -> PlanShape {
        self.shape
    }

    pub fn ref_offsets(&self) -> &[Vec3] {
        &self.ref_offsets
    }

    #[inline]
    pub fn sample_offset(&self, reference: usize, sample: usize) -> [f64; 3] {
        self.sample_offsets[reference * self.shape.n_samples + sample]
    }

    #[inline]
    pub fn weight(&self, camera: usize, scale: usize, reference: usize, sample: usize) -> f64 {
        let s = &self.shape;
        self.weights[((camera * s.n_scales + scale) * s.n_ref + reference) * s.n_samples + sample]
    }
}

/// Reference points `m + Δm_i`.
pub fn gen_reference_points(g: &SemanticGaussian, plan: &SamplingPlan) -> Vec<Vec3> {
    let m = g.mean();
    plan.ref_offsets.iter().map(|o| m + o).collect()
}

/// Linear heads mapping a query to offsets and attention logits.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryHeads {
    /// `(n_ref · 3) × m`, meters.
    pub reference: DMatrix<f64>,
    /// `(n_ref · n_samples · 3) × m`, pixels and bins.
    pub sample: DMatrix<f64>,
    /// `(n_scales · n_ref · n_samples) × m`, shared by all cameras.
    pub attention: DMatrix<f64>,
}

impl QueryHeads {
    pub fn zeros(shape: PlanShape, query_dim: usize) -> Self {
        QueryHeads {
            reference: DMatrix::zeros(shape.n_ref * 3, query_dim),
            sample: DMatrix::zeros(shape.n_ref * shape.n_samples * 3, query_dim),
            attention: DMatrix::zeros(shape.weights_per_camera(), query_dim),
        }
    }
}

/// Softmax of `logits` in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Builds a plan from a query: offsets from linear heads, attention weights
/// from a linear head followed by a softmax over scales × references × samples.
pub fn plan_from_query(q: &DVector<f64>, heads: &QueryHeads, shape: PlanShape) -> Result<SamplingPlan> {
    let m = q.len();
    if heads.reference.shape() != (shape.n_ref * 3, m)
        || heads.sample.shape() != (shape.n_ref * shape.n_samples * 3, m)
        || heads.attention.shape() != (shape.weights_per_camera(), m)
    {
        return Err(Error::invalid(format!(
            "query heads do not match plan shape {shape:?} and query dimension {m}"
        )));
    }
    let r = &heads.reference * q;
    let s = &heads.sample * q;
    let mut logits: Vec<f64> = (&heads.attention * q).iter().copied().collect();
    softmax_in_place(&mut logits);
    let ref_offsets = r.as_slice().chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    let sample_offsets = s.as_slice().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let weights = (0..shape.n_cameras).flat_map(|_| logits.iter().copied()).collect();
    SamplingPlan::new(shape, ref_offsets, sample_offsets, weights)
}
