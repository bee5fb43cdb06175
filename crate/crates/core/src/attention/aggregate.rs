use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussians::SemanticGaussian;
use crate::lidar::CameraModel;

use super::features::CameraPyramid;
use super::plan::SamplingPlan;
use super::sample::{accumulate_sample, project_reference};

/// Query update from the lifted feature space:
///
/// `ΔQ = (1/N_c) Σ_cam Σ_scale Σ_i Σ_j w · V · sample(proj(m + Δm_i) + Δm̄_ij)`.
///
/// References that do not project into a camera contribute nothing; the
/// divisor stays at the total camera count. `value_proj` is `m × m_c`.
pub fn aggregate_query_update(
    g: &SemanticGaussian,
    plan: &SamplingPlan,
    cameras: &[CameraModel],
    pyramids: &[CameraPyramid],
    value_proj: &DMatrix<f64>,
    z_near: f64,
) -> Result<DVector<f64>> {
    let shape = plan.shape();
    if cameras.len() != shape.n_cameras || pyramids.len() != shape.n_cameras {
        return Err(Error::invalid(format!(
            "plan expects {} cameras, got {} cameras and {} pyramids",
            shape.n_cameras,
            cameras.len(),
            pyramids.len()
        )));
    }
    if cameras.is_empty() {
        return Err(Error::invalid("at least one camera is required"));
    }
    let channels = value_proj.ncols();
    for (c, p) in pyramids.iter().enumerate() {
        if p.len() != shape.n_scales {
            return Err(Error::invalid(format!(
                "camera {c} pyramid has {} levels, plan expects {}",
                p.len(),
                shape.n_scales
            )));
        }
        if let Some(l) = p.iter().find(|l| l.features.channels() != channels) {
            return Err(Error::invalid(format!(
                "camera {c} features have {} channels, value projection expects {channels}",
                l.features.channels()
            )));
        }
    }

    let mut acc = vec![0.0; channels];
    let m = g.mean();
    for (c, (cam, pyramid)) in cameras.iter().zip(pyramids).enumerate() {
        for (s, level) in pyramid.iter().enumerate() {
            for (i, off) in plan.ref_offsets().iter().enumerate() {
                let Some(p) = project_reference(&(m + off), cam, s as u32, z_near) else {
                    continue;
                };
                let t = level.depth.bins().coordinate(p.depth);
                for j in 0..shape.n_samples {
                    let [du, dv, dt] = plan.sample_offset(i, j);
                    let w = plan.weight(c, s, i, j);
                    accumulate_sample(&level.features, &level.depth, p.u + du, p.v + dv, t + dt, w, &mut acc);
                }
            }
        }
    }
    let acc = DVector::from_vec(acc);
    Ok(value_proj * acc / cameras.len() as f64)
}
