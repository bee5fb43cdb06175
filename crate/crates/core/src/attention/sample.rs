//! Depth-weighted bilinear sampling of the lifted feature volume.
//!
//! Trilinear interpolation of `V[y, x, k, :] = fd[y, x, k] · fc[y, x, :]`
//! factors into a bilinear interpolation over pixels in which each pixel's
//! feature is weighted by its depth distribution linearly interpolated at the
//! continuous bin coordinate. Integer `(u, v)` are pixel centers; samples
//! falling outside the image or the bin range read zeros.

use crate::error::{Error, Result};
use crate::gaussians::Vec3;
use crate::lidar::CameraModel;

use super::features::{DepthDistributionMap, FeatureMap};

pub const DEFAULT_Z_NEAR: f64 = 0.1;

/// A point in the lifted space: image coordinates and metric depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole projection at pyramid level `scale`; `None` when the point is
/// closer than `z_near` in camera depth or lands outside the image.
pub fn project_reference(m: &Vec3, cam: &CameraModel, scale: u32, z_near: f64) -> Option<ProjectedPoint> {
    let (u, v, z) = cam.project_raw(m, scale);
    if !(z > z_near) {
        return None;
    }
    cam.intrinsics.at_scale(scale).pixel_of(u, v)?;
    Some(ProjectedPoint { u, v, depth: z })
}

fn check_maps(fc: &FeatureMap, fd: &DepthDistributionMap) -> Result<()> {
    if fc.width() != fd.width() || fc.height() != fd.height() {
        return Err(Error::invalid(format!(
            "feature map {}x{} and depth distribution {}x{} differ in size",
            fc.width(),
            fc.height(),
            fd.width(),
            fd.height()
        )));
    }
    Ok(())
}

/// Linear interpolation of one pixel's depth distribution at bin coordinate `t`.
#[inline]
fn depth_weight(px: &[f64], t0: i64, ft: f64) -> (f64, f64) {
    let get = |k: i64| if k >= 0 && (k as usize) < px.len() { px[k as usize] } else { 0.0 };
    let (a, b) = (get(t0), get(t0 + 1));
    ((1.0 - ft) * a + ft * b, b - a)
}

struct Corner {
    x: usize,
    y: usize,
    wu: f64,
    wv: f64,
    dwu: f64,
    dwv: f64,
}

/// In-bounds bilinear corners around `(u, v)` with their weights and the
/// weights' derivatives along u and v.
#[inline]
fn corners(width: usize, height: usize, u: f64, v: f64) -> impl Iterator<Item = Corner> {
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let (u0, v0) = (u0 as i64, v0 as i64);
    [(0i64, 0i64), (1, 0), (0, 1), (1, 1)].into_iter().filter_map(move |(du, dv)| {
        let (x, y) = (u0 + du, v0 + dv);
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            return None;
        }
        let (wu, dwu) = if du == 0 { (1.0 - fu, -1.0) } else { (fu, 1.0) };
        let (wv, dwv) = if dv == 0 { (1.0 - fv, -1.0) } else { (fv, 1.0) };
        Some(Corner {
            x: x as usize,
            y: y as usize,
            wu,
            wv,
            dwu,
            dwv,
        })
    })
}

/// Adds `scale · sample(u, v, t)` into `out`, where `t` is a continuous bin
/// coordinate. Allocation-free; `out.len()` must equal the channel count.
#[inline]
pub fn accumulate_sample(fc: &FeatureMap, fd: &DepthDistributionMap, u: f64, v: f64, t: f64, scale: f64, out: &mut [f64]) {
    let t0 = t.floor();
    let ft = t - t0;
    let t0 = t0 as i64;
    for c in corners(fc.width(), fc.height(), u, v) {
        let (dw, _) = depth_weight(fd.pixel(c.x, c.y), t0, ft);
        let w = scale * c.wu * c.wv * dw;
        if w != 0.0 {
            for (o, f) in out.iter_mut().zip(fc.pixel(c.x, c.y)) {
                *o += w * f;
            }
        }
    }
}

fn check_coords(u: f64, v: f64, d: f64) -> Result<()> {
    if !(u.is_finite() && v.is_finite() && d.is_finite()) {
        return Err(Error::invalid(format!("non-finite sampling coordinate ({u}, {v}, {d})")));
    }
    Ok(())
}

/// Samples the lifted volume at `(u, v)` pixels and `depth` meters.
pub fn sample_3d(fc: &FeatureMap, fd: &DepthDistributionMap, at: ProjectedPoint) -> Result<Vec<f64>> {
    check_maps(fc, fd)?;
    check_coords(at.u, at.v, at.depth)?;
    let mut out = vec![0.0; fc.channels()];
    accumulate_sample(fc, fd, at.u, at.v, fd.bins().coordinate(at.depth), 1.0, &mut out);
    Ok(out)
}

/// Value of [`sample_3d`] and its Jacobian with respect to the sampling coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub value: Vec<f64>,
    pub d_u: Vec<f64>,
    pub d_v: Vec<f64>,
    /// Per meter of depth.
    pub d_depth: Vec<f64>,
}

/// Derivatives are taken inside the cell selected by `floor`, so at cell
/// boundaries they are the one-sided derivatives from the containing cell.
pub fn sample_3d_grad(fc: &FeatureMap, fd: &DepthDistributionMap, at: ProjectedPoint) -> Result<SampleGrad> {
    check_maps(fc, fd)?;
    check_coords(at.u, at.v, at.depth)?;
    let n = fc.channels();
    let mut g = SampleGrad {
        value: vec![0.0; n],
        d_u: vec![0.0; n],
        d_v: vec![0.0; n],
        d_depth: vec![0.0; n],
    };
    let t = fd.bins().coordinate(at.depth);
    let t0 = t.floor();
    let ft = t - t0;
    let dt_dd = 1.0 / fd.bins().width();
    for c in corners(fc.width(), fc.height(), at.u, at.v) {
        let (dw, ddw) = depth_weight(fd.pixel(c.x, c.y), t0 as i64, ft);
        let f = fc.pixel(c.x, c.y);
        let (w, wu, wv, wd) = (
            c.wu * c.wv * dw,
            c.dwu * c.wv * dw,
            c.wu * c.dwv * dw,
            c.wu * c.wv * ddw * dt_dd,
        );
        for k in 0..n {
            g.value[k] += w * f[k];
            g.d_u[k] += wu * f[k];
            g.d_v[k] += wv * f[k];
            g.d_depth[k] += wd * f[k];
        }
    }
    Ok(g)
}
