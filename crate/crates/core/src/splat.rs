//! Gaussian-to-voxel splatting.
//!
//! Each voxel center `x` receives `Σ_{i ∈ N(x)} g_i(x)` where `N(x)` holds the
//! Gaussians whose mean lies within `ρ_i = κ · max(s_i)` of `x`, summed in
//! ascending Gaussian index. A constant background is then added to the
//! empty-class channel. With `κ = ∞` every Gaussian is a neighbor.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussians::{rot_grad_to_quat, Mat3, PreparedGaussian, SemanticGaussian, Vec3};
use crate::grid::OccupancyGrid;
use crate::lidar::GridSpec;

pub const DEFAULT_KAPPA: f64 = 3.0;
pub const DEFAULT_BACKGROUND: f64 = 1.0;

/// Gaussians spanning more cells than this are kept in a shared list that
/// every query scans.
const MAX_CELLS_PER_GAUSSIAN: usize = 4096;

/// Constant contribution standing in for the fixed empty-space Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Background {
    pub empty_index: usize,
    pub value: f64,
}

impl Background {
    pub fn new(empty_index: usize, value: f64) -> Self {
        Background { empty_index, value }
    }
}

#[inline]
fn in_support(x: &Vec3, mean: &Vec3, radius: f64) -> bool {
    (x - mean).norm_squared() <= radius * radius
}

/// Uniform hash grid over Gaussian means with per-Gaussian influence radii.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    cell_size: f64,
    kappa: f64,
    means: Vec<Vec3>,
    radii: Vec<f64>,
    cells: HashMap<[i64; 3], Vec<u32>>,
    /// Gaussians too large to register per cell, ascending.
    shared: Vec<u32>,
}

pub fn build_index(gaussians: &[SemanticGaussian], cell_size: f64, kappa: f64) -> Result<SpatialIndex> {
    if !(kappa > 0.0) {
        return Err(Error::invalid(format!("cutoff κ must be positive, got {kappa}")));
    }
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(Error::invalid(format!("cell size must be positive, got {cell_size}")));
    }
    if gaussians.len() > u32::MAX as usize {
        return Err(Error::invalid("too many Gaussians for the index"));
    }
    let means: Vec<Vec3> = gaussians.iter().map(|g| g.mean()).collect();
    let radii: Vec<f64> = gaussians.iter().map(|g| kappa * g.max_scale()).collect();
    let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
    let mut shared = Vec::new();
    for (i, (m, r)) in means.iter().zip(&radii).enumerate() {
        if !r.is_finite() {
            shared.push(i as u32);
            continue;
        }
        // One extra cell of slack on each side keeps the cover conservative
        // under rounding.
        let lo: Vec<i64> = (0..3).map(|a| ((m[a] - r) / cell_size).floor() as i64 - 1).collect();
        let hi: Vec<i64> = (0..3).map(|a| ((m[a] + r) / cell_size).floor() as i64 + 1).collect();
        let span: u128 = (0..3).map(|a| (hi[a] - lo[a] + 1) as u128).product();
        if span > MAX_CELLS_PER_GAUSSIAN as u128 {
            shared.push(i as u32);
            continue;
        }
        for cx in lo[0]..=hi[0] {
            for cy in lo[1]..=hi[1] {
                for cz in lo[2]..=hi[2] {
                    cells.entry([cx, cy, cz]).or_default().push(i as u32);
                }
            }
        }
    }
    Ok(SpatialIndex {
        cell_size,
        kappa,
        means,
        radii,
        cells,
        shared,
    })
}

impl SpatialIndex {
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn radius(&self, i: usize) -> f64 {
        self.radii[i]
    }

    fn cell_of(&self, x: &Vec3) -> [i64; 3] {
        [
            (x.x / self.cell_size).floor() as i64,
            (x.y / self.cell_size).floor() as i64,
            (x.z / self.cell_size).floor() as i64,
        ]
    }

    /// Calls `f` for every Gaussian whose support contains `x`, in ascending index.
    #[inline]
    pub fn for_each_neighbor(&self, x: &Vec3, mut f: impl FnMut(usize)) {
        let cell: &[u32] = self.cells.get(&self.cell_of(x)).map_or(&[], |v| v.as_slice());
        let shared = self.shared.as_slice();
        let (mut a, mut b) = (0, 0);
        while a < cell.len() || b < shared.len() {
            let take_cell = b >= shared.len() || (a < cell.len() && cell[a] < shared[b]);
            let i = if take_cell {
                a += 1;
                cell[a - 1]
            } else {
                b += 1;
                shared[b - 1]
            } as usize;
            if in_support(x, &self.means[i], self.radii[i]) {
                f(i);
            }
        }
    }

    pub fn neighbors(&self, x: &Vec3) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_neighbor(x, |i| out.push(i));
        out
    }

    fn check_matches(&self, gaussians: &[SemanticGaussian]) -> Result<()> {
        if gaussians.len() != self.means.len()
            || gaussians.iter().zip(&self.means).any(|(g, m)| g.mean() != *m)
        {
            return Err(Error::invalid("spatial index was built from a different Gaussian set"));
        }
        Ok(())
    }
}

fn check_classes(gaussians: &[SemanticGaussian], num_classes: usize, background: &Background) -> Result<()> {
    if background.empty_index >= num_classes {
        return Err(Error::invalid(format!(
            "empty index {} out of range for {num_classes} classes",
            background.empty_index
        )));
    }
    if let Some(g) = gaussians.iter().find(|g| g.num_classes() != num_classes) {
        return Err(Error::invalid(format!(
            "Gaussian has {} classes, grid expects {num_classes}",
            g.num_classes()
        )));
    }
    Ok(())
}

/// Evaluates the Gaussian mixture at every voxel center of `spec`.
pub fn splat(
    gaussians: &[SemanticGaussian],
    spec: &GridSpec,
    num_classes: usize,
    index: &SpatialIndex,
    background: &Background,
) -> Result<OccupancyGrid> {
    index.check_matches(gaussians)?;
    check_classes(gaussians, num_classes, background)?;
    let prepared: Vec<PreparedGaussian<'_>> = gaussians.iter().map(|g| g.prepare()).collect();
    let mut values = vec![0.0f64; spec.num_voxels() * num_classes];
    values
        .par_chunks_mut(num_classes)
        .enumerate()
        .for_each(|(lin, out)| {
            let x = spec.center(spec.unlinear(lin));
            index.for_each_neighbor(&x, |i| {
                let p = &prepared[i];
                let w = p.weight(&x);
                for (o, c) in out.iter_mut().zip(p.logits) {
                    *o += w * c;
                }
            });
            out[background.empty_index] += background.value;
        });
    OccupancyGrid::from_logits(*spec, num_classes, values)
}

/// Gradient of a scalar loss with respect to one Gaussian's properties.
/// `rotation` is the ambient gradient of the stored quaternion.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vec3,
    pub rotation: [f64; 4],
    pub scale: Vec3,
    pub opacity: f64,
    pub logits: Vec<f64>,
}

impl GaussianGrad {
    pub fn zeros(num_classes: usize) -> Self {
        GaussianGrad {
            mean: Vec3::zeros(),
            rotation: [0.0; 4],
            scale: Vec3::zeros(),
            opacity: 0.0,
            logits: vec![0.0; num_classes],
        }
    }

    /// Flattened in property order `[m, r, s, σ, c]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(11 + self.logits.len());
        v.extend(self.mean.iter());
        v.extend(self.rotation);
        v.extend(self.scale.iter());
        v.push(self.opacity);
        v.extend(&self.logits);
        v
    }
}

/// Voxel index range along one axis that could contain centers within `r` of `m`.
fn voxel_range(spec: &GridSpec, axis: usize, m: f64, r: f64) -> (usize, usize) {
    let n = spec.counts()[axis];
    if !r.is_finite() {
        return (0, n - 1);
    }
    let o = spec.origin()[axis];
    let h = spec.voxel_size()[axis];
    let lo = ((m - r - o) / h - 0.5).floor() - 1.0;
    let hi = ((m + r - o) / h - 0.5).ceil() + 1.0;
    if hi < 0.0 || lo > (n - 1) as f64 {
        return (1, 0);
    }
    (lo.max(0.0) as usize, hi.min((n - 1) as f64) as usize)
}

/// Exact gradients of `<upstream, splat(...)>` with the neighborhood support
/// held fixed. `upstream` is laid out like the logit grid.
pub fn splat_backward(
    gaussians: &[SemanticGaussian],
    spec: &GridSpec,
    num_classes: usize,
    index: &SpatialIndex,
    upstream: &[f64],
) -> Result<Vec<GaussianGrad>> {
    index.check_matches(gaussians)?;
    if let Some(g) = gaussians.iter().find(|g| g.num_classes() != num_classes) {
        return Err(Error::invalid(format!(
            "Gaussian has {} classes, grid expects {num_classes}",
            g.num_classes()
        )));
    }
    if upstream.len() != spec.num_voxels() * num_classes {
        return Err(Error::invalid(format!(
            "upstream gradient has {} values, grid needs {}",
            upstream.len(),
            spec.num_voxels() * num_classes
        )));
    }
    if !upstream.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("upstream gradient is not finite"));
    }

    gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let p = g.prepare();
            let radius = index.radius(i);
            let s = g.scale();
            let c = g.logits();
            let mut grad = GaussianGrad::zeros(num_classes);
            let mut d_rot = Mat3::zeros();
            let (x0, x1) = voxel_range(spec, 0, p.mean.x, radius);
            let (y0, y1) = voxel_range(spec, 1, p.mean.y, radius);
            let (z0, z1) = voxel_range(spec, 2, p.mean.z, radius);
            for ix in x0..=x1 {
                for iy in y0..=y1 {
                    for iz in z0..=z1 {
                        let idx = [ix, iy, iz];
                        let x = spec.center(idx);
                        if !in_support(&x, &p.mean, radius) {
                            continue;
                        }
                        let lin = spec.linear(idx);
                        let up = &upstream[lin * num_classes..(lin + 1) * num_classes];
                        let delta = x - p.mean;
                        let y = p.rot.tr_mul(&delta);
                        let a = y.component_mul(&p.inv_scale);
                        let e = (-0.5 * a.norm_squared()).exp();
                        let w = p.opacity * e;
                        let u_dot_c: f64 = up.iter().zip(c).map(|(u, ci)| u * ci).sum();
                        for (gc, u) in grad.logits.iter_mut().zip(up) {
                            *gc += w * u;
                        }
                        grad.opacity += e * u_dot_c;
                        // dL/d(Mahalanobis²)
                        let d_m2 = -0.5 * w * u_dot_c;
                        let d_y = Vec3::from_fn(|k, _| d_m2 * 2.0 * a[k] * p.inv_scale[k]);
                        for k in 0..3 {
                            grad.scale[k] += d_m2 * (-2.0 * a[k] * a[k] / s[k]);
                        }
                        grad.mean -= p.rot * d_y;
                        d_rot += delta * d_y.transpose();
                    }
                }
            }
            grad.rotation = rot_grad_to_quat(g.rotation(), &d_rot)?;
            Ok(grad)
        })
        .collect()
}
