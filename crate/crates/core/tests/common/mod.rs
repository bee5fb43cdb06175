//! Independent oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use gsocc_core::attention::{
    project_reference, sample_3d, CameraPyramid, DepthBins, DepthDistributionMap, FeatureMap, ProjectedPoint,
    SamplingPlan,
};
use gsocc_core::gaussians::{gaussian_eval, Mat3, Quat, SemanticGaussian, Vec3};
use gsocc_core::grid::OccupancyGrid;
use gsocc_core::lidar::{CameraModel, GridSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
    loop {
        let q = Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if q.norm() > 0.2 {
            return q.normalized().unwrap();
        }
    }
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, lo: Vec3, hi: Vec3, scale: (f64, f64), nc: usize) -> SemanticGaussian {
    let mean = Vec3::from_fn(|a, _| rng.gen_range(lo[a]..hi[a]));
    let s = Vec3::from_fn(|_, _| rng.gen_range(scale.0..scale.1));
    let logits = (0..nc).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SemanticGaussian::new(mean, random_quat(rng), s, rng.gen_range(0.05..1.0), logits).unwrap()
}

/// Rotation from a unit quaternion written out term by term.
pub fn rot_oracle(q: Quat) -> Mat3 {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.x / n, q.y / n, q.z / n);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `σ · exp(-½ dᵀ Σ⁻¹ d) · c` with Σ built and inverted densely.
pub fn eval_oracle(g: &SemanticGaussian, x: &Vec3) -> Vec<f64> {
    let r = rot_oracle(g.rotation());
    let s = Mat3::from_diagonal(&g.scale());
    let cov = r * s * s * r.transpose();
    let inv = cov.try_inverse().unwrap();
    let d = x - g.mean();
    let w = g.opacity() * (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp();
    g.logits().iter().map(|c| w * c).collect()
}

/// Sum over every Gaussian in index order, then the background, at each voxel center.
pub fn brute_splat(gs: &[SemanticGaussian], spec: &GridSpec, nc: usize, empty: usize, bg: f64) -> Vec<f64> {
    let mut out = vec![0.0; spec.num_voxels() * nc];
    for lin in 0..spec.num_voxels() {
        let x = spec.center(spec.unlinear(lin));
        let acc = &mut out[lin * nc..(lin + 1) * nc];
        for g in gs {
            for (a, v) in acc.iter_mut().zip(gaussian_eval(g, &x)) {
                *a += v;
            }
        }
        acc[empty] += bg;
    }
    out
}

pub fn random_feature_map(rng: &mut ChaCha8Rng, w: usize, h: usize, m: usize) -> FeatureMap {
    FeatureMap::new(w, h, m, (0..w * h * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random per-pixel distributions: one-hot, uniform or dense random.
pub fn random_depth_map(rng: &mut ChaCha8Rng, w: usize, h: usize, bins: DepthBins) -> DepthDistributionMap {
    let d = bins.count();
    let mut data = Vec::with_capacity(w * h * d);
    for _ in 0..w * h {
        match rng.gen_range(0..3) {
            0 => {
                let k = rng.gen_range(0..d);
                data.extend((0..d).map(|i| if i == k { 1.0 } else { 0.0 }));
            }
            1 => data.extend(std::iter::repeat(1.0 / d as f64).take(d)),
            _ => {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = v.iter().sum();
                data.extend(v.iter().map(|x| x / s));
            }
        }
    }
    DepthDistributionMap::new(w, h, bins, data).unwrap()
}

/// The lifted volume `V[y][x][k][c] = fd[y,x,k] · fc[y,x,c]`, fully materialized.
pub struct Volume {
    pub w: usize,
    pub h: usize,
    pub d: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

pub fn materialize(fc: &FeatureMap, fd: &DepthDistributionMap) -> Volume {
    let (w, h, d, m) = (fc.width(), fc.height(), fd.bins().count(), fc.channels());
    let mut data = vec![0.0; w * h * d * m];
    for y in 0..h {
        for x in 0..w {
            for k in 0..d {
                for c in 0..m {
                    data[((y * w + x) * d + k) * m + c] = fd.pixel(x, y)[k] * fc.pixel(x, y)[c];
                }
            }
        }
    }
    Volume { w, h, d, m, data }
}

impl Volume {
    fn at(&self, x: i64, y: i64, k: i64, c: usize) -> f64 {
        if x < 0 || y < 0 || k < 0 || x >= self.w as i64 || y >= self.h as i64 || k >= self.d as i64 {
            return 0.0;
        }
        self.data[(((y as usize) * self.w + x as usize) * self.d + k as usize) * self.m + c]
    }

    /// Trilinear interpolation with zero padding; integer coordinates are cell centers.
    pub fn trilinear(&self, u: f64, v: f64, t: f64) -> Vec<f64> {
        let (x0, y0, k0) = (u.floor(), v.floor(), t.floor());
        let (fx, fy, fk) = (u - x0, v - y0, t - k0);
        let (x0, y0, k0) = (x0 as i64, y0 as i64, k0 as i64);
        let mut out = vec![0.0; self.m];
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (dk, wk) in [(0, 1.0 - fk), (1, fk)] {
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += wx * wy * wk * self.at(x0 + dx, y0 + dy, k0 + dk, c);
                    }
                }
            }
        }
        out
    }
}

/// Loop-nest query update: materializes every sample vector, then reduces.
pub fn aggregate_oracle(
    g: &SemanticGaussian,
    plan: &SamplingPlan,
    cameras: &[CameraModel],
    pyramids: &[CameraPyramid],
    value_proj: &DMatrix<f64>,
    z_near: f64,
) -> DVector<f64> {
    let shape = plan.shape();
    let mut samples: Vec<(f64, Vec<f64>)> = Vec::new();
    for (c, cam) in cameras.iter().enumerate() {
        for s in 0..shape.n_scales {
            let level = &pyramids[c][s];
            for i in 0..shape.n_ref {
                let r = g.mean() + plan.ref_offsets()[i];
                let Some(p) = project_reference(&r, cam, s as u32, z_near) else { continue };
                for j in 0..shape.n_samples {
                    let [du, dv, dt] = plan.sample_offset(i, j);
                    let depth = p.depth + dt * level.depth.bins().width();
                    let at = ProjectedPoint {
                        u: p.u + du,
                        v: p.v + dv,
                        depth,
                    };
                    samples.push((plan.weight(c, s, i, j), sample_3d(&level.features, &level.depth, at).unwrap()));
                }
            }
        }
    }
    let mut dq = DVector::zeros(value_proj.nrows());
    for (w, f) in samples {
        dq += value_proj * DVector::from_vec(f) * w;
    }
    dq / cameras.len() as f64
}

pub fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

/// Per-voxel max over classes of `|a - b|` and of `|b|`.
pub fn voxel_linf(a: &[f64], b: &[f64], nc: usize) -> Vec<(f64, f64)> {
    a.chunks(nc)
        .zip(b.chunks(nc))
        .map(|(x, y)| {
            let dev = x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            let val = y.iter().map(|q| q.abs()).fold(0.0, f64::max);
            (dev, val)
        })
        .collect()
}

pub fn grid_logits(g: &OccupancyGrid) -> Vec<f64> {
    g.logits().unwrap().to_vec()
}
