//! Voxel-to-Gaussian initialization.
//!
//! Seeded Gaussians take their mean from a non-empty LiDAR voxel's mean point
//! position and their opacity from its mean (normalized) intensity. Rotation,
//! scale and logits always come from the configured defaults.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussians::{Quat, SemanticGaussian, Vec3, DEFAULT_SCALE_FLOOR};
use crate::lidar::VoxelFeatureSet;

pub const DEFAULT_GAUSSIAN_COUNT: usize = 25_600;

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub n_gaussians: usize,
    pub default_scale: Vec3,
    pub default_rotation: Quat,
    pub default_logits: Vec<f64>,
    /// Opacity of Gaussians that no voxel seeds.
    pub default_opacity: f64,
    /// Box `(min, max)` that unseeded means are drawn from.
    pub extent: (Vec3, Vec3),
    pub rng_seed: u64,
    /// Permit an all-default result when there are no voxels.
    pub allow_default_fallback: bool,
}

impl InitConfig {
    /// Defaults: scale of one LiDAR voxel, identity rotation, zero logits.
    pub fn new(n_gaussians: usize, voxel_size: Vec3, num_classes: usize, extent: (Vec3, Vec3), rng_seed: u64) -> Self {
        InitConfig {
            n_gaussians,
            default_scale: voxel_size,
            default_rotation: Quat::IDENTITY,
            default_logits: vec![0.0; num_classes],
            default_opacity: 0.5,
            extent,
            rng_seed,
            allow_default_fallback: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_gaussians == 0 {
            return Err(Error::invalid("number of Gaussians must be at least 1"));
        }
        if self.default_scale.iter().any(|s| !(*s >= DEFAULT_SCALE_FLOOR)) {
            return Err(Error::invalid(format!(
                "default scale {:?} below floor {DEFAULT_SCALE_FLOOR}",
                self.default_scale
            )));
        }
        if self.default_logits.is_empty() {
            return Err(Error::invalid("default logits must be non-empty"));
        }
        let (lo, hi) = self.extent;
        if (0..3).any(|a| !(lo[a] <= hi[a])) {
            return Err(Error::invalid("initialization extent min exceeds max"));
        }
        Ok(())
    }
}

/// First `k` entries of a seeded Fisher–Yates shuffle of `0..n`.
pub fn partial_shuffle(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

pub fn init_gaussians(voxels: &VoxelFeatureSet, cfg: &InitConfig) -> Result<Vec<SemanticGaussian>> {
    cfg.validate()?;
    let n_g = cfg.n_gaussians;
    let n_v = voxels.len();
    if n_v == 0 && !cfg.allow_default_fallback {
        return Err(Error::invalid("no non-empty voxels and default fallback is disabled"));
    }
    let entries: Vec<_> = voxels.entries().values().collect();
    if let Some(e) = entries.iter().find(|e| !(0.0..=1.0).contains(&e.intensity)) {
        return Err(Error::invalid(format!(
            "voxel intensity {} is not normalized to [0, 1]",
            e.intensity
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let seeded = |mean: Vec3, opacity: f64| {
        SemanticGaussian::new(
            mean,
            cfg.default_rotation,
            cfg.default_scale,
            opacity,
            cfg.default_logits.clone(),
        )
    };

    if n_v >= n_g {
        let chosen = partial_shuffle(&mut rng, n_v, n_g);
        return chosen.iter().map(|&v| seeded(entries[v].mean, entries[v].intensity)).collect();
    }

    // Fewer voxels than Gaussians: pick which Gaussian slots get a voxel.
    let slots = partial_shuffle(&mut rng, n_g, n_v);
    let mut source: Vec<Option<usize>> = vec![None; n_g];
    for (v, &slot) in slots.iter().enumerate() {
        source[slot] = Some(v);
    }
    let (lo, hi) = cfg.extent;
    source
        .iter()
        .map(|src| match src {
            Some(v) => seeded(entries[*v].mean, entries[*v].intensity),
            None => {
                let mean = Vec3::from_fn(|a, _| if lo[a] < hi[a] { rng.gen_range(lo[a]..hi[a]) } else { lo[a] });
                seeded(mean, cfg.default_opacity)
            }
        })
        .collect()
}
