//! Factored LiDAR-camera feature space.
//!
//! A camera contributes, per pyramid level, an image feature map `fc` of shape
//! `H × W × m_c` and a per-pixel depth distribution `fd` of shape `H × W × D`.
//! The lifted volume `fd ⊗ fc` is only ever sampled, never stored.

use std::io::{Read, Write};

use crate::binio;
use crate::error::{Error, Result};
use crate::lidar::SparseDepthMap;

pub const DEFAULT_DEPTH_BINS: usize = 64;
pub const DEFAULT_DEPTH_MAX: f64 = 51.2;

/// `count` equal-width depth bins spanning `(0, d_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBins {
    count: usize,
    d_max: f64,
}

impl DepthBins {
    pub fn new(count: usize, d_max: f64) -> Result<Self> {
        if count < 2 {
            return Err(Error::invalid(format!("need at least 2 depth bins, got {count}")));
        }
        if !(d_max > 0.0 && d_max.is_finite()) {
            return Err(Error::invalid(format!("d_max must be positive, got {d_max}")));
        }
        Ok(DepthBins { count, d_max })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn width(&self) -> f64 {
        self.d_max / self.count as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.count).map(|k| k as f64 * self.width()).collect()
    }

    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.width()
    }

    /// Bin holding depth `d`, or `None` outside `(0, d_max]`.
    pub fn bin_of(&self, d: f64) -> Option<usize> {
        if !(d > 0.0 && d <= self.d_max) {
            return None;
        }
        Some(((d / self.width()).floor() as usize).min(self.count - 1))
    }

    /// Continuous bin coordinate: bin `k`'s center maps to `k`.
    #[inline]
    pub fn coordinate(&self, d: f64) -> f64 {
        d / self.width() - 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistributionMap {
    width: usize,
    height: usize,
    bins: DepthBins,
    /// `height * width * D`, bins fastest.
    data: Vec<f64>,
}

impl DepthDistributionMap {
    pub fn new(width: usize, height: usize, bins: DepthBins, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * bins.count() {
            return Err(Error::invalid(format!(
                "depth distribution has {} values, expected {}",
                data.len(),
                width * height * bins.count()
            )));
        }
        for (i, px) in data.chunks_exact(bins.count()).enumerate() {
            let sum: f64 = px.iter().sum();
            if px.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("pixel {i} is not a probability vector (sum {sum})")));
            }
        }
        Ok(DepthDistributionMap {
            width,
            height,
            bins,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bins(&self) -> &DepthBins {
        &self.bins
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let d = self.bins.count();
        let o = (y * self.width + x) * d;
        &self.data[o..o + d]
    }

    pub fn memory_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    /// `height * width * channels`, channels fastest.
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid("feature map dimensions must be positive"));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "feature map has {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(FeatureMap {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// 2×2 average pooling; odd trailing rows/columns are dropped.
    pub fn downsample(&self) -> FeatureMap {
        let (w, h) = ((self.width / 2).max(1), (self.height / 2).max(1));
        let mut out = FeatureMap::zeros(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                let mut n = 0.0;
                let o = out.pixel_mut(x, y);
                for (sx, sy) in [(2 * x, 2 * y), (2 * x + 1, 2 * y), (2 * x, 2 * y + 1), (2 * x + 1, 2 * y + 1)] {
                    if sx < self.width && sy < self.height {
                        n += 1.0;
                        let start = (sy * self.width + sx) * self.channels;
                        for (a, b) in o.iter_mut().zip(&self.data[start..start + self.channels]) {
                            *a += b;
                        }
                    }
                }
                o.iter_mut().for_each(|v| *v /= n);
            }
        }
        out
    }

    pub fn scaled(&self, alpha: f64) -> FeatureMap {
        FeatureMap {
            data: self.data.iter().map(|v| v * alpha).collect(),
            ..self.clone()
        }
    }

    pub fn memory_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}

/// Writes a per-scale feature pyramid (`FPY1`): magic, u32 level count, u32
/// channels, then per level u32 width, u32 height and `height·width·channels`
/// f32 values, channels fastest.
pub fn write_feature_pyramid<W: Write>(w: &mut W, levels: &[FeatureMap]) -> Result<()> {
    let channels = levels.first().map_or(0, |l| l.channels);
    if levels.iter().any(|l| l.channels != channels) {
        return Err(Error::invalid("pyramid levels differ in channel count"));
    }
    binio::write_magic(w, b"FPY1")?;
    binio::write_u32(w, binio::to_u32(levels.len(), "level count")?)?;
    binio::write_u32(w, binio::to_u32(channels, "channel count")?)?;
    for l in levels {
        binio::write_u32(w, binio::to_u32(l.width, "width")?)?;
        binio::write_u32(w, binio::to_u32(l.height, "height")?)?;
        for v in &l.data {
            binio::write_f32(w, *v as f32)?;
        }
    }
    Ok(())
}

pub fn read_feature_pyramid<R: Read>(r: &mut R) -> Result<Vec<FeatureMap>> {
    binio::expect_magic(r, b"FPY1", "FPY1")?;
    let n = binio::read_u32(r)? as usize;
    let channels = binio::read_u32(r)? as usize;
    let mut levels = Vec::with_capacity(n.min(32));
    for _ in 0..n {
        let width = binio::read_u32(r)? as usize;
        let height = binio::read_u32(r)? as usize;
        let len = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::format("FPY1", "level size overflows"))?;
        let mut data = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            data.push(binio::read_f32(r)? as f64);
        }
        levels.push(FeatureMap::new(width, height, channels, data).map_err(|e| Error::format("FPY1", e.to_string()))?);
    }
    Ok(levels)
}

/// One pyramid level of one camera: the two factors of the lifted volume.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub features: FeatureMap,
    pub depth: DepthDistributionMap,
}

impl FeatureLevel {
    pub fn new(features: FeatureMap, depth: DepthDistributionMap) -> Result<Self> {
        if features.width() != depth.width() || features.height() != depth.height() {
            return Err(Error::invalid(format!(
                "feature map is {}x{}, depth distribution {}x{}",
                features.width(),
                features.height(),
                depth.width(),
                depth.height()
            )));
        }
        Ok(FeatureLevel { features, depth })
    }

    /// Bytes held by the factored representation, `O(H·W·(D + m_c))`.
    pub fn memory_bytes(&self) -> usize {
        self.features.memory_bytes() + self.depth.memory_bytes()
    }
}

/// Per-camera list of levels, finest first.
pub type CameraPyramid = Vec<FeatureLevel>;

/// One-hot at the bin holding each pixel's LiDAR depth; uniform `1/D` where
/// there is no return or the depth exceeds `d_max`.
pub fn build_depth_distribution(sparse: &SparseDepthMap, bins: DepthBins) -> DepthDistributionMap {
    let d = bins.count();
    let (w, h) = (sparse.width(), sparse.height());
    let uniform = 1.0 / d as f64;
    let mut data = vec![0.0; w * h * d];
    for y in 0..h {
        for x in 0..w {
            let px = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            match sparse.get(x, y).and_then(|depth| bins.bin_of(depth)) {
                Some(k) => px[k] = 1.0,
                None => px.fill(uniform),
            }
        }
    }
    DepthDistributionMap {
        width: w,
        height: h,
        bins,
        data,
    }
}
