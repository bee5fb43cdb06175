//! LiDAR sweep aggregation, mean-feature voxelization and camera depth maps.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Read, Write};

use rayon::prelude::*;

use crate::binio;
use crate::error::{Error, Result};
use crate::gaussians::{Mat3, Quat, Vec3};

/// Default number of sweeps aggregated before voxelization.
pub const DEFAULT_SWEEP_COUNT: usize = 10;

/// Default LiDAR voxel size (x, y, z) in meters.
pub const DEFAULT_VOXEL_SIZE: [f64; 3] = [0.075, 0.075, 0.2];

/// Points per shard when voxelizing in parallel. Shard boundaries are fixed so
/// the reduction order does not depend on the thread count.
const VOXELIZE_SHARD: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-9) || !((det - 1.0).abs() <= 1e-9) {
            return Err(Error::invalid(format!(
                "rotation is not a proper orthonormal matrix (orthogonality error {ortho:e}, det {det})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn from_quat(q: Quat, translation: Vec3) -> Result<Self> {
        RigidTransform::new(crate::gaussians::quat_to_rot(q)?, translation)
    }

    pub fn translation_only(t: Vec3) -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub position: Vec3,
    pub intensity: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        LidarPoint {
            position: Vec3::new(x, y, z),
            intensity,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarSweep {
    pub cloud: PointCloud,
    /// Sensor frame to reference frame.
    pub pose: RigidTransform,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarSweepSet {
    sweeps: Vec<LidarSweep>,
}

impl LidarSweepSet {
    pub fn new(sweeps: Vec<LidarSweep>) -> Result<Self> {
        for (i, s) in sweeps.iter().enumerate() {
            if let Some(p) = s.cloud.points.iter().find(|p| !(p.intensity >= 0.0)) {
                return Err(Error::invalid(format!(
                    "sweep {i} has point with invalid intensity {}",
                    p.intensity
                )));
            }
            if s.cloud.points.iter().any(|p| !p.position.iter().all(|v| v.is_finite())) {
                return Err(Error::invalid(format!("sweep {i} has a non-finite point")));
            }
        }
        Ok(LidarSweepSet { sweeps })
    }

    pub fn sweeps(&self) -> &[LidarSweep] {
        &self.sweeps
    }

    /// The `n` sweeps with the latest timestamps, oldest first.
    pub fn most_recent(&self, n: usize) -> LidarSweepSet {
        let mut order: Vec<usize> = (0..self.sweeps.len()).collect();
        order.sort_by(|&a, &b| self.sweeps[a].timestamp.total_cmp(&self.sweeps[b].timestamp).then(a.cmp(&b)));
        let keep = &order[order.len().saturating_sub(n)..];
        LidarSweepSet {
            sweeps: keep.iter().map(|&i| self.sweeps[i].clone()).collect(),
        }
    }
}

/// Concatenates all sweeps after moving each into the reference frame.
pub fn aggregate_sweeps(set: &LidarSweepSet) -> Result<PointCloud> {
    if set.sweeps.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty sweep set"));
    }
    let total = set.sweeps.iter().map(|s| s.cloud.len()).sum();
    let mut points = Vec::with_capacity(total);
    for s in &set.sweeps {
        points.extend(s.cloud.points.iter().map(|p| LidarPoint {
            position: s.pose.apply(&p.position),
            intensity: p.intensity,
        }));
    }
    Ok(PointCloud { points })
}

/// Min-max normalizes intensities to `[0, 1]`. A constant-intensity cloud maps to 1.
pub fn normalize_intensity(cloud: &PointCloud) -> PointCloud {
    let (lo, hi) = cloud
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.intensity), hi.max(p.intensity)));
    let range = hi - lo;
    let points = cloud
        .points
        .iter()
        .map(|p| LidarPoint {
            position: p.position,
            intensity: if range > 0.0 { ((p.intensity - lo) / range).clamp(0.0, 1.0) } else { 1.0 },
        })
        .collect();
    PointCloud { points }
}

/// Axis-aligned regular grid: `origin` is the minimum corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    origin: Vec3,
    voxel_size: Vec3,
    counts: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: Vec3, voxel_size: Vec3, counts: [usize; 3]) -> Result<Self> {
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::invalid(format!("grid counts {counts:?} must be positive")));
        }
        if !voxel_size.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("voxel size {voxel_size:?} must be positive")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite grid origin"));
        }
        Ok(GridSpec {
            origin,
            voxel_size,
            counts,
        })
    }

    /// Grid covering `[min, max]` at `resolution`; the span must be a whole
    /// number of voxels per axis (to 1e-9).
    pub fn from_extent(min: Vec3, max: Vec3, resolution: Vec3) -> Result<Self> {
        let mut counts = [0usize; 3];
        for a in 0..3 {
            let n = (max[a] - min[a]) / resolution[a];
            let r = n.round();
            if !(r >= 1.0) || (r * resolution[a] - (max[a] - min[a])).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "extent [{}, {}] on axis {a} is not a whole number of {} m voxels",
                    min[a], max[a], resolution[a]
                )));
            }
            counts[a] = r as usize;
        }
        GridSpec::new(min, resolution, counts)
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn voxel_size(&self) -> Vec3 {
        self.voxel_size
    }

    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    pub fn extent_max(&self) -> Vec3 {
        Vec3::new(
            self.origin.x + self.counts[0] as f64 * self.voxel_size.x,
            self.origin.y + self.counts[1] as f64 * self.voxel_size.y,
            self.origin.z + self.counts[2] as f64 * self.voxel_size.z,
        )
    }

    pub fn num_voxels(&self) -> usize {
        self.counts[0] * self.counts[1] * self.counts[2]
    }

    /// Voxel containing `p`, or `None` outside the grid. Cells are half-open.
    #[inline]
    pub fn index_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size[a]).floor();
            if !(f >= 0.0 && f < self.counts[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    /// Row-major linear index with x slowest and z fastest.
    #[inline]
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.counts[1] + idx[1]) * self.counts[2] + idx[2]
    }

    #[inline]
    pub fn unlinear(&self, lin: usize) -> [usize; 3] {
        let z = lin % self.counts[2];
        let rest = lin / self.counts[2];
        [rest / self.counts[1], rest % self.counts[1], z]
    }

    #[inline]
    pub fn center(&self, idx: [usize; 3]) -> Vec3 {
        Vec3::new(
            self.origin.x + (idx[0] as f64 + 0.5) * self.voxel_size.x,
            self.origin.y + (idx[1] as f64 + 0.5) * self.voxel_size.y,
            self.origin.z + (idx[2] as f64 + 0.5) * self.voxel_size.z,
        )
    }

    pub fn voxel_bounds(&self, idx: [usize; 3]) -> (Vec3, Vec3) {
        let lo = Vec3::new(
            self.origin.x + idx[0] as f64 * self.voxel_size.x,
            self.origin.y + idx[1] as f64 * self.voxel_size.y,
            self.origin.z + idx[2] as f64 * self.voxel_size.z,
        );
        (lo, lo + self.voxel_size)
    }

    /// Same extent at a different resolution.
    pub fn with_resolution(&self, resolution: Vec3) -> Result<GridSpec> {
        GridSpec::from_extent(self.origin, self.extent_max(), resolution)
    }

    pub fn translated(&self, shift: Vec3) -> GridSpec {
        GridSpec {
            origin: self.origin + shift,
            ..*self
        }
    }
}

/// Mean position and intensity of the points inside one voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelEntry {
    pub mean: Vec3,
    pub intensity: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatureSet {
    spec: GridSpec,
    entries: BTreeMap<usize, VoxelEntry>,
}

impl VoxelFeatureSet {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Non-empty voxels keyed by linear index, ascending.
    pub fn entries(&self) -> &BTreeMap<usize, VoxelEntry> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_points(&self) -> usize {
        self.entries.values().map(|e| e.count).sum()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    #[inline]
    fn add(&mut self, v: f64) {
        let y = v - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    fn merge(&mut self, other: &Kahan) {
        self.add(other.sum);
        self.add(-other.comp);
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct VoxelAccum {
    xyz: [Kahan; 3],
    intensity: Kahan,
    count: usize,
}

/// Groups points by voxel and returns the per-voxel means. Points outside the
/// grid are dropped.
pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> VoxelFeatureSet {
    let shards: Vec<HashMap<usize, VoxelAccum>> = cloud
        .points
        .par_chunks(VOXELIZE_SHARD)
        .map(|chunk| {
            let mut acc: HashMap<usize, VoxelAccum> = HashMap::new();
            for p in chunk {
                if let Some(idx) = spec.index_of(&p.position) {
                    let a = acc.entry(spec.linear(idx)).or_default();
                    for k in 0..3 {
                        a.xyz[k].add(p.position[k]);
                    }
                    a.intensity.add(p.intensity);
                    a.count += 1;
                }
            }
            acc
        })
        .collect();

    // Reduce shards in shard order, per voxel.
    let mut merged: BTreeMap<usize, VoxelAccum> = BTreeMap::new();
    for shard in &shards {
        let mut keys: Vec<usize> = shard.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            let part = &shard[&k];
            let m = merged.entry(k).or_default();
            for a in 0..3 {
                m.xyz[a].merge(&part.xyz[a]);
            }
            m.intensity.merge(&part.intensity);
            m.count += part.count;
        }
    }

    let entries = merged
        .into_iter()
        .map(|(lin, a)| {
            let n = a.count as f64;
            let (lo, hi) = spec.voxel_bounds(spec.unlinear(lin));
            let mut mean = Vec3::new(a.xyz[0].sum / n, a.xyz[1].sum / n, a.xyz[2].sum / n);
            for k in 0..3 {
                // Rounding can push a mean of boundary points just outside.
                mean[k] = mean[k].clamp(lo[k], hi[k]);
            }
            (
                lin,
                VoxelEntry {
                    mean,
                    intensity: a.intensity.sum / n,
                    count: a.count,
                },
            )
        })
        .collect();
    VoxelFeatureSet { spec: *spec, entries }
}

/// Pinhole intrinsics. Integer pixel coordinates are pixel centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid("non-finite principal point"));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics of the `scale`-th 2× pyramid level. Focal lengths halve per
    /// level and the principal point follows the pixel-center convention, so
    /// a pixel index `p` at level 0 maps to `p >> scale`.
    pub fn at_scale(&self, scale: u32) -> Intrinsics {
        let f = (1u64 << scale) as f64;
        Intrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: (self.width >> scale).max(1),
            height: (self.height >> scale).max(1),
        }
    }

    /// Nearest pixel for a continuous image coordinate, if inside the image.
    #[inline]
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let pu = (u + 0.5).floor();
        let pv = (v + 0.5).floor();
        if pu >= 0.0 && pv >= 0.0 && pu < self.width as f64 && pv < self.height as f64 {
            Some((pu as usize, pv as usize))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    /// Reference frame to camera frame.
    pub extrinsics: RigidTransform,
}

impl CameraModel {
    pub fn new(intrinsics: Intrinsics, extrinsics: RigidTransform) -> Self {
        CameraModel { intrinsics, extrinsics }
    }

    /// Camera frame (x right, y down, z forward) for a camera at `position`
    /// looking along `forward` with `up` roughly upwards.
    pub fn look_at(intrinsics: Intrinsics, position: Vec3, forward: Vec3, up: Vec3) -> Result<Self> {
        let z = forward.try_normalize(1e-12).ok_or_else(|| Error::invalid("zero forward vector"))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("up vector parallel to forward"))?;
        let y = z.cross(&x);
        // Rows of the reference→camera rotation are the camera axes.
        let rot = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(rot * position);
        Ok(CameraModel {
            intrinsics,
            extrinsics: RigidTransform::new(rot, t)?,
        })
    }

    /// Continuous `(u, v)` and camera-frame depth of a reference-frame point
    /// at the given pyramid scale, without visibility checks.
    #[inline]
    pub fn project_raw(&self, p: &Vec3, scale: u32) -> (f64, f64, f64) {
        let k = self.intrinsics.at_scale(scale);
        let c = self.extrinsics.apply(p);
        (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z)
    }

    /// Reference-frame ray origin and unit direction through image point `(u, v)` at scale 0.
    pub fn ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let k = &self.intrinsics;
        let d_cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let inv = self.extrinsics.inverse();
        (inv.translation(), inv.apply_vector(&d_cam).normalize())
    }
}

/// Per-pixel LiDAR depth at one pyramid scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepthMap {
    scale: u32,
    width: usize,
    height: usize,
    depths: Vec<Option<f64>>,
}

impl SparseDepthMap {
    pub fn empty(scale: u32, width: usize, height: usize) -> Self {
        SparseDepthMap {
            scale,
            width,
            height,
            depths: vec![None; width * height],
        }
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.depths[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, depth: Option<f64>) {
        self.depths[y * self.width + x] = depth;
    }

    pub fn valid_count(&self) -> usize {
        self.depths.iter().filter(|d| d.is_some()).count()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, b"SDM1")?;
        binio::write_u32(w, self.scale)?;
        binio::write_u32(w, binio::to_u32(self.width, "width")?)?;
        binio::write_u32(w, binio::to_u32(self.height, "height")?)?;
        let mut i = 0;
        while i < self.depths.len() {
            let present = self.depths[i].is_some();
            let mut j = i;
            while j < self.depths.len() && self.depths[j].is_some() == present {
                j += 1;
            }
            binio::write_u32(w, binio::to_u32(j - i, "run length")?)?;
            binio::write_u8(w, present as u8)?;
            if present {
                for d in &self.depths[i..j] {
                    binio::write_f32(w, d.unwrap() as f32)?;
                }
            }
            i = j;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, b"SDM1", "SDM1")?;
        let scale = binio::read_u32(r)?;
        let width = binio::read_u32(r)? as usize;
        let height = binio::read_u32(r)? as usize;
        let total = width
            .checked_mul(height)
            .ok_or_else(|| Error::format("SDM1", "image size overflows"))?;
        let mut depths = Vec::with_capacity(total);
        while depths.len() < total {
            let run = binio::read_u32(r)? as usize;
            let flag = binio::read_u8(r)?;
            if run == 0 || depths.len() + run > total {
                return Err(Error::format("SDM1", format!("bad run length {run}")));
            }
            match flag {
                0 => depths.extend(std::iter::repeat(None).take(run)),
                1 => {
                    for _ in 0..run {
                        depths.push(Some(binio::read_f32(r)? as f64));
                    }
                }
                f => return Err(Error::format("SDM1", format!("bad run flag {f}"))),
            }
        }
        Ok(SparseDepthMap {
            scale,
            width,
            height,
            depths,
        })
    }
}

/// Renders a z-buffered sparse depth map of `cloud` at pyramid level `scale`.
/// Points behind the camera, beyond `d_max` or outside the image are dropped.
pub fn project_depth(cloud: &PointCloud, camera: &CameraModel, scale: u32, d_max: f64) -> SparseDepthMap {
    let k = camera.intrinsics.at_scale(scale);
    let mut map = SparseDepthMap::empty(scale, k.width, k.height);
    for p in &cloud.points {
        let c = camera.extrinsics.apply(&p.position);
        if !(c.z > 0.0) || c.z > d_max {
            continue;
        }
        let u = k.fx * c.x / c.z + k.cx;
        let v = k.fy * c.y / c.z + k.cy;
        if let Some((px, py)) = k.pixel_of(u, v) {
            let slot = &mut map.depths[py * k.width + px];
            if slot.map_or(true, |d| c.z < d) {
                *slot = Some(c.z);
            }
        }
    }
    map
}

const CLOUD_MAGIC: &[u8; 4] = b"LPC1";

/// `LPC1`: magic, u32 count, then x, y, z, intensity as f32 per point.
pub fn write_cloud<W: Write>(w: &mut W, cloud: &PointCloud) -> Result<()> {
    binio::write_magic(w, CLOUD_MAGIC)?;
    binio::write_u32(w, binio::to_u32(cloud.len(), "point count")?)?;
    for p in &cloud.points {
        for v in [p.position.x, p.position.y, p.position.z, p.intensity] {
            binio::write_f32(w, v as f32)?;
        }
    }
    Ok(())
}

pub fn read_cloud<R: Read>(r: &mut R) -> Result<PointCloud> {
    binio::expect_magic(r, CLOUD_MAGIC, "LPC1")?;
    let n = binio::read_u32(r)? as usize;
    let mut points = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let x = binio::read_f32(r)? as f64;
        let y = binio::read_f32(r)? as f64;
        let z = binio::read_f32(r)? as f64;
        let i = binio::read_f32(r)? as f64;
        points.push(LidarPoint::new(x, y, z, i));
    }
    Ok(PointCloud { points })
}

pub fn write_cloud_csv<W: Write>(w: &mut W, cloud: &PointCloud) -> Result<()> {
    writeln!(w, "x,y,z,intensity")?;
    for p in &cloud.points {
        writeln!(w, "{},{},{},{}", p.position.x, p.position.y, p.position.z, p.intensity)?;
    }
    Ok(())
}

pub fn read_cloud_csv<R: BufRead>(r: R) -> Result<PointCloud> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if cols != ["x", "y", "z", "intensity"] {
        return Err(Error::format("point CSV", format!("unexpected header `{header}`")));
    }
    let mut points = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match vals {
            Ok(v) if v.len() == 4 => points.push(LidarPoint::new(v[0], v[1], v[2], v[3])),
            _ => {
                return Err(Error::format("point CSV", format!("line {}: `{line}`", n + 2)));
            }
        }
    }
    Ok(PointCloud { points })
}
