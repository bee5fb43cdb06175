//! Synthetic worlds built from analytic primitives: ground-truth occupancy,
//! ray-marched LiDAR sweeps and class-coded camera feature pyramids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::FeatureMap;
use crate::config::{Entry, KvConfig};
use crate::error::{Error, Result};
use crate::gaussians::{ClassSet, Vec3};
use crate::grid::OccupancyGrid;
use crate::lidar::{
    CameraModel, GridSpec, Intrinsics, LidarPoint, LidarSweep, LidarSweepSet, PointCloud, RigidTransform,
};

/// Minimum sphere-tracing step, meters. Hits lie at most this far inside a surface.
pub const MARCH_STEP: f64 = 1e-3;
const MAX_MARCH_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Box with half-extents `half`, rotated by `yaw_deg` about +z.
    Box { center: Vec3, half: Vec3, yaw_deg: f64 },
    Sphere { center: Vec3, radius: f64 },
    /// Solid half-space `z ≤ height`.
    Ground { height: f64 },
}

impl Shape {
    /// Signed Euclidean distance, negative inside.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Box { center, half, yaw_deg } => {
                let d = p - center;
                let (s, c) = yaw_deg.to_radians().sin_cos();
                let local = Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
                let q = local.abs() - half;
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Ground { height } => p.z - height,
        }
    }

    /// Axis-aligned bounds; the ground plane is unbounded in x and y.
    fn bounds(&self) -> (Vec3, Vec3) {
        match *self {
            Shape::Box { center, half, yaw_deg } => {
                let (s, c) = yaw_deg.to_radians().sin_cos();
                let ex = Vec3::new(
                    (c * half.x).abs() + (s * half.y).abs(),
                    (s * half.x).abs() + (c * half.y).abs(),
                    half.z,
                );
                (center - ex, center + ex)
            }
            Shape::Sphere { center, radius } => (center - Vec3::repeat(radius), center + Vec3::repeat(radius)),
            Shape::Ground { height } => (
                Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, height),
                Vec3::new(f64::INFINITY, f64::INFINITY, height),
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub class: usize,
}

impl Primitive {
    pub fn contains(&self, p: &Vec3) -> bool {
        self.shape.sdf(p) <= 0.0
    }
}

/// Pinhole camera looking from `position` at `target` with +z up. The
/// principal point sits at the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSpec {
    pub position: Vec3,
    pub target: Vec3,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraSpec {
    pub fn model(&self) -> Result<CameraModel> {
        let k = Intrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )?;
        CameraModel::look_at(k, self.position, self.target - self.position, Vec3::z())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPose {
    pub position: Vec3,
    pub yaw_deg: f64,
    pub timestamp: f64,
}

impl SweepPose {
    /// Sensor frame to world frame.
    pub fn transform(&self) -> RigidTransform {
        let (s, c) = self.yaw_deg.to_radians().sin_cos();
        let rot = crate::gaussians::Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        RigidTransform::new(rot, self.position).expect("yaw rotation is orthonormal")
    }
}

/// Spinning LiDAR: `beams` elevations evenly spaced over `elevation_deg`
/// (inclusive), one ray per `azimuth_step_deg`.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarRig {
    pub beams: usize,
    pub elevation_deg: (f64, f64),
    pub azimuth_step_deg: f64,
    pub max_range: f64,
    pub intensity_noise: f64,
    pub sweeps: Vec<SweepPose>,
}

impl LidarRig {
    pub fn azimuth_count(&self) -> usize {
        (360.0 / self.azimuth_step_deg).round().max(1.0) as usize
    }

    /// Unit ray direction in the sensor frame.
    pub fn direction(&self, beam: usize, azimuth: usize) -> Vec3 {
        let (lo, hi) = self.elevation_deg;
        let el = if self.beams > 1 {
            lo + (hi - lo) * beam as f64 / (self.beams - 1) as f64
        } else {
            lo
        };
        let az = (azimuth as f64 * self.azimuth_step_deg).to_radians();
        let el = el.to_radians();
        Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }
}

impl Default for LidarRig {
    fn default() -> Self {
        LidarRig {
            beams: 32,
            elevation_deg: (-25.0, 5.0),
            azimuth_step_deg: 1.0,
            max_range: 60.0,
            intensity_noise: 0.02,
            sweeps: vec![SweepPose {
                position: Vec3::zeros(),
                yaw_deg: 0.0,
                timestamp: 0.0,
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub classes: ClassSet,
    pub grid: GridSpec,
    pub primitives: Vec<Primitive>,
    pub cameras: Vec<CameraSpec>,
    pub lidar: LidarRig,
    /// Codebook width `m_c`; at least the class count.
    pub feature_channels: usize,
    pub pyramid_scales: usize,
    pub camera_range: f64,
    pub rng_seed: u64,
}

const SCENE_KEYS: &[&str] = &[
    "classes",
    "empty_class",
    "extent_min",
    "extent_max",
    "resolution",
    "seed",
    "ground",
    "box",
    "sphere",
    "camera",
    "camera_range",
    "feature_channels",
    "pyramid_scales",
    "lidar_beams",
    "lidar_elevation",
    "lidar_azimuth_step",
    "lidar_max_range",
    "lidar_intensity_noise",
    "sweep",
];

fn class_of(classes: &ClassSet, e: &Entry, name: &str) -> Result<usize> {
    match classes.index_of(name) {
        Some(k) if k == classes.empty_index() => Err(e.error("primitives cannot use the empty class")),
        Some(k) => Ok(k),
        None => Err(e.error(format!("unknown class `{name}`"))),
    }
}

fn vec3(v: &[f64]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

fn positive(e: &Entry, v: f64, what: &str) -> Result<f64> {
    if v > 0.0 {
        Ok(v)
    } else {
        Err(e.error(format!("{what} must be positive, got {v}")))
    }
}

impl SceneSpec {
    /// Parses the `key = value` scene format. Required keys: `classes`, `seed`.
    pub fn parse(text: &str) -> Result<Self> {
        let c = KvConfig::parse(text)?;
        c.check_known(SCENE_KEYS)?;

        let names: Vec<String> = c.require("classes")?.fields().iter().map(|s| s.to_string()).collect();
        let empty_index = match c.get("empty_class")? {
            Some(e) => names
                .iter()
                .position(|n| *n == e.value)
                .ok_or_else(|| e.error(format!("`{}` is not a listed class", e.value)))?,
            None => 0,
        };
        let classes = ClassSet::new(names, empty_index).map_err(|err| c.require("classes").unwrap().error(err.to_string()))?;

        let triple = |key: &str, default: [f64; 3]| -> Result<Vec3> {
            match c.get(key)? {
                Some(e) => Ok(vec3(&e.numbers(3)?)),
                None => Ok(Vec3::from(default)),
            }
        };
        let min = triple("extent_min", [-25.0, -25.0, -2.5])?;
        let max = triple("extent_max", [25.0, 25.0, 1.5])?;
        let resolution = match c.get("resolution")? {
            Some(e) => match e.fields().len() {
                1 => Vec3::repeat(positive(e, e.numbers(1)?[0], "resolution")?),
                _ => {
                    let v = vec3(&e.numbers(3)?);
                    for r in v.iter() {
                        positive(e, *r, "resolution")?;
                    }
                    v
                }
            },
            None => Vec3::repeat(0.5),
        };
        let grid = GridSpec::from_extent(min, max, resolution).map_err(|err| Error::Config {
            line: c.get("extent_max").ok().flatten().map_or(0, |e| e.line),
            key: "extent_max".into(),
            message: err.to_string(),
        })?;

        let mut primitives = Vec::new();
        for e in c.entries() {
            let shape_and_class = match e.key.as_str() {
                "ground" => {
                    let f = e.fields();
                    if f.len() != 2 {
                        return Err(e.error("expected `height class`"));
                    }
                    let h: f64 = f[0].parse().map_err(|_| e.error(format!("bad height `{}`", f[0])))?;
                    Some((Shape::Ground { height: h }, class_of(&classes, e, f[1])?))
                }
                "box" => {
                    let f = e.fields();
                    if f.len() != 8 {
                        return Err(e.error("expected `cx cy cz hx hy hz yaw_deg class`"));
                    }
                    let v = Entry {
                        value: f[..7].join(" "),
                        ..e.clone()
                    }
                    .numbers(7)?;
                    for h in &v[3..6] {
                        positive(e, *h, "half-extent")?;
                    }
                    let shape = Shape::Box {
                        center: vec3(&v[0..3]),
                        half: vec3(&v[3..6]),
                        yaw_deg: v[6],
                    };
                    Some((shape, class_of(&classes, e, f[7])?))
                }
                "sphere" => {
                    let f = e.fields();
                    if f.len() != 5 {
                        return Err(e.error("expected `cx cy cz radius class`"));
                    }
                    let v = Entry {
                        value: f[..4].join(" "),
                        ..e.clone()
                    }
                    .numbers(4)?;
                    let shape = Shape::Sphere {
                        center: vec3(&v[0..3]),
                        radius: positive(e, v[3], "radius")?,
                    };
                    Some((shape, class_of(&classes, e, f[4])?))
                }
                _ => None,
            };
            if let Some((shape, class)) = shape_and_class {
                let p = Primitive { shape, class };
                if !inside_extent(&p, &grid) {
                    return Err(e.error("primitive extends outside the scene extent"));
                }
                primitives.push(p);
            }
        }

        let mut cameras = Vec::new();
        for e in c.all("camera") {
            let f = e.fields();
            if f.len() != 9 {
                return Err(e.error("expected `px py pz tx ty tz focal width height`"));
            }
            let v = Entry {
                value: f[..7].join(" "),
                ..e.clone()
            }
            .numbers(7)?;
            let dim = |s: &str| -> Result<usize> {
                s.parse::<usize>()
                    .ok()
                    .filter(|v| *v > 0)
                    .ok_or_else(|| e.error(format!("bad image dimension `{s}`")))
            };
            let cam = CameraSpec {
                position: vec3(&v[0..3]),
                target: vec3(&v[3..6]),
                focal: positive(e, v[6], "focal length")?,
                width: dim(f[7])?,
                height: dim(f[8])?,
            };
            cam.model().map_err(|err| e.error(err.to_string()))?;
            cameras.push(cam);
        }

        let mut lidar = LidarRig::default();
        if let Some(e) = c.get("lidar_beams")? {
            lidar.beams = e.parse()?;
            if lidar.beams == 0 {
                return Err(e.error("at least one beam is required"));
            }
        }
        if let Some(e) = c.get("lidar_elevation")? {
            let v = e.numbers(2)?;
            lidar.elevation_deg = (v[0], v[1]);
        }
        if let Some(e) = c.get("lidar_azimuth_step")? {
            lidar.azimuth_step_deg = positive(e, e.parse()?, "azimuth step")?;
        }
        if let Some(e) = c.get("lidar_max_range")? {
            lidar.max_range = positive(e, e.parse()?, "range")?;
        }
        if let Some(e) = c.get("lidar_intensity_noise")? {
            lidar.intensity_noise = e.parse()?;
            if !(lidar.intensity_noise >= 0.0) {
                return Err(e.error("noise must be non-negative"));
            }
        }
        let sweeps = c.all("sweep");
        if !sweeps.is_empty() {
            lidar.sweeps = sweeps
                .iter()
                .map(|e| {
                    let v = e.numbers(5)?;
                    Ok(SweepPose {
                        position: vec3(&v[0..3]),
                        yaw_deg: v[3],
                        timestamp: v[4],
                    })
                })
                .collect::<Result<_>>()?;
        }

        let feature_channels = c.parse_or("feature_channels", classes.len())?;
        if feature_channels < classes.len() {
            let e = c.require("feature_channels")?;
            return Err(e.error(format!("need at least {} channels for the class codebook", classes.len())));
        }
        let pyramid_scales = c.parse_or("pyramid_scales", 4usize)?;
        if pyramid_scales == 0 {
            return Err(c.require("pyramid_scales")?.error("at least one scale is required"));
        }
        let camera_range = match c.get("camera_range")? {
            Some(e) => positive(e, e.parse()?, "camera range")?,
            None => 100.0,
        };

        Ok(SceneSpec {
            classes,
            grid,
            primitives,
            cameras,
            lidar,
            feature_channels,
            pyramid_scales,
            camera_range,
            rng_seed: c.require("seed")?.parse()?,
        })
    }

    /// Canonical config text; parsing it yields an equal spec.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let names = self.classes.names();
        let v3 = |v: &Vec3| format!("{} {} {}", v.x, v.y, v.z);
        s.push_str(&format!("classes = {}\n", names.join(" ")));
        s.push_str(&format!("empty_class = {}\n", names[self.classes.empty_index()]));
        s.push_str(&format!("extent_min = {}\n", v3(&self.grid.origin())));
        s.push_str(&format!("extent_max = {}\n", v3(&self.grid.extent_max())));
        s.push_str(&format!("resolution = {}\n", v3(&self.grid.voxel_size())));
        s.push_str(&format!("seed = {}\n", self.rng_seed));
        for p in &self.primitives {
            let class = &names[p.class];
            match p.shape {
                Shape::Ground { height } => s.push_str(&format!("ground = {height} {class}\n")),
                Shape::Box { center, half, yaw_deg } => {
                    s.push_str(&format!("box = {} {} {yaw_deg} {class}\n", v3(&center), v3(&half)))
                }
                Shape::Sphere { center, radius } => s.push_str(&format!("sphere = {} {radius} {class}\n", v3(&center))),
            }
        }
        for c in &self.cameras {
            s.push_str(&format!(
                "camera = {} {} {} {} {}\n",
                v3(&c.position),
                v3(&c.target),
                c.focal,
                c.width,
                c.height
            ));
        }
        s.push_str(&format!("camera_range = {}\n", self.camera_range));
        s.push_str(&format!("feature_channels = {}\n", self.feature_channels));
        s.push_str(&format!("pyramid_scales = {}\n", self.pyramid_scales));
        let l = &self.lidar;
        s.push_str(&format!("lidar_beams = {}\n", l.beams));
        s.push_str(&format!("lidar_elevation = {} {}\n", l.elevation_deg.0, l.elevation_deg.1));
        s.push_str(&format!("lidar_azimuth_step = {}\n", l.azimuth_step_deg));
        s.push_str(&format!("lidar_max_range = {}\n", l.max_range));
        s.push_str(&format!("lidar_intensity_noise = {}\n", l.intensity_noise));
        for w in &l.sweeps {
            s.push_str(&format!("sweep = {} {} {}\n", v3(&w.position), w.yaw_deg, w.timestamp));
        }
        s
    }

    pub fn camera_models(&self) -> Result<Vec<CameraModel>> {
        self.cameras.iter().map(CameraSpec::model).collect()
    }
}

fn inside_extent(p: &Primitive, grid: &GridSpec) -> bool {
    let (lo, hi) = p.shape.bounds();
    let (min, max) = (grid.origin(), grid.extent_max());
    match p.shape {
        Shape::Ground { height } => height >= min.z && height <= max.z,
        _ => (0..3).all(|a| lo[a] >= min[a] - 1e-9 && hi[a] <= max[a] + 1e-9),
    }
}

/// Index of the last-listed primitive containing `p`.
pub fn containing_primitive(primitives: &[Primitive], p: &Vec3) -> Option<usize> {
    primitives.iter().rposition(|q| q.contains(p))
}

/// Labels each voxel with the class of the last-listed primitive containing
/// its center, or the empty class.
pub fn rasterize_gt(spec: &SceneSpec) -> OccupancyGrid {
    let grid = spec.grid;
    let empty = spec.classes.empty_index() as u16;
    let labels: Vec<u16> = (0..grid.num_voxels())
        .into_par_iter()
        .map(|lin| {
            let x = grid.center(grid.unlinear(lin));
            containing_primitive(&spec.primitives, &x).map_or(empty, |i| spec.primitives[i].class as u16)
        })
        .collect();
    OccupancyGrid::from_labels(grid, spec.classes.len(), labels).expect("labels match the grid")
}

/// Union signed distance: the minimum over primitives.
pub fn scene_sdf(primitives: &[Primitive], p: &Vec3) -> f64 {
    primitives.iter().map(|q| q.shape.sdf(p)).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub point: Vec3,
    pub distance: f64,
    /// Last-listed primitive containing the hit point.
    pub primitive: usize,
}

/// Sphere tracing with a minimum step of [`MARCH_STEP`]; reports the first
/// sample at or inside a surface. `dir` must be unit length.
pub fn cast_ray(primitives: &[Primitive], origin: &Vec3, dir: &Vec3, max_range: f64) -> Option<RayHit> {
    if primitives.is_empty() {
        return None;
    }
    let mut t = 0.0;
    for _ in 0..MAX_MARCH_ITERATIONS {
        let p = origin + dir * t;
        let d = scene_sdf(primitives, &p);
        if d <= 0.0 {
            let primitive = containing_primitive(primitives, &p)?;
            return Some(RayHit { point: p, distance: t, primitive });
        }
        t += d.max(MARCH_STEP);
        if t > max_range {
            return None;
        }
    }
    None
}

/// Return intensity for a class before noise, in `(0, 1)`.
pub fn class_intensity(class: usize, num_classes: usize) -> f64 {
    (class + 1) as f64 / (num_classes + 1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedLidar {
    /// Points in each sweep's sensor frame; poses map them to the world.
    pub sweeps: LidarSweepSet,
    /// Primitive hit by each point, parallel to the sweep clouds.
    pub hit_primitives: Vec<Vec<usize>>,
}

/// Casts every beam/azimuth ray from every sweep pose. Intensity is a class
/// constant plus uniform noise from a per-(sweep, beam) seeded stream.
pub fn simulate_lidar(spec: &SceneSpec) -> Result<SimulatedLidar> {
    let rig = &spec.lidar;
    let n_az = rig.azimuth_count();
    let mut sweeps = Vec::with_capacity(rig.sweeps.len());
    let mut hit_primitives = Vec::with_capacity(rig.sweeps.len());
    for (s, pose) in rig.sweeps.iter().enumerate() {
        let tf = pose.transform();
        let inv = tf.inverse();
        let per_beam: Vec<(Vec<LidarPoint>, Vec<usize>)> = (0..rig.beams)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
                rng.set_stream((s * rig.beams + b) as u64);
                let mut pts = Vec::new();
                let mut ids = Vec::new();
                for a in 0..n_az {
                    let dir = tf.apply_vector(&rig.direction(b, a));
                    if let Some(hit) = cast_ray(&spec.primitives, &pose.position, &dir, rig.max_range) {
                        let class = spec.primitives[hit.primitive].class;
                        let noise = rig.intensity_noise * rng.gen_range(-1.0..1.0);
                        let intensity = (class_intensity(class, spec.classes.len()) + noise).max(0.0);
                        let local = inv.apply(&hit.point);
                        pts.push(LidarPoint::new(local.x, local.y, local.z, intensity));
                        ids.push(hit.primitive);
                    }
                }
                (pts, ids)
            })
            .collect();
        let (mut points, mut ids) = (Vec::new(), Vec::new());
        for (p, i) in per_beam {
            points.extend(p);
            ids.extend(i);
        }
        sweeps.push(LidarSweep {
            cloud: PointCloud::new(points),
            pose: tf,
            timestamp: pose.timestamp,
        });
        hit_primitives.push(ids);
    }
    Ok(SimulatedLidar {
        sweeps: LidarSweepSet::new(sweeps)?,
        hit_primitives,
    })
}

/// One-hot codebook row for `class`: orthonormal across classes.
pub fn codebook_row(class: usize, channels: usize) -> Vec<f64> {
    let mut v = vec![0.0; channels];
    v[class] = 1.0;
    v
}

/// Scale-0 features: the codebook row of the primitive hit by each pixel-center ray, zero for sky.
pub fn render_features(spec: &SceneSpec, camera: &CameraSpec) -> Result<FeatureMap> {
    let model = camera.model()?;
    let (w, h, m) = (camera.width, camera.height, spec.feature_channels);
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; w * m];
            for x in 0..w {
                let (o, d) = model.ray(x as f64, y as f64);
                if let Some(hit) = cast_ray(&spec.primitives, &o, &d, spec.camera_range) {
                    row[x * m + spec.primitives[hit.primitive].class] = 1.0;
                }
            }
            row
        })
        .collect();
    FeatureMap::new(w, h, m, rows.concat())
}

/// Scale-0 features followed by `pyramid_scales - 1` 2× average-pooled levels.
pub fn render_feature_pyramid(spec: &SceneSpec, camera: &CameraSpec) -> Result<Vec<FeatureMap>> {
    let mut levels = vec![render_features(spec, camera)?];
    for _ in 1..spec.pyramid_scales {
        let next = levels.last().expect("non-empty").downsample();
        levels.push(next);
    }
    Ok(levels)
}

/// The standard demo scene: ground, two vehicles and a tree-like sphere on a
/// 50×50×8 grid at 0.5 m.
pub const DEMO_SCENE: &str = include_str!("../../../configs/demo_scene.cfg");
