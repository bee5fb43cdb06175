//! Commands behind the CLI: scene synthesis, property fitting through the
//! splatter, the forward block pipeline, evaluation, multi-resolution
//! splatting and PLY export.
//!
//! A scene directory holds `scene.cfg` (canonical scene config), `gt.ogr`,
//! one `sweep_NNN.lpc` per sweep (sensor frame, poses in `scene.cfg`), one
//! `camera_N.fpy` feature pyramid per camera and `manifest.txt` with an
//! FNV-1a 64 checksum per file.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::attention::{
    build_depth_distribution, init_queries, read_feature_pyramid, run_blocks, write_feature_pyramid, BlockDims,
    BlockStack, CameraPyramid, DepthBins, FeatureLevel, FeatureMap, DEFAULT_DEPTH_BINS, DEFAULT_DEPTH_MAX,
    DEFAULT_REFERENCE_POINTS, DEFAULT_SAMPLES_PER_REFERENCE, DEFAULT_Z_NEAR,
};
use crate::attention::{logit, sigmoid};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::export::{write_gaussians_ply, write_grid_ply};
use crate::gaussians::{read_gaussians, write_gaussians, Quat, SemanticGaussian, Vec3, DEFAULT_SCALE_FLOOR};
use crate::grid::OccupancyGrid;
use crate::init::{init_gaussians, InitConfig};
use crate::lidar::{
    aggregate_sweeps, normalize_intensity, project_depth, read_cloud, voxelize, write_cloud, GridSpec, LidarSweep,
    LidarSweepSet, VoxelFeatureSet, DEFAULT_SWEEP_COUNT, DEFAULT_VOXEL_SIZE,
};
use crate::losses::{cross_entropy, lovasz_softmax, LovaszClasses};
use crate::metrics::{confusion, iou_miou, write_metrics_csv, IouReport};
use crate::scene::{rasterize_gt, render_feature_pyramid, simulate_lidar, SceneSpec};
use crate::splat::{build_index, splat, splat_backward, Background, DEFAULT_BACKGROUND, DEFAULT_KAPPA};

pub const SCENE_CONFIG_FILE: &str = "scene.cfg";
pub const GT_FILE: &str = "gt.ogr";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn sweep_file(k: usize) -> String {
    format!("sweep_{k:03}.lpc")
}

pub fn camera_file(c: usize) -> String {
    format!("camera_{c}.fpy")
}

/// 64-bit FNV-1a, used for artifact checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn with_path(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(with_path(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(with_path(path))
}

/// Serializes into memory, writes the file and returns its checksum.
fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<u64> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, &buf).map_err(with_path(path))?;
    Ok(fnv1a64(&buf))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).map_err(with_path(path))?))
}

fn read_grid(path: &Path) -> Result<OccupancyGrid> {
    OccupancyGrid::read(&mut open(path)?)
}

fn read_gaussian_file(path: &Path) -> Result<(Vec<SemanticGaussian>, usize)> {
    read_gaussians(&mut open(path)?)
}

/// Paths in a config are relative to the config file's directory.
fn resolve(config_path: &Path, value: &str) -> PathBuf {
    let p = Path::new(value);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// One or three numbers.
fn vec3_or(c: &KvConfig, key: &str, default: Vec3) -> Result<Vec3> {
    match c.get(key)? {
        None => Ok(default),
        Some(e) => {
            let v = if e.fields().len() == 1 {
                Vec3::repeat(e.numbers(1)?[0])
            } else {
                Vec3::from_column_slice(&e.numbers(3)?)
            };
            if v.iter().any(|x| !(*x > 0.0)) {
                return Err(e.error("values must be positive"));
            }
            Ok(v)
        }
    }
}

fn positive_f64(c: &KvConfig, key: &str, default: f64) -> Result<f64> {
    let v = c.parse_or(key, default)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(c.require(key)?.error(format!("must be positive, got {v}")))
    }
}

fn positive_usize(c: &KvConfig, key: &str, default: usize) -> Result<usize> {
    let v = c.parse_or(key, default)?;
    if v > 0 {
        Ok(v)
    } else {
        Err(c.require(key)?.error("must be at least 1"))
    }
}

// ---------------------------------------------------------------------------
// Scenes

#[derive(Debug, Clone, PartialEq)]
pub struct SceneArtifacts {
    pub spec: SceneSpec,
    pub gt: OccupancyGrid,
    /// Sensor-frame clouds with their poses.
    pub sweeps: LidarSweepSet,
    /// Per camera, finest level first.
    pub pyramids: Vec<Vec<FeatureMap>>,
}

pub fn synthesize(spec: &SceneSpec) -> Result<SceneArtifacts> {
    let gt = rasterize_gt(spec);
    let sweeps = simulate_lidar(spec)?.sweeps;
    let pyramids = spec
        .cameras
        .iter()
        .map(|c| render_feature_pyramid(spec, c))
        .collect::<Result<_>>()?;
    Ok(SceneArtifacts {
        spec: spec.clone(),
        gt,
        sweeps,
        pyramids,
    })
}

/// Writes the scene directory and returns `(file, checksum)` pairs in manifest order.
pub fn write_scene_dir(dir: &Path, a: &SceneArtifacts) -> Result<Vec<(String, u64)>> {
    fs::create_dir_all(dir).map_err(with_path(dir))?;
    let mut manifest = Vec::new();
    let mut put = |name: String, f: &dyn Fn(&mut Vec<u8>) -> Result<()>| -> Result<()> {
        let h = write_file(&dir.join(&name), |b| f(b))?;
        manifest.push((name, h));
        Ok(())
    };
    put(SCENE_CONFIG_FILE.into(), &|b| {
        b.extend_from_slice(a.spec.to_config_string().as_bytes());
        Ok(())
    })?;
    put(GT_FILE.into(), &|b| a.gt.write(b))?;
    for (k, s) in a.sweeps.sweeps().iter().enumerate() {
        put(sweep_file(k), &|b| write_cloud(b, &s.cloud))?;
    }
    for (c, p) in a.pyramids.iter().enumerate() {
        put(camera_file(c), &|b| write_feature_pyramid(b, p))?;
    }
    let mut text = String::new();
    for (name, h) in &manifest {
        text.push_str(&format!("{name} {h:016x}\n"));
    }
    fs::write(dir.join(MANIFEST_FILE), text).map_err(with_path(&dir.join(MANIFEST_FILE)))?;
    Ok(manifest)
}

pub fn read_scene_dir(dir: &Path) -> Result<SceneArtifacts> {
    let spec = SceneSpec::parse(&read_text(&dir.join(SCENE_CONFIG_FILE))?)?;
    let gt = read_grid(&dir.join(GT_FILE))?;
    if gt.spec() != &spec.grid || gt.num_classes() != spec.classes.len() || gt.is_logits() {
        return Err(Error::format("OGR1", "ground-truth grid does not match the scene config"));
    }
    let mut sweeps = Vec::new();
    for (k, pose) in spec.lidar.sweeps.iter().enumerate() {
        let cloud = read_cloud(&mut open(&dir.join(sweep_file(k)))?)?;
        sweeps.push(LidarSweep {
            cloud,
            pose: pose.transform(),
            timestamp: pose.timestamp,
        });
    }
    let mut pyramids = Vec::new();
    for c in 0..spec.cameras.len() {
        pyramids.push(read_feature_pyramid(&mut open(&dir.join(camera_file(c)))?)?);
    }
    Ok(SceneArtifacts {
        spec,
        gt,
        sweeps: LidarSweepSet::new(sweeps)?,
        pyramids,
    })
}

/// `synth`: parse the scene config, apply the seed override and write the scene directory.
pub fn cmd_synth(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<Vec<(String, u64)>> {
    let mut spec = SceneSpec::parse(&read_text(config_path)?)?;
    if let Some(s) = seed {
        spec.rng_seed = s;
    }
    write_scene_dir(out, &synthesize(&spec)?)
}

// ---------------------------------------------------------------------------
// Initialization

#[derive(Debug, Clone, PartialEq)]
pub struct InitSettings {
    pub n_gaussians: usize,
    /// Most recent sweeps to aggregate.
    pub sweeps: usize,
    pub voxel_size: Vec3,
    /// Initial Gaussian scale; defaults to the LiDAR voxel size.
    pub scale: Option<Vec3>,
    pub seed: u64,
}

impl InitSettings {
    fn from_kv(c: &KvConfig, default_count: usize) -> Result<Self> {
        Ok(InitSettings {
            n_gaussians: positive_usize(c, "gaussians", default_count)?,
            sweeps: positive_usize(c, "sweeps", DEFAULT_SWEEP_COUNT)?,
            voxel_size: vec3_or(c, "init_voxel_size", Vec3::from(DEFAULT_VOXEL_SIZE))?,
            scale: match c.get("init_scale")? {
                Some(_) => Some(vec3_or(c, "init_scale", Vec3::zeros())?),
                None => None,
            },
            seed: c.require("seed")?.parse()?,
        })
    }
}

/// Non-empty LiDAR voxels over the scene extent from the most recent sweeps.
pub fn lidar_voxels(scene: &SceneArtifacts, sweeps: usize, voxel_size: Vec3) -> Result<VoxelFeatureSet> {
    let cloud = normalize_intensity(&aggregate_sweeps(&scene.sweeps.most_recent(sweeps))?);
    let g = &scene.spec.grid;
    let span = g.extent_max() - g.origin();
    let counts = [0, 1, 2].map(|a| ((span[a] / voxel_size[a]) - 1e-9).ceil().max(1.0) as usize);
    Ok(voxelize(&cloud, &GridSpec::new(g.origin(), voxel_size, counts)?))
}

pub fn initialize(scene: &SceneArtifacts, s: &InitSettings) -> Result<Vec<SemanticGaussian>> {
    let voxels = lidar_voxels(scene, s.sweeps, s.voxel_size)?;
    let g = &scene.spec.grid;
    let mut cfg = InitConfig::new(
        s.n_gaussians,
        s.voxel_size,
        scene.spec.classes.len(),
        (g.origin(), g.extent_max()),
        s.seed,
    );
    if let Some(scale) = s.scale {
        cfg.default_scale = scale;
    }
    init_gaussians(&voxels, &cfg)
}

// ---------------------------------------------------------------------------
// Fitting

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub mean: f64,
    pub scale_log: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub logits: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            mean: 1e-2,
            scale_log: 1e-2,
            rotation: 1e-3,
            opacity_logit: 1e-2,
            logits: 5e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub lovasz_weight: f64,
    pub kappa: f64,
    pub background: f64,
    pub eval_every: usize,
    pub init: InitSettings,
}

const FIT_KEYS: &[&str] = &[
    "scene",
    "iterations",
    "lr_mean",
    "lr_scale",
    "lr_rotation",
    "lr_opacity",
    "lr_logits",
    "lovasz_weight",
    "kappa",
    "background",
    "eval_every",
    "gaussians",
    "sweeps",
    "init_voxel_size",
    "init_scale",
    "seed",
];

impl FitConfig {
    pub fn from_kv(c: &KvConfig) -> Result<Self> {
        c.check_known(FIT_KEYS)?;
        let d = LearningRates::default();
        let lovasz_weight = c.parse_or("lovasz_weight", 1.0)?;
        if !(lovasz_weight >= 0.0) {
            return Err(c.require("lovasz_weight")?.error("must be non-negative"));
        }
        Ok(FitConfig {
            iterations: positive_usize(c, "iterations", 500)?,
            lr: LearningRates {
                mean: positive_f64(c, "lr_mean", d.mean)?,
                scale_log: positive_f64(c, "lr_scale", d.scale_log)?,
                rotation: positive_f64(c, "lr_rotation", d.rotation)?,
                opacity_logit: positive_f64(c, "lr_opacity", d.opacity_logit)?,
                logits: positive_f64(c, "lr_logits", d.logits)?,
            },
            lovasz_weight,
            kappa: positive_f64(c, "kappa", DEFAULT_KAPPA)?,
            background: c.parse_or("background", DEFAULT_BACKGROUND)?,
            eval_every: positive_usize(c, "eval_every", 10)?,
            init: InitSettings::from_kv(c, 512)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub ce: f64,
    pub lovasz: f64,
    pub total: f64,
    pub iou: Option<f64>,
    pub miou: Option<f64>,
}

pub fn write_trace_csv<W: Write>(w: &mut W, trace: &[TraceRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    writeln!(w, "iteration,loss_ce,loss_lovasz,loss_total,iou,miou")?;
    for r in trace {
        writeln!(
            w,
            "{},{:.9},{:.9},{:.9},{},{}",
            r.iteration,
            r.ce,
            r.lovasz,
            r.total,
            opt(r.iou),
            opt(r.miou)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub gaussians: Vec<SemanticGaussian>,
    pub predicted: OccupancyGrid,
    pub trace: Vec<TraceRow>,
    pub report: IouReport,
}

/// Unconstrained parameters of one Gaussian: mean, raw quaternion, log
/// scale, opacity logit and class logits.
#[derive(Debug, Clone)]
struct Params {
    mean: Vec3,
    rotation: [f64; 4],
    log_scale: Vec3,
    opacity_logit: f64,
    logits: Vec<f64>,
}

impl Params {
    fn from_gaussian(g: &SemanticGaussian) -> Self {
        Params {
            mean: g.mean(),
            rotation: g.rotation().to_array(),
            log_scale: g.scale().map(f64::ln),
            opacity_logit: logit(g.opacity()),
            logits: g.logits().to_vec(),
        }
    }

    fn gaussian(&self) -> Result<SemanticGaussian> {
        SemanticGaussian::new(
            self.mean,
            Quat::from_array(self.rotation),
            self.log_scale.map(f64::exp),
            sigmoid(self.opacity_logit),
            self.logits.clone(),
        )
    }
}

pub fn evaluate(pred: &OccupancyGrid, gt: &OccupancyGrid, empty_index: usize) -> Result<IouReport> {
    if pred.spec() != gt.spec() || pred.num_classes() != gt.num_classes() {
        return Err(Error::invalid("prediction and ground truth differ in grid spec or class count"));
    }
    let counts = confusion(&pred.to_labels(), &gt.to_labels(), gt.num_classes(), empty_index, None)?;
    Ok(iou_miou(&counts))
}

/// Plain gradient descent on Gaussian properties through the splatter with
/// loss `L_ce + λ·L_lov`. Quaternions are renormalized after every step.
pub fn fit(scene: &SceneArtifacts, cfg: &FitConfig) -> Result<FitResult> {
    let spec = scene.spec.grid;
    let nc = scene.spec.classes.len();
    let empty = scene.spec.classes.empty_index();
    let background = Background::new(empty, cfg.background);
    let cell = spec.voxel_size().max();
    let min_log_scale = DEFAULT_SCALE_FLOOR.ln();

    let init = initialize(scene, &cfg.init)?;
    let mut params: Vec<Params> = init.iter().map(Params::from_gaussian).collect();
    let mut trace = Vec::with_capacity(cfg.iterations);

    let forward = |gs: &[SemanticGaussian]| -> Result<OccupancyGrid> {
        let index = build_index(gs, cell, cfg.kappa)?;
        splat(gs, &spec, nc, &index, &background)
    };

    for it in 0..cfg.iterations {
        let gs: Vec<SemanticGaussian> = params
            .iter()
            .map(Params::gaussian)
            .collect::<Result<_>>()
            .map_err(|e| Error::Numerical {
                iteration: it,
                message: format!("parameters diverged: {e}"),
            })?;
        let index = build_index(&gs, cell, cfg.kappa)?;
        let pred = splat(&gs, &spec, nc, &index, &background)?;
        let ce = cross_entropy(&pred, &scene.gt)?;
        let lov = lovasz_softmax(&pred, &scene.gt, LovaszClasses::Present)?;
        let total = ce.value + cfg.lovasz_weight * lov.value;
        if !total.is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                message: format!("loss is {total}"),
            });
        }
        let (iou, miou) = if it % cfg.eval_every == 0 {
            let r = evaluate(&pred, &scene.gt, empty)?;
            (r.iou, r.miou)
        } else {
            (None, None)
        };
        trace.push(TraceRow {
            iteration: it,
            ce: ce.value,
            lovasz: lov.value,
            total,
            iou,
            miou,
        });

        let upstream: Vec<f64> = ce
            .grad
            .iter()
            .zip(&lov.grad)
            .map(|(a, b)| a + cfg.lovasz_weight * b)
            .collect();
        let grads = splat_backward(&gs, &spec, nc, &index, &upstream)?;
        for ((p, g), gr) in params.iter_mut().zip(&gs).zip(&grads) {
            let finite = gr.to_vec().iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Numerical {
                    iteration: it,
                    message: "non-finite gradient".into(),
                });
            }
            p.mean -= cfg.lr.mean * gr.mean;
            for k in 0..4 {
                p.rotation[k] -= cfg.lr.rotation * gr.rotation[k];
            }
            p.rotation = Quat::from_array(p.rotation)
                .normalized()
                .map_err(|_| Error::Numerical {
                    iteration: it,
                    message: "quaternion collapsed to zero".into(),
                })?
                .to_array();
            let s = g.scale();
            for k in 0..3 {
                p.log_scale[k] = (p.log_scale[k] - cfg.lr.scale_log * gr.scale[k] * s[k]).max(min_log_scale);
            }
            let o = g.opacity();
            p.opacity_logit -= cfg.lr.opacity_logit * gr.opacity * o * (1.0 - o);
            for (c, d) in p.logits.iter_mut().zip(&gr.logits) {
                *c -= cfg.lr.logits * d;
            }
        }
    }

    let gaussians: Vec<SemanticGaussian> = params
        .iter()
        .map(Params::gaussian)
        .collect::<Result<_>>()
        .map_err(|e| Error::Numerical {
            iteration: cfg.iterations,
            message: format!("parameters diverged: {e}"),
        })?;
    let predicted = forward(&gaussians)?;
    let report = evaluate(&predicted, &scene.gt, empty)?;
    Ok(FitResult {
        gaussians,
        predicted,
        trace,
        report,
    })
}

pub const FIT_GAUSSIANS_FILE: &str = "gaussians.goc";
pub const PRED_FILE: &str = "pred.ogr";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.csv";

/// `fit`: reads `scene` (a scene directory) and the fit parameters from the
/// config, writes the fitted Gaussians, predicted grid and metrics.
pub fn cmd_fit(config_path: &Path, out: &Path, seed: Option<u64>, dump_trace: bool) -> Result<FitResult> {
    let c = KvConfig::parse(&read_text(config_path)?)?;
    let mut cfg = FitConfig::from_kv(&c)?;
    if let Some(s) = seed {
        cfg.init.seed = s;
    }
    let scene = read_scene_dir(&resolve(config_path, &c.require("scene")?.value))?;
    let result = fit(&scene, &cfg)?;
    write_fit_outputs(out, &scene, &result, dump_trace)?;
    Ok(result)
}

pub fn write_fit_outputs(out: &Path, scene: &SceneArtifacts, r: &FitResult, dump_trace: bool) -> Result<()> {
    fs::create_dir_all(out).map_err(with_path(out))?;
    let nc = scene.spec.classes.len();
    write_file(&out.join(FIT_GAUSSIANS_FILE), |b| write_gaussians(b, &r.gaussians, nc))?;
    write_file(&out.join(PRED_FILE), |b| r.predicted.write(b))?;
    write_file(&out.join(METRICS_FILE), |b| {
        write_metrics_csv(b, &r.report, scene.spec.classes.names())
    })?;
    if dump_trace {
        write_file(&out.join(TRACE_FILE), |b| write_trace_csv(b, &r.trace))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward blocks

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardConfig {
    pub blocks: usize,
    pub init: InitSettings,
    pub kappa: f64,
    pub background: f64,
    pub depth_bins: usize,
    pub depth_max: f64,
    pub z_near: f64,
}

const FORWARD_KEYS: &[&str] = &[
    "scene",
    "weights",
    "random_weights_seed",
    "random_weights_gain",
    "query_dim",
    "hidden",
    "reference_points",
    "samples_per_reference",
    "conv_cell_size",
    "blocks",
    "gaussians",
    "sweeps",
    "init_voxel_size",
    "init_scale",
    "seed",
    "kappa",
    "background",
    "depth_bins",
    "depth_max",
    "z_near",
];

impl ForwardConfig {
    pub fn from_kv(c: &KvConfig) -> Result<Self> {
        c.check_known(FORWARD_KEYS)?;
        Ok(ForwardConfig {
            blocks: positive_usize(c, "blocks", 1)?,
            init: InitSettings::from_kv(c, 512)?,
            kappa: positive_f64(c, "kappa", DEFAULT_KAPPA)?,
            background: c.parse_or("background", DEFAULT_BACKGROUND)?,
            depth_bins: positive_usize(c, "depth_bins", DEFAULT_DEPTH_BINS)?,
            depth_max: positive_f64(c, "depth_max", DEFAULT_DEPTH_MAX)?,
            z_near: positive_f64(c, "z_near", DEFAULT_Z_NEAR)?,
        })
    }
}

/// Feature levels for every camera: scene features paired with depth
/// distributions from the aggregated LiDAR cloud.
pub fn camera_pyramids(
    scene: &SceneArtifacts,
    n_scales: usize,
    sweeps: usize,
    bins: DepthBins,
) -> Result<Vec<CameraPyramid>> {
    let cloud = aggregate_sweeps(&scene.sweeps.most_recent(sweeps))?;
    let cams = scene.spec.camera_models()?;
    cams.iter()
        .zip(&scene.pyramids)
        .map(|(cam, feats)| {
            if feats.len() < n_scales {
                return Err(Error::invalid(format!(
                    "scene pyramid has {} levels, weights need {n_scales}",
                    feats.len()
                )));
            }
            (0..n_scales)
                .map(|s| {
                    let depth = build_depth_distribution(&project_depth(&cloud, cam, s as u32, bins.d_max()), bins);
                    FeatureLevel::new(feats[s].clone(), depth)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub gaussians: Vec<SemanticGaussian>,
    pub predicted: OccupancyGrid,
}

/// Initialization, `B` refinement blocks, then splatting. Forward only.
pub fn forward(scene: &SceneArtifacts, weights: &BlockStack, cfg: &ForwardConfig) -> Result<ForwardResult> {
    let dims = weights.dims;
    let nc = scene.spec.classes.len();
    if dims.num_classes != nc {
        return Err(Error::invalid(format!(
            "weights expect {} classes, scene has {nc}",
            dims.num_classes
        )));
    }
    if let Some(p) = scene.pyramids.first() {
        if p[0].channels() != dims.channels {
            return Err(Error::invalid(format!(
                "weights expect {} feature channels, scene has {}",
                dims.channels,
                p[0].channels()
            )));
        }
    }
    let blocks = weights.for_block_count(cfg.blocks)?;
    let cameras = scene.spec.camera_models()?;
    let pyramids = camera_pyramids(
        scene,
        dims.n_scales,
        cfg.init.sweeps,
        DepthBins::new(cfg.depth_bins, cfg.depth_max)?,
    )?;
    let gs = initialize(scene, &cfg.init)?;
    let queries = init_queries(gs.len(), dims.query_dim, cfg.init.seed ^ 0x5155_4552_5953);
    let out = run_blocks(&gs, &queries, &cameras, &pyramids, &blocks, &dims, cfg.z_near)?;
    let background = Background::new(scene.spec.classes.empty_index(), cfg.background);
    let index = build_index(&out.gaussians, scene.spec.grid.voxel_size().max(), cfg.kappa)?;
    let predicted = splat(&out.gaussians, &scene.spec.grid, nc, &index, &background)?;
    Ok(ForwardResult {
        gaussians: out.gaussians,
        predicted,
    })
}

pub const WEIGHTS_FILE: &str = "weights.gw3d";

/// `forward`: loads `weights` (or draws random weights from
/// `random_weights_seed`, saving them to the output directory), runs the
/// blocks on `scene` and writes the refined Gaussians and predicted grid.
pub fn cmd_forward(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<ForwardResult> {
    let c = KvConfig::parse(&read_text(config_path)?)?;
    let mut cfg = ForwardConfig::from_kv(&c)?;
    if let Some(s) = seed {
        cfg.init.seed = s;
    }
    let scene = read_scene_dir(&resolve(config_path, &c.require("scene")?.value))?;
    fs::create_dir_all(out).map_err(with_path(out))?;
    let weights = match (c.get("weights")?, c.get("random_weights_seed")?) {
        (Some(w), None) => BlockStack::read(&mut open(&resolve(config_path, &w.value))?)?,
        (None, Some(e)) => {
            let dims = BlockDims {
                query_dim: positive_usize(&c, "query_dim", 16)?,
                channels: scene.spec.feature_channels,
                hidden: positive_usize(&c, "hidden", 32)?,
                num_classes: scene.spec.classes.len(),
                n_ref: positive_usize(&c, "reference_points", DEFAULT_REFERENCE_POINTS)?,
                n_samples: positive_usize(&c, "samples_per_reference", DEFAULT_SAMPLES_PER_REFERENCE)?,
                n_scales: scene.spec.pyramid_scales,
                cell_size: positive_f64(&c, "conv_cell_size", 1.0)?,
            };
            let stack = BlockStack::random(dims, cfg.blocks, e.parse()?, c.parse_or("random_weights_gain", 0.1)?);
            let mut bytes = Vec::new();
            stack.write(&mut bytes)?;
            write_file(&out.join(WEIGHTS_FILE), |b| {
                b.extend_from_slice(&bytes);
                Ok(())
            })?;
            // Run with the stored f32 values so the saved file reproduces this output.
            BlockStack::read(&mut bytes.as_slice())?
        }
        (Some(w), Some(_)) => return Err(w.error("give either `weights` or `random_weights_seed`, not both")),
        (None, None) => {
            return Err(Error::Config {
                line: 0,
                key: "weights".into(),
                message: "missing required key".into(),
            })
        }
    };
    let result = forward(&scene, &weights, &cfg)?;
    let nc = scene.spec.classes.len();
    write_file(&out.join(FIT_GAUSSIANS_FILE), |b| write_gaussians(b, &result.gaussians, nc))?;
    write_file(&out.join(PRED_FILE), |b| result.predicted.write(b))?;
    let report = evaluate(&result.predicted, &scene.gt, scene.spec.classes.empty_index())?;
    write_file(&out.join(METRICS_FILE), |b| {
        write_metrics_csv(b, &report, scene.spec.classes.names())
    })?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// Evaluation

/// `eval`: `pred` and `gt` grid paths, optional `classes` names and
/// `empty_class_index` (default 0). Writes `metrics.csv`.
pub fn cmd_eval(config_path: &Path, out: &Path) -> Result<IouReport> {
    let c = KvConfig::parse(&read_text(config_path)?)?;
    c.check_known(&["pred", "gt", "classes", "empty_class_index"])?;
    let pred = read_grid(&resolve(config_path, &c.require("pred")?.value))?;
    let gt = read_grid(&resolve(config_path, &c.require("gt")?.value))?;
    let empty = c.parse_or("empty_class_index", 0usize)?;
    let names: Vec<String> = match c.get("classes")? {
        Some(e) => e.fields().iter().map(|s| s.to_string()).collect(),
        None => (0..gt.num_classes()).map(|k| format!("class{k}")).collect(),
    };
    let report = evaluate(&pred, &gt, empty)?;
    fs::create_dir_all(out).map_err(with_path(out))?;
    write_file(&out.join(METRICS_FILE), |b| write_metrics_csv(b, &report, &names))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Multi-resolution splatting

/// Splats the same Gaussians onto each grid; all specs must share one extent.
pub fn splat_multires(
    gaussians: &[SemanticGaussian],
    num_classes: usize,
    specs: &[GridSpec],
    kappa: f64,
    background: &Background,
) -> Result<Vec<OccupancyGrid>> {
    if let Some(first) = specs.first() {
        for s in specs {
            let same = (s.origin() - first.origin()).amax() < 1e-9 && (s.extent_max() - first.extent_max()).amax() < 1e-9;
            if !same {
                return Err(Error::invalid("multi-resolution grids must share one extent"));
            }
        }
    }
    specs
        .iter()
        .map(|spec| {
            let index = build_index(gaussians, spec.voxel_size().max(), kappa)?;
            splat(gaussians, spec, num_classes, &index, background)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Agreement {
    /// Coarse voxels whose top-two logit gap exceeds the margin.
    pub confident: usize,
    /// Confident coarse voxels whose class has a maximal count among the 8 children.
    pub agreeing: usize,
}

impl Agreement {
    pub fn fraction(&self) -> Option<f64> {
        (self.confident > 0).then(|| self.agreeing as f64 / self.confident as f64)
    }
}

/// Majority-vote comparison of a coarse grid with a grid at twice its resolution.
pub fn majority_agreement(coarse: &OccupancyGrid, fine: &OccupancyGrid, margin: f64) -> Result<Agreement> {
    let (cs, fs_) = (coarse.spec(), fine.spec());
    let c = cs.counts();
    if fs_.counts() != [2 * c[0], 2 * c[1], 2 * c[2]] || (cs.origin() - fs_.origin()).amax() > 1e-9 {
        return Err(Error::invalid("fine grid must halve the coarse voxel size over the same extent"));
    }
    let nc = coarse.num_classes();
    let fine_labels = fine.to_labels();
    let mut out = Agreement {
        confident: 0,
        agreeing: 0,
    };
    for lin in 0..cs.num_voxels() {
        let z = coarse.voxel_logits(lin)?;
        let mut sorted = z.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted.len() > 1 && sorted[0] - sorted[1] <= margin {
            continue;
        }
        out.confident += 1;
        let label = crate::grid::argmax(z);
        let [x, y, zz] = cs.unlinear(lin);
        let mut votes = vec![0usize; nc];
        for d in 0..8 {
            let idx = [2 * x + (d >> 2), 2 * y + ((d >> 1) & 1), 2 * zz + (d & 1)];
            votes[fine_labels[fs_.linear(idx)] as usize] += 1;
        }
        if votes[label] == *votes.iter().max().expect("classes") {
            out.agreeing += 1;
        }
    }
    Ok(out)
}

pub fn grid_file(k: usize) -> String {
    format!("grid_{k}.ogr")
}

/// `splat-multires`: `gaussians` file, shared `extent_min`/`extent_max`, one
/// `resolution` line per output grid, optional `kappa`, `background`,
/// `empty_class_index`. Writes `grid_K.ogr` per resolution and, for each
/// consecutive pair at a 2× ratio, a line of `agreement.csv`.
pub fn cmd_splat_multires(config_path: &Path, out: &Path) -> Result<Vec<OccupancyGrid>> {
    let c = KvConfig::parse(&read_text(config_path)?)?;
    c.check_known(&[
        "gaussians",
        "extent_min",
        "extent_max",
        "resolution",
        "kappa",
        "background",
        "empty_class_index",
        "margin",
    ])?;
    let (gs, nc) = read_gaussian_file(&resolve(config_path, &c.require("gaussians")?.value))?;
    let min = Vec3::from_column_slice(&c.require("extent_min")?.numbers(3)?);
    let max = Vec3::from_column_slice(&c.require("extent_max")?.numbers(3)?);
    let res = c.all("resolution");
    if res.is_empty() {
        return Err(Error::Config {
            line: 0,
            key: "resolution".into(),
            message: "at least one resolution is required".into(),
        });
    }
    let specs: Vec<GridSpec> = res
        .iter()
        .map(|e| {
            let v = if e.fields().len() == 1 {
                Vec3::repeat(e.numbers(1)?[0])
            } else {
                Vec3::from_column_slice(&e.numbers(3)?)
            };
            GridSpec::from_extent(min, max, v).map_err(|err| e.error(err.to_string()))
        })
        .collect::<Result<_>>()?;
    let empty = c.parse_or("empty_class_index", 0usize)?;
    let background = Background::new(empty, c.parse_or("background", DEFAULT_BACKGROUND)?);
    let grids = splat_multires(&gs, nc, &specs, positive_f64(&c, "kappa", DEFAULT_KAPPA)?, &background)?;
    fs::create_dir_all(out).map_err(with_path(out))?;
    for (k, g) in grids.iter().enumerate() {
        write_file(&out.join(grid_file(k)), |b| g.write(b))?;
    }
    let margin = c.parse_or("margin", 0.1)?;
    let mut rows = String::from("coarse,fine,confident,agreeing,fraction\n");
    for k in 1..grids.len() {
        if let Ok(a) = majority_agreement(&grids[k - 1], &grids[k], margin) {
            let f = a.fraction().map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
            rows.push_str(&format!("{},{},{},{},{f}\n", k - 1, k, a.confident, a.agreeing));
        }
    }
    write_file(&out.join("agreement.csv"), |b| {
        b.extend_from_slice(rows.as_bytes());
        Ok(())
    })?;
    Ok(grids)
}

// ---------------------------------------------------------------------------
// Export

/// `export-ply`: `input` is a Gaussian dump (`GOC1`) or a grid (`OGR1`);
/// grids export their non-empty voxels (`empty_class_index`, default 0).
pub fn cmd_export_ply(config_path: &Path, out: &Path) -> Result<PathBuf> {
    let c = KvConfig::parse(&read_text(config_path)?)?;
    c.check_known(&["input", "empty_class_index"])?;
    let input = resolve(config_path, &c.require("input")?.value);
    let bytes = read_bytes(&input)?;
    fs::create_dir_all(out).map_err(with_path(out))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("export");
    let target = out.join(format!("{stem}.ply"));
    match bytes.get(..4) {
        Some(b"GOC1") => {
            let (gs, _) = read_gaussians(&mut bytes.as_slice())?;
            write_file(&target, |b| write_gaussians_ply(b, &gs))?;
        }
        Some(b"OGR1") => {
            let grid = OccupancyGrid::read(&mut bytes.as_slice())?;
            let empty = c.parse_or("empty_class_index", 0usize)?;
            write_file(&target, |b| write_grid_ply(b, &grid, empty))?;
        }
        _ => return Err(Error::format("PLY input", "expected a GOC1 or OGR1 file")),
    }
    Ok(target)
}
