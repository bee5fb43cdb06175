//! Semantic Gaussian scene representation and pointwise evaluation.
//!
//! A Gaussian carries a mean, a unit quaternion rotation, per-axis scales,
//! an opacity in `[0, 1]` and one unnormalized logit per semantic class.
//! Its value at `x` is `opacity * exp(-0.5 * (x - m)^T Σ^-1 (x - m)) * logits`
//! with `Σ = R diag(s)^2 R^T`.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};

use crate::binio;
use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Lower bound applied to every scale axis, in meters.
pub const DEFAULT_SCALE_FLOOR: f64 = 1e-4;

/// Properties stored per Gaussian besides the class logits:
/// mean (3), rotation (4), scale (3), opacity (1).
pub const GEOMETRY_PROPERTY_COUNT: usize = 11;

/// Quaternion stored as `(w, x, y, z)`. Not necessarily unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Quat::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Result<Quat> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid(format!(
                "quaternion {:?} has zero or non-finite norm",
                self.to_array()
            )));
        }
        Ok(Quat::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(self, rhs: Quat) -> Quat {
        let (a, b) = (self, rhs);
        Quat::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn neg(self) -> Quat {
        Quat::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Rotation matrix of a quaternion. The input is normalized first.
pub fn quat_to_rot(r: Quat) -> Result<Mat3> {
    let q = r.normalized()?;
    Ok(unit_quat_to_rot(q))
}

fn unit_quat_to_rot(q: Quat) -> Mat3 {
    let Quat { w, x, y, z } = q;
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

/// Pulls a gradient with respect to the rotation matrix back to the raw
/// (unnormalized) quaternion that produced it.
pub fn rot_grad_to_quat(raw: Quat, d_rot: &Mat3) -> Result<[f64; 4]> {
    let n = raw.norm();
    let q = raw.normalized()?;
    let Quat { w, x, y, z } = q;
    let g = |r: usize, c: usize| d_rot[(r, c)];

    // dR/dq for each entry, accumulated against dL/dR.
    let gw = g(0, 1) * (-2.0 * z) + g(0, 2) * (2.0 * y) + g(1, 0) * (2.0 * z) + g(1, 2) * (-2.0 * x)
        + g(2, 0) * (-2.0 * y)
        + g(2, 1) * (2.0 * x);
    let gx = g(0, 1) * (2.0 * y) + g(0, 2) * (2.0 * z) + g(1, 0) * (2.0 * y) + g(1, 1) * (-4.0 * x)
        + g(1, 2) * (-2.0 * w)
        + g(2, 0) * (2.0 * z)
        + g(2, 1) * (2.0 * w)
        + g(2, 2) * (-4.0 * x);
    let gy = g(0, 0) * (-4.0 * y) + g(0, 1) * (2.0 * x) + g(0, 2) * (2.0 * w) + g(1, 0) * (2.0 * x)
        + g(1, 2) * (2.0 * z)
        + g(2, 0) * (-2.0 * w)
        + g(2, 1) * (2.0 * z)
        + g(2, 2) * (-4.0 * y);
    let gz = g(0, 0) * (-4.0 * z) + g(0, 1) * (-2.0 * w) + g(0, 2) * (2.0 * x) + g(1, 0) * (2.0 * w)
        + g(1, 1) * (-4.0 * z)
        + g(1, 2) * (2.0 * y)
        + g(2, 0) * (2.0 * x)
        + g(2, 1) * (2.0 * y);

    // Project out the radial component: d(q/|q|)/dq = (I - q̂ q̂^T) / |q|.
    let dot = gw * w + gx * x + gy * y + gz * z;
    Ok([
        (gw - dot * w) / n,
        (gx - dot * x) / n,
        (gy - dot * y) / n,
        (gz - dot * z) / n,
    ])
}

/// Ordered semantic class labels with a designated empty class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    names: Vec<String>,
    empty_index: usize,
}

impl ClassSet {
    pub fn new(names: Vec<String>, empty_index: usize) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("class set must not be empty"));
        }
        if empty_index >= names.len() {
            return Err(Error::invalid(format!(
                "empty index {empty_index} out of range for {} classes",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::invalid(format!("duplicate class name `{n}`")));
            }
        }
        Ok(ClassSet { names, empty_index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn empty_index(&self) -> usize {
        self.empty_index
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Symmetric positive-definite 3×3 covariance, `R diag(s)^2 R^T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance(Mat3);

impl Covariance {
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }
}

pub fn covariance(r: Quat, s: Vec3) -> Result<Covariance> {
    let rot = quat_to_rot(r)?;
    let s = floor_scale(s, DEFAULT_SCALE_FLOOR);
    let d = Mat3::from_diagonal(&s.component_mul(&s));
    let mut m = rot * d * rot.transpose();
    // Symmetrize away the rounding asymmetry of the triple product.
    for i in 0..3 {
        for j in (i + 1)..3 {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    Ok(Covariance(m))
}

pub fn floor_scale(s: Vec3, floor: f64) -> Vec3 {
    s.map(|v| if v.is_nan() { floor } else { v.max(floor) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGaussian {
    mean: Vec3,
    rotation: Quat,
    scale: Vec3,
    opacity: f64,
    logits: Vec<f64>,
}

impl SemanticGaussian {
    /// Builds a Gaussian, normalizing the rotation and flooring the scale.
    pub fn new(mean: Vec3, rotation: Quat, scale: Vec3, opacity: f64, logits: Vec<f64>) -> Result<Self> {
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite Gaussian mean"));
        }
        if !scale.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite Gaussian scale"));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::invalid(format!("opacity {opacity} outside [0, 1]")));
        }
        if logits.is_empty() {
            return Err(Error::invalid("Gaussian needs at least one class logit"));
        }
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite Gaussian logits"));
        }
        Ok(SemanticGaussian {
            mean,
            rotation: rotation.normalized()?,
            scale: floor_scale(scale, DEFAULT_SCALE_FLOOR),
            opacity,
            logits,
        })
    }

    pub fn mean(&self) -> Vec3 {
        self.mean
    }

    pub fn rotation(&self) -> Quat {
        self.rotation
    }

    pub fn scale(&self) -> Vec3 {
        self.scale
    }

    pub fn opacity(&self) -> f64 {
        self.opacity
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    pub fn property_count(&self) -> usize {
        GEOMETRY_PROPERTY_COUNT + self.logits.len()
    }

    pub fn max_scale(&self) -> f64 {
        self.scale.max()
    }

    pub fn covariance(&self) -> Covariance {
        covariance(self.rotation, self.scale).expect("stored rotation is unit length")
    }

    pub fn with_mean(mut self, mean: Vec3) -> Self {
        self.mean = mean;
        self
    }

    /// Flat property vector `[m(3), r(4), s(3), σ, c(|C|)]`.
    pub fn to_properties(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.property_count());
        out.extend(self.mean.iter());
        out.extend(self.rotation.to_array());
        out.extend(self.scale.iter());
        out.push(self.opacity);
        out.extend(&self.logits);
        out
    }

    pub fn from_properties(props: &[f64], num_classes: usize) -> Result<Self> {
        if props.len() != GEOMETRY_PROPERTY_COUNT + num_classes {
            return Err(Error::invalid(format!(
                "expected {} properties, got {}",
                GEOMETRY_PROPERTY_COUNT + num_classes,
                props.len()
            )));
        }
        SemanticGaussian::new(
            Vec3::new(props[0], props[1], props[2]),
            Quat::new(props[3], props[4], props[5], props[6]),
            Vec3::new(props[7], props[8], props[9]),
            props[10],
            props[11..].to_vec(),
        )
    }

    pub fn prepare(&self) -> PreparedGaussian<'_> {
        PreparedGaussian {
            mean: self.mean,
            rot: unit_quat_to_rot(self.rotation),
            inv_scale: self.scale.map(|s| 1.0 / s),
            opacity: self.opacity,
            logits: &self.logits,
        }
    }
}

/// A Gaussian with its rotation matrix and inverse scales precomputed.
///
/// Every evaluation path goes through here so that splatting and direct
/// evaluation produce bit-identical values.
#[derive(Debug, Clone)]
pub struct PreparedGaussian<'a> {
    pub mean: Vec3,
    pub rot: Mat3,
    pub inv_scale: Vec3,
    pub opacity: f64,
    pub logits: &'a [f64],
}

impl PreparedGaussian<'_> {
    /// Coordinates of `x - m` in the Gaussian's principal frame.
    #[inline]
    pub fn local(&self, x: &Vec3) -> Vec3 {
        self.rot.tr_mul(&(x - self.mean))
    }

    /// Squared Mahalanobis distance via `Σ^-1 = R diag(1/s^2) R^T`.
    #[inline]
    pub fn mahalanobis_sq(&self, x: &Vec3) -> f64 {
        let y = self.local(x);
        let a = y.x * self.inv_scale.x;
        let b = y.y * self.inv_scale.y;
        let c = y.z * self.inv_scale.z;
        a * a + b * b + c * c
    }

    /// Scalar weight `σ exp(-0.5 d^2)` multiplying the logits.
    #[inline]
    pub fn weight(&self, x: &Vec3) -> f64 {
        self.opacity * (-0.5 * self.mahalanobis_sq(x)).exp()
    }
}

/// Per-class value of `g` at `x`.
pub fn gaussian_eval(g: &SemanticGaussian, x: &Vec3) -> Vec<f64> {
    let p = g.prepare();
    let w = p.weight(x);
    p.logits.iter().map(|c| w * c).collect()
}

const GAUSSIAN_MAGIC: &[u8; 4] = b"GOC1";

/// Writes the `GOC1` dump: magic, u32 count, u32 class count, then the
/// `11 + |C|` properties of each Gaussian as little-endian f32.
pub fn write_gaussians<W: Write>(w: &mut W, gaussians: &[SemanticGaussian], num_classes: usize) -> Result<()> {
    binio::write_magic(w, GAUSSIAN_MAGIC)?;
    binio::write_u32(w, binio::to_u32(gaussians.len(), "Gaussian count")?)?;
    binio::write_u32(w, binio::to_u32(num_classes, "class count")?)?;
    for g in gaussians {
        if g.num_classes() != num_classes {
            return Err(Error::invalid(format!(
                "Gaussian has {} classes, dump declares {num_classes}",
                g.num_classes()
            )));
        }
        for v in g.to_properties() {
            binio::write_f32(w, v as f32)?;
        }
    }
    Ok(())
}

pub fn read_gaussians<R: Read>(r: &mut R) -> Result<(Vec<SemanticGaussian>, usize)> {
    binio::expect_magic(r, GAUSSIAN_MAGIC, "GOC1")?;
    let count = binio::read_u32(r)? as usize;
    let num_classes = binio::read_u32(r)? as usize;
    if num_classes == 0 {
        return Err(Error::format("GOC1", "zero classes"));
    }
    let d = GEOMETRY_PROPERTY_COUNT + num_classes;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    let mut props = vec![0.0f64; d];
    for i in 0..count {
        for p in props.iter_mut() {
            *p = binio::read_f32(r)? as f64;
        }
        // f32 rounding can push opacity a hair outside [0, 1].
        props[10] = props[10].clamp(0.0, 1.0);
        let g = SemanticGaussian::from_properties(&props, num_classes)
            .map_err(|e| Error::format("GOC1", format!("Gaussian {i}: {e}")))?;
        out.push(g);
    }
    Ok((out, num_classes))
}
