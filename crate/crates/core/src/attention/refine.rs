use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussians::{floor_scale, Quat, SemanticGaussian, Vec3, DEFAULT_SCALE_FLOOR, GEOMETRY_PROPERTY_COUNT};

/// Two-layer perceptron `m → h → d` with a ReLU hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            w1: DMatrix::zeros(hidden, input),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(output, hidden),
            b2: DVector::zeros(output),
        }
    }

    pub fn forward(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        let h = self.w1.nrows();
        if self.w1.ncols() != q.len() || self.b1.len() != h || self.w2.ncols() != h || self.b2.len() != self.w2.nrows() {
            return Err(Error::invalid(format!(
                "MLP shapes w1 {:?}, b1 {}, w2 {:?}, b2 {} do not fit a query of dimension {}",
                self.w1.shape(),
                self.b1.len(),
                self.w2.shape(),
                self.b2.len(),
                q.len()
            )));
        }
        let hidden = (&self.w1 * q + &self.b1).map(|v| v.max(0.0));
        Ok(&self.w2 * hidden + &self.b2)
    }
}

/// Opacity is kept away from 0 and 1 before taking its logit.
const OPACITY_EPS: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (p / (1.0 - p)).ln()
}

/// Applies property deltas `[Δm(3), Δr(4), Δlog s(3), Δlogit σ, Δc(|C|)]` and
/// re-imposes the constraints. A zero delta leaves its property untouched.
pub fn apply_deltas(g: &SemanticGaussian, delta: &[f64]) -> Result<SemanticGaussian> {
    let nc = g.num_classes();
    if delta.len() != GEOMETRY_PROPERTY_COUNT + nc {
        return Err(Error::invalid(format!(
            "delta has {} entries, Gaussian has {} properties",
            delta.len(),
            GEOMETRY_PROPERTY_COUNT + nc
        )));
    }
    if !delta.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite property delta"));
    }
    let mean = g.mean() + Vec3::new(delta[0], delta[1], delta[2]);

    let dr = &delta[3..7];
    let rotation = if dr.iter().all(|v| *v == 0.0) {
        g.rotation()
    } else {
        let r = g.rotation();
        let cand = Quat::new(r.w + dr[0], r.x + dr[1], r.y + dr[2], r.z + dr[3]);
        // A delta that cancels the quaternion keeps the previous rotation.
        cand.normalized().unwrap_or(r)
    };

    let s = g.scale();
    let scale = floor_scale(
        Vec3::from_fn(|k, _| if delta[7 + k] == 0.0 { s[k] } else { (s[k].ln() + delta[7 + k]).exp() }),
        DEFAULT_SCALE_FLOOR,
    );

    let opacity = if delta[10] == 0.0 {
        g.opacity()
    } else {
        sigmoid(logit(g.opacity()) + delta[10])
    };

    let logits = g.logits().iter().zip(&delta[11..]).map(|(c, d)| c + d).collect();
    SemanticGaussian::new(mean, rotation, scale, opacity, logits)
}

/// Decodes the query through the MLP and applies the result as property deltas.
pub fn refine(g: &SemanticGaussian, q: &DVector<f64>, mlp: &Mlp) -> Result<SemanticGaussian> {
    let delta = mlp.forward(q)?;
    apply_deltas(g, delta.as_slice())
}
