use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-12;

/// A proper rotation followed by a translation: `r' = R·r + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl RigidTransform {
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|k| rotation[k][a] * rotation[k][b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                if (dot - expect).abs() > ORTHO_TOL {
                    return Err(Error::invalid("non-orthogonal rotation"));
                }
            }
        }
        if (det3(&rotation) - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid("rotation determinant is not +1"));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rotation by `angle` radians about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Result<Self> {
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid("rotation axis must be non-zero"));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let q = [c, s * axis[0] / norm, s * axis[1] / norm, s * axis[2] / norm];
        Self::new(quat_to_matrix(q), translation)
    }

    /// Uniformly random rotation with a Gaussian translation of scale `shift`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, shift: f64) -> Self {
        let mut q = [0.0; 4];
        loop {
            for v in q.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-6 {
                q.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
        let mut t = [0.0; 3];
        for v in t.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = shift * z;
        }
        Self::new(quat_to_matrix(q), t).expect("unit quaternion yields a proper rotation")
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> &[f64; 3] {
        &self.translation
    }

    pub fn apply(&self, r: &[f64; 3]) -> [f64; 3] {
        let m = &self.rotation;
        let mut out = [0.0; 3];
        for (a, o) in out.iter_mut().enumerate() {
            *o = m[a][0] * r[0] + m[a][1] * r[1] + m[a][2] * r[2] + self.translation[a];
        }
        out
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn quat_to_matrix([w, x, y, z]: [f64; 4]) -> [[f64; 3]; 3] {
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}
