//! Pinhole cameras with world→camera extrinsics.
//!
//! Pixel `(u, v)` is column, row; its centre sits at `(u + 0.5, v + 0.5)`.
//! Camera axes follow the usual vision convention: x right, y down, z
//! forward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World→camera rotation.
    pub rotation: Mat3,
    /// World→camera translation.
    pub translation: Vec3,
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_t_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j][i] = v;
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn normalize(v: &Vec3) -> Vec3 {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Rotation matrix for an axis-angle vector (Rodrigues' formula).
pub fn rodrigues(w: &Vec3) -> Mat3 {
    let theta = dot(w, w).sqrt();
    if theta < 1e-12 {
        // First-order expansion keeps the map smooth through zero.
        return [
            [1.0, -w[2], w[1]],
            [w[2], 1.0, -w[0]],
            [-w[1], w[0], 1.0],
        ];
    }
    let k = [w[0] / theta, w[1] / theta, w[2] / theta];
    let (s, c) = theta.sin_cos();
    let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
    let kx2 = mat_mul(&kx, &kx);
    let mut r = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += s * kx[i][j] + (1.0 - c) * kx2[i][j];
        }
    }
    r
}

/// Axis-angle vector of a rotation matrix; inverse of [`rodrigues`] for
/// angles in `[0, π)`.
pub fn log_rotation(r: &Mat3) -> Vec3 {
    let cos = ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let v = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if theta < 1e-9 {
        return [v[0] / 2.0, v[1] / 2.0, v[2] / 2.0];
    }
    let f = theta / (2.0 * theta.sin());
    [v[0] * f, v[1] * f, v[2] * f]
}

impl CameraParams {
    /// Camera at `eye` looking at `target`, image-down along world `-up`.
    pub fn look_at(fx: f64, fy: f64, cx: f64, cy: f64, eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = normalize(&[target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
        let x = normalize(&cross(&z, &up));
        let y = cross(&z, &x);
        let rotation = [x, y, z];
        let t = mat_vec(&rotation, &eye);
        CameraParams {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        let d = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        mat_t_vec(&self.rotation, &d)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.camera_to_world(&[0.0, 0.0, 0.0])
    }

    /// Projects a world point to continuous pixel coordinates and depth.
    /// Returns `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c[2] <= 0.0 {
            return None;
        }
        let u = self.fx * c[0] / c[2] + self.cx - 0.5;
        let v = self.fy * c[1] / c[2] + self.cy - 0.5;
        Some((u, v, c[2]))
    }

    /// Lifts pixel `(u, v)` at camera-frame depth `depth` into the world.
    /// Returns `None` when the depth is not positive.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Option<Vec3> {
        if depth <= 0.0 || !depth.is_finite() {
            return None;
        }
        let pc = [
            depth * (u + 0.5 - self.cx) / self.fx,
            depth * (v + 0.5 - self.cy) / self.fy,
            depth,
        ];
        Some(self.camera_to_world(&pc))
    }

    /// World-space direction of the ray through pixel centre `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let d = [(u + 0.5 - self.cx) / self.fx, (v + 0.5 - self.cy) / self.fy, 1.0];
        (self.center(), mat_t_vec(&self.rotation, &d))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Contract(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let mut off = 0.0f64;
        for (i, row) in rtr.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                off = off.max((v - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        if off > 1e-5 || (det(&self.rotation) - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!(
                "rotation is not orthonormal (max |RᵀR − I| = {off:.2e}, det = {:.6})",
                det(&self.rotation)
            )));
        }
        Ok(())
    }

    /// One line: `fx fy cx cy r00 .. r22 t0 t1 t2`.
    pub fn to_text(&self) -> String {
        let mut vals = vec![self.fx, self.fy, self.cx, self.cy];
        vals.extend(self.rotation.iter().flatten());
        vals.extend(self.translation);
        let mut s = vals.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Format(format!("camera: bad number `{t}`: {e}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 16 {
            return Err(Error::Format(format!(
                "camera: expected 16 numbers, found {}",
                vals.len()
            )));
        }
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            rotation[i].copy_from_slice(&vals[4 + 3 * i..7 + 3 * i]);
        }
        Ok(CameraParams {
            fx: vals[0],
            fy: vals[1],
            cx: vals[2],
            cy: vals[3],
            rotation,
            translation: [vals[13], vals[14], vals[15]],
        })
    }
}
