use serde::{Deserialize, Serialize};

use super::boxes::Vec3;
use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

/// Points with homogeneous depth at or below this are behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole camera: intrinsics `K`, world-to-camera extrinsics `[R|t]` and
/// image size in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub k: Mat3,
    pub r: Mat3,
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
}

/// Result of projecting one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// `(u / W0, v / H0)`.
    pub ref_point: [f64; 2],
    /// Pixel coordinates `(u, v)`.
    pub pixel: [f64; 2],
    /// Homogeneous depth `w̃`.
    pub depth: f64,
    pub valid: bool,
}

impl CameraModel {
    pub fn new(k: Mat3, r: Mat3, t: Vec3, width: usize, height: usize) -> Result<Self> {
        let cam = Self { k, r, t, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if (self.k[2][2] - 1.0).abs() > 1e-12 || self.k[2][0] != 0.0 || self.k[2][1] != 0.0 {
            return Err(Error::Input("intrinsic matrix must have last row [0, 0, 1]".into()));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::Input("image size must be at least 1x1".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| self.r[i][k] * self.r[j][k]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (d - target).abs() > 1e-9 {
                    return Err(Error::Input("rotation is not orthonormal".into()));
                }
            }
        }
        let all = self.k.iter().chain(self.r.iter()).flatten().chain(self.t.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("camera has non-finite entries".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with world +z as up. Camera axes
    /// follow the image convention: x right, y down, z forward.
    pub fn look_at(eye: Vec3, target: Vec3, k: Mat3, width: usize, height: usize) -> Result<Self> {
        let f = normalize(super::boxes::sub(target, eye))?;
        let up = [0.0, 0.0, 1.0];
        let right = normalize(cross(f, up))?;
        let down = cross(f, right);
        let r = [right, down, f];
        let t = [
            -(0..3).map(|i| r[0][i] * eye[i]).sum::<f64>(),
            -(0..3).map(|i| r[1][i] * eye[i]).sum::<f64>(),
            -(0..3).map(|i| r[2][i] * eye[i]).sum::<f64>(),
        ];
        Self::new(k, r, t, width, height)
    }

    /// Projects a homogeneous point `[x, y, z, w]` through `K [R|t]`.
    pub fn project_homogeneous(&self, p: [f64; 4]) -> Projection {
        let mut cam = [0.0; 3];
        for (i, c) in cam.iter_mut().enumerate() {
            *c = self.r[i][0] * p[0] + self.r[i][1] * p[1] + self.r[i][2] * p[2] + self.t[i] * p[3];
        }
        let mut h = [0.0; 3];
        for (i, v) in h.iter_mut().enumerate() {
            *v = self.k[i][0] * cam[0] + self.k[i][1] * cam[1] + self.k[i][2] * cam[2];
        }
        let depth = h[2];
        if depth <= MIN_DEPTH {
            return Projection {
                ref_point: [f64::NAN; 2],
                pixel: [f64::NAN; 2],
                depth,
                valid: false,
            };
        }
        let (u, v) = (h[0] / depth, h[1] / depth);
        let rp = [u / self.width as f64, v / self.height as f64];
        let valid = (0.0..=1.0).contains(&rp[0]) && (0.0..=1.0).contains(&rp[1]);
        Projection {
            ref_point: rp,
            pixel: [u, v],
            depth,
            valid,
        }
    }

    pub fn project_point(&self, p: Vec3) -> Projection {
        self.project_homogeneous([p[0], p[1], p[2], 1.0])
    }
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: Vec3) -> Result<Vec3> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        return Err(Error::Input("degenerate camera direction".into()));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const I3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn cam() -> CameraModel {
        let k = [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        CameraModel::new(k, I3, [0.0; 3], 100, 100).unwrap()
    }

    #[test]
    fn principal_axis_projects_to_center() {
        let p = cam().project_point([0.0, 0.0, 1.0]);
        assert!(p.valid);
        assert_eq!(p.ref_point, [0.5, 0.5]);
    }

    #[test]
    fn border_point_is_valid() {
        // u = 100*0.5 + 50 = 100 -> 100/100 = 1.0
        let p = cam().project_point([0.5, 0.0, 1.0]);
        assert!(p.valid);
        assert_eq!(p.ref_point, [1.0, 0.5]);
        assert!(!cam().project_point([0.51, 0.0, 1.0]).valid);
    }

    #[test]
    fn behind_camera_is_invalid() {
        assert!(!cam().project_point([0.0, 0.0, -1.0]).valid);
        assert!(!cam().project_point([0.0, 0.0, 0.0]).valid);
    }

    #[test]
    fn validation() {
        let mut bad = cam();
        bad.k[2][2] = 2.0;
        assert!(bad.validate().is_err());
        let mut bad = cam();
        bad.r[0][0] = 1.1;
        assert!(bad.validate().is_err());
        assert!(CameraModel::new(cam().k, I3, [0.0; 3], 0, 10).is_err());
    }

    #[test]
    fn look_at_centers_target() {
        let c = CameraModel::look_at([0.0, -3.0, 1.5], [0.0, 0.0, 1.0], cam().k, 100, 100).unwrap();
        let p = c.project_point([0.0, 0.0, 1.0]);
        assert!(p.valid);
        assert!((p.ref_point[0] - 0.5).abs() < 1e-12 && (p.ref_point[1] - 0.5).abs() < 1e-12);
        // a point above the target lands in the upper half of the image
        assert!(c.project_point([0.0, 0.0, 1.5]).ref_point[1] < 0.5);
    }

    proptest! {
        #[test]
        fn projection_is_scale_invariant_in_homogeneous_coords(
            x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.5f64..5.0, lambda in 0.01f64..100.0,
        ) {
            let c = CameraModel::look_at([0.3, -3.0, 1.2], [0.0, 0.0, 1.0], cam().k, 100, 100).unwrap();
            let a = c.project_homogeneous([x, y, z, 1.0]);
            let b = c.project_homogeneous([lambda * x, lambda * y, lambda * z, lambda]);
            prop_assert_eq!(a.valid, b.valid);
            if a.depth > MIN_DEPTH {
                prop_assert!((a.ref_point[0] - b.ref_point[0]).abs() < 1e-9);
                prop_assert!((a.ref_point[1] - b.ref_point[1]).abs() < 1e-9);
            }
        }
    }
}
