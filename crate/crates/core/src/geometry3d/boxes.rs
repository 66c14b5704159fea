use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Wraps an angle into `[−π, π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut t = theta - two_pi * ((theta + PI) / two_pi).floor();
    if t >= PI {
        t -= two_pi;
    }
    if t < -PI {
        t += two_pi;
    }
    t
}

/// Rotates `v` about +z by `theta`.
pub fn rotate_z(v: Vec3, theta: f64) -> Vec3 {
    let (s, c) = theta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// 7-DoF box: center, extents `(w, l, h)` along the box's local x/y/z, yaw about +z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox3D {
    pub center: Vec3,
    pub extents: Vec3,
    pub yaw: f64,
}

impl OrientedBox3D {
    pub fn new(center: Vec3, extents: Vec3, yaw: f64) -> Result<Self> {
        if extents.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Input(format!("box extents must be positive, got {extents:?}")));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(Error::Input("box has non-finite center or yaw".into()));
        }
        Ok(Self {
            center,
            extents,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn volume(&self) -> f64 {
        self.extents[0] * self.extents[1] * self.extents[2]
    }

    /// Point expressed in the box's yaw-aligned frame, origin at the center.
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        rotate_z(sub(p, self.center), -self.yaw)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.contains_with_margin(p, 0.0)
    }

    /// Containment in the box grown by `margin` on every face.
    pub fn contains_with_margin(&self, p: Vec3, margin: f64) -> bool {
        let l = self.to_local(p);
        (0..3).all(|k| l[k].abs() <= self.extents[k] / 2.0 + margin)
    }

    /// Bird's-eye corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hw, hl) = (self.extents[0] / 2.0, self.extents[1] / 2.0);
        let local = [[hw, hl], [-hw, hl], [-hw, -hl], [hw, -hl]];
        local.map(|[x, y]| {
            let r = rotate_z([x, y, 0.0], self.yaw);
            [r[0] + self.center[0], r[1] + self.center[1]]
        })
    }

    pub fn z_range(&self) -> (f64, f64) {
        let hh = self.extents[2] / 2.0;
        (self.center[2] - hh, self.center[2] + hh)
    }

    /// Axis-aligned bounding box `(min, max)` of the oriented box.
    pub fn aabb(&self) -> (Vec3, Vec3) {
        let c = self.bev_corners();
        let (z0, z1) = self.z_range();
        let mut lo = [f64::INFINITY, f64::INFINITY, z0];
        let mut hi = [f64::NEG_INFINITY, f64::NEG_INFINITY, z1];
        for p in c {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }
}

/// A box with its class id.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub bbox: OrientedBox3D,
    pub label: usize,
}

impl LabeledBox {
    /// `[x, y, z, w, l, h, theta, class]`.
    pub fn to_tuple(&self) -> [f64; 8] {
        let b = &self.bbox;
        [
            b.center[0],
            b.center[1],
            b.center[2],
            b.extents[0],
            b.extents[1],
            b.extents[2],
            b.yaw,
            self.label as f64,
        ]
    }

    pub fn from_tuple(t: &[f64]) -> Result<Self> {
        if t.len() != 8 {
            return Err(Error::Input(format!("box tuple needs 8 values, got {}", t.len())));
        }
        let label = t[7];
        if !(label >= 0.0 && label.fract() == 0.0 && label < 1e9) {
            return Err(Error::Input(format!("class id must be a non-negative integer, got {label}")));
        }
        Ok(Self {
            bbox: OrientedBox3D::new([t[0], t[1], t[2]], [t[3], t[4], t[5]], t[6])?,
            label: label as usize,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_wraps_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), -PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_angle(0.25), 0.25);
        for k in -20..20 {
            let t = normalize_angle(k as f64 * 0.7);
            assert!((-PI..PI).contains(&t));
        }
    }

    #[test]
    fn rejects_degenerate_extents() {
        assert!(OrientedBox3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0).is_err());
        assert!(OrientedBox3D::new([0.0; 3], [1.0, -1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn containment_respects_yaw() {
        let b = OrientedBox3D::new([1.0, 1.0, 0.0], [4.0, 1.0, 1.0], PI / 2.0).unwrap();
        assert!(b.contains([1.0, 2.9, 0.0]));
        assert!(!b.contains([2.9, 1.0, 0.0]));
        assert!(b.contains_with_margin([1.0, 3.1, 0.0], 0.2));
    }
}
