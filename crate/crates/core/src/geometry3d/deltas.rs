use serde::{Deserialize, Serialize};

use super::boxes::{add, rotate_z, OrientedBox3D, Vec3};
use crate::error::Result;

/// Signed distances from a point to the six faces of a yaw-aligned box:
/// `(+x, −x, +y, −y, +z, −z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSextet(pub [f64; 6]);

impl DeltaSextet {
    /// Box extents `(w, l, h)` implied by opposite-face distances.
    pub fn extents(&self) -> Vec3 {
        let d = &self.0;
        [d[0] + d[1], d[2] + d[3], d[4] + d[5]]
    }

    /// Shift from the point to the box center, in the box frame.
    pub fn local_shift(&self) -> Vec3 {
        let d = &self.0;
        [(d[0] - d[1]) / 2.0, (d[2] - d[3]) / 2.0, (d[4] - d[5]) / 2.0]
    }
}

/// Face distances of `proposal` with respect to `b`, measured in the box's
/// yaw-aligned frame.
pub fn encode_deltas(b: &OrientedBox3D, proposal: Vec3) -> DeltaSextet {
    let l = b.to_local(proposal);
    let [w, len, h] = b.extents;
    DeltaSextet([
        w / 2.0 - l[0],
        l[0] + w / 2.0,
        len / 2.0 - l[1],
        l[1] + len / 2.0,
        h / 2.0 - l[2],
        l[2] + h / 2.0,
    ])
}

/// Moves `proposal` by half the opposite-face imbalance, rotated by `yaw`.
pub fn apply_center_update(proposal: Vec3, deltas: &DeltaSextet, yaw: f64) -> Vec3 {
    add(proposal, rotate_z(deltas.local_shift(), yaw))
}

/// Box implied by a point, its face distances and a yaw.
pub fn decode_box(proposal: Vec3, deltas: &DeltaSextet, yaw: f64) -> Result<OrientedBox3D> {
    OrientedBox3D::new(apply_center_update(proposal, deltas, yaw), deltas.extents(), yaw)
}

/// Product over axes of `min/max` of opposite-face distances; zero when the
/// point is on or outside any face.
pub fn centerness_target(d: &DeltaSextet) -> f64 {
    if d.0.iter().any(|&v| !(v > 0.0)) {
        return 0.0;
    }
    (0..3)
        .map(|k| {
            let (a, b) = (d.0[2 * k], d.0[2 * k + 1]);
            a.min(b) / a.max(b)
        })
        .product()
}
