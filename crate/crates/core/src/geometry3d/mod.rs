//! Oriented-box algebra: camera projection, face-distance encoding, center
//! updates, centerness and exact rotated 3D IoU.

mod boxes;
mod camera;
mod deltas;
mod iou;

pub use boxes::{add, distance, normalize_angle, rotate_z, sub, LabeledBox, OrientedBox3D, Vec3};
pub use camera::{CameraModel, Mat3, Projection, MIN_DEPTH};
pub use deltas::{apply_center_update, centerness_target, decode_box, encode_deltas, DeltaSextet};
pub use iou::{bev_intersection_area, clip_convex, intersection_volume, polygon_area, rotated_iou3d};
