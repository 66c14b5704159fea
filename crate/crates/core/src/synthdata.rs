//! Synthetic indoor scenes and their on-disk archive format.
//!
//! A scene is a room with a few non-overlapping furniture boxes resting on
//! the floor. Points are sampled just inside each box surface and coloured
//! by class, plus sparse floor and wall clutter. A pinhole camera sits on a
//! wall looking at the objects.
//!
//! Archive layout, one directory per scene:
//!
//! - `points.txt`: one `x y z r g b` line per point, LF endings
//! - `camera.json`: `K` and `R` as 9 row-major reals, `t` (3), `W0`, `H0`
//! - `boxes.json`: `boxes` as `[x, y, z, w, l, h, theta, class]` tuples
//! - `meta.json`: `scene_id`, `seed`, `format_version`
//!
//! Reals are written as the shortest decimal that parses back to the same
//! value, so a write/read cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbones::PointCloud;
use crate::error::{Error, Result};
use crate::geometry3d::{rotate_z, rotated_iou3d, CameraModel, LabeledBox, OrientedBox3D, Vec3};

pub const FORMAT_VERSION: u32 = 1;
/// Maximum pairwise IoU between generated boxes.
pub const MAX_PAIR_IOU: f64 = 0.05;
/// Minimum number of sampled points inside each box.
pub const MIN_POINTS_PER_BOX: usize = 20;
const MAX_ATTEMPTS: usize = 1000;
/// Surface samples are pulled this fraction towards the box center so they
/// are strictly inside.
const SURFACE_INSET: f64 = 0.01;

/// Nominal `(w, l, h)` per class; five furniture-like shapes.
const CLASS_SIZES: [[f64; 3]; 5] = [
    [1.2, 0.8, 0.75],
    [0.5, 0.5, 0.9],
    [2.0, 1.5, 0.5],
    [1.8, 0.8, 0.8],
    [0.6, 0.5, 1.3],
];
const CLASS_COLORS: [[f64; 3]; 5] = [
    [0.85, 0.2, 0.15],
    [0.15, 0.7, 0.2],
    [0.2, 0.3, 0.9],
    [0.9, 0.8, 0.1],
    [0.7, 0.2, 0.8],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Room half-extent in x and y; the room is `[-r, r]² × [0, height]`.
    pub room_half: f64,
    pub room_height: f64,
    pub num_classes: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub num_points: usize,
    /// Fraction of points spent on floor/wall clutter.
    pub clutter_fraction: f64,
    pub image_size: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room_half: 3.0,
            room_height: 3.0,
            num_classes: 5,
            min_boxes: 3,
            max_boxes: 6,
            num_points: 2048,
            clutter_fraction: 0.15,
            image_size: 64,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.room_half > 0.0 && self.room_height > 0.0) {
            return bad("room size must be positive");
        }
        if self.num_classes == 0 || self.num_classes > CLASS_SIZES.len() {
            return bad("class count must be between 1 and 5");
        }
        if self.min_boxes == 0 || self.min_boxes > self.max_boxes {
            return bad("box count range is empty");
        }
        if !(0.0..1.0).contains(&self.clutter_fraction) {
            return bad("clutter fraction must be in [0, 1)");
        }
        if self.num_points < self.max_boxes * MIN_POINTS_PER_BOX + 1 {
            return bad("too few points for the requested boxes");
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad("image size must be a positive multiple of 32");
        }
        Ok(())
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        (
            [-self.room_half, -self.room_half, 0.0],
            [self.room_half, self.room_half, self.room_height],
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub scene_id: u64,
    pub seed: u64,
    pub pc: PointCloud,
    pub camera: CameraModel,
    pub gts: Vec<LabeledBox>,
}

fn jitter(rng: &mut ChaCha8Rng, v: f64, frac: f64) -> f64 {
    v * (1.0 + rng.random_range(-frac..frac))
}

fn place_boxes(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Result<Vec<LabeledBox>> {
    let count = rng.random_range(spec.min_boxes..=spec.max_boxes);
    let mut boxes: Vec<LabeledBox> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Generation(format!(
                "could not place {count} boxes after {MAX_ATTEMPTS} attempts"
            )));
        }
        let label = rng.random_range(0..spec.num_classes);
        let size = CLASS_SIZES[label].map(|s| jitter(rng, s, 0.15));
        let yaw = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
        let reach = 0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt();
        let lim = spec.room_half - reach - 0.05;
        if lim <= 0.0 || size[2] >= spec.room_height {
            continue;
        }
        let center = [rng.random_range(-lim..lim), rng.random_range(-lim..lim), size[2] / 2.0];
        let bbox = OrientedBox3D::new(center, size, yaw)?;
        if boxes.iter().all(|b| rotated_iou3d(&b.bbox, &bbox) < MAX_PAIR_IOU) {
            boxes.push(LabeledBox { bbox, label });
        }
    }
    Ok(boxes)
}

/// A point on the box surface (bottom face excluded), slightly inside.
fn surface_point(rng: &mut ChaCha8Rng, b: &OrientedBox3D) -> Vec3 {
    let [w, l, h] = b.extents;
    // faces: ±x (l·h), ±y (w·h), +z (w·l)
    let areas = [l * h, l * h, w * h, w * h, w * l];
    let total: f64 = areas.iter().sum();
    let mut r = rng.random_range(0.0..total);
    let mut face = 4;
    for (i, a) in areas.iter().enumerate() {
        if r < *a {
            face = i;
            break;
        }
        r -= a;
    }
    let mut u = [
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    ];
    match face {
        0 => u[0] = 0.5,
        1 => u[0] = -0.5,
        2 => u[1] = 0.5,
        3 => u[1] = -0.5,
        _ => u[2] = 0.5,
    }
    let local = [
        u[0] * w * (1.0 - SURFACE_INSET),
        u[1] * l * (1.0 - SURFACE_INSET),
        u[2] * h * (1.0 - SURFACE_INSET),
    ];
    let r = rotate_z(local, b.yaw);
    [b.center[0] + r[0], b.center[1] + r[1], b.center[2] + r[2]]
}

fn color(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
}

/// Deterministic scene from `seed`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gts = place_boxes(&mut rng, spec)?;

    let n = spec.num_points;
    let n_clutter = ((n as f64) * spec.clutter_fraction).round() as usize;
    let n_obj = n - n_clutter;
    let areas: Vec<f64> = gts
        .iter()
        .map(|g| {
            let [w, l, h] = g.bbox.extents;
            2.0 * (l * h + w * h) + w * l
        })
        .collect();
    let total_area: f64 = areas.iter().sum();
    let spare = n_obj - MIN_POINTS_PER_BOX * gts.len();
    let mut counts: Vec<usize> = areas
        .iter()
        .map(|a| MIN_POINTS_PER_BOX + (spare as f64 * a / total_area).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    counts[0] += n_obj - assigned;

    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for (g, &count) in gts.iter().zip(&counts) {
        for _ in 0..count {
            positions.push(surface_point(&mut rng, &g.bbox));
            colors.push(color(&mut rng, CLASS_COLORS[g.label]));
        }
    }
    let (lo, hi) = spec.bounds();
    for i in 0..n_clutter {
        // two thirds floor, the rest on the walls
        let p = if i % 3 != 2 {
            [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1]), 0.0]
        } else {
            let t = rng.random_range(-spec.room_half..spec.room_half);
            let z = rng.random_range(0.0..spec.room_height);
            match rng.random_range(0..4) {
                0 => [lo[0], t, z],
                1 => [hi[0], t, z],
                2 => [t, lo[1], z],
                _ => [t, hi[1], z],
            }
        };
        positions.push(p);
        let grey = rng.random_range(0.35..0.65);
        colors.push(color(&mut rng, [grey; 3]));
    }

    let camera = place_camera(&mut rng, spec, &gts)?;
    let pc = PointCloud::new(positions, colors)?;
    for (g, b) in gts.iter().enumerate() {
        let inside = pc.positions.iter().filter(|p| b.bbox.contains(**p)).count();
        if inside < MIN_POINTS_PER_BOX {
            return Err(Error::Generation(format!("box {g} holds only {inside} points")));
        }
    }
    Ok(SceneSample {
        scene_id: seed,
        seed,
        pc,
        camera,
        gts,
    })
}

fn place_camera(rng: &mut ChaCha8Rng, spec: &SceneSpec, gts: &[LabeledBox]) -> Result<CameraModel> {
    let mut target = [0.0; 3];
    for g in gts {
        for k in 0..3 {
            target[k] += g.bbox.center[k] / gts.len() as f64;
        }
    }
    let r = spec.room_half * 0.98;
    let t = rng.random_range(-0.5 * r..0.5 * r);
    let z = spec.room_height * 0.7;
    let eye = match rng.random_range(0..4) {
        0 => [-r, t, z],
        1 => [r, t, z],
        2 => [t, -r, z],
        _ => [t, r, z],
    };
    let s = spec.image_size as f64;
    let f = s / 2.0;
    let k = [[f, 0.0, s / 2.0], [0.0, f, s / 2.0], [0.0, 0.0, 1.0]];
    CameraModel::look_at(eye, target, k, spec.image_size, spec.image_size)
}

/// Deterministic disjoint split of `ids`; at least one id lands on each side.
pub fn split_dataset(ids: &[u64], train_fraction: f64, seed: u64) -> Result<(Vec<u64>, Vec<u64>)> {
    if ids.len() < 2 {
        return Err(Error::Input(format!("need at least 2 scenes to split, got {}", ids.len())));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Input(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ids.len() as f64 * train_fraction).round() as usize).clamp(1, ids.len() - 1);
    let val = shuffled.split_off(n_train);
    Ok((shuffled, val))
}

// ---- archive I/O ----

#[derive(Serialize, Deserialize)]
struct CameraFile {
    #[serde(rename = "K")]
    k: Vec<f64>,
    #[serde(rename = "R")]
    r: Vec<f64>,
    t: Vec<f64>,
    #[serde(rename = "W0")]
    width: usize,
    #[serde(rename = "H0")]
    height: usize,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct BoxesFile {
    boxes: Vec<Vec<f64>>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    scene_id: u64,
    seed: u64,
    format_version: u32,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, Value>,
}

fn parse_error(path: &Path, location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location: location.into(),
        message: message.into(),
    }
}

fn warn_unknown(path: &Path, extra: &BTreeMap<String, Value>) {
    for key in extra.keys() {
        log::warn!("{}: ignoring unknown key `{key}`", path.display());
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        let msg = e.to_string();
        // serde names the offending key in its message, e.g. "missing field `K`"
        let location = match msg.split('`').nth(1) {
            Some(key) => format!("key `{key}`"),
            None => format!("line {}", e.line()),
        };
        parse_error(path, location, msg)
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mat_rows(v: &[f64], key: &str, path: &Path) -> Result<[[f64; 3]; 3]> {
    if v.len() != 9 {
        return Err(parse_error(path, format!("key `{key}`"), format!("expected 9 values, got {}", v.len())));
    }
    Ok([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
}

pub fn points_to_text(pc: &PointCloud) -> String {
    let mut s = String::with_capacity(pc.len() * 64);
    for (p, c) in pc.positions.iter().zip(&pc.colors) {
        let _ = writeln!(s, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    s
}

pub fn points_from_text(text: &str, path: &Path) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let loc = format!("line {}", i + 1);
        let vals: Vec<f64> = line
            .split(' ')
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_error(path, loc.clone(), format!("bad number: {e}")))?;
        if vals.len() != 6 {
            return Err(parse_error(path, loc, format!("expected 6 values, got {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_error(path, loc, "non-finite value"));
        }
        positions.push([vals[0], vals[1], vals[2]]);
        colors.push([vals[3], vals[4], vals[5]]);
    }
    PointCloud::new(positions, colors).map_err(|e| parse_error(path, "file", e.to_string()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serialises");
    s.push('\n');
    s
}

pub fn write_scene(dir: &Path, scene: &SceneSample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("points.txt"), &points_to_text(&scene.pc))?;
    let cam = &scene.camera;
    write_file(
        &dir.join("camera.json"),
        &to_json(&CameraFile {
            k: cam.k.concat(),
            r: cam.r.concat(),
            t: cam.t.to_vec(),
            width: cam.width,
            height: cam.height,
            extra: BTreeMap::new(),
        }),
    )?;
    write_file(
        &dir.join("boxes.json"),
        &to_json(&BoxesFile {
            boxes: scene.gts.iter().map(|b| b.to_tuple().to_vec()).collect(),
            extra: BTreeMap::new(),
        }),
    )?;
    write_file(
        &dir.join("meta.json"),
        &to_json(&MetaFile {
            scene_id: scene.scene_id,
            seed: scene.seed,
            format_version: FORMAT_VERSION,
            extra: BTreeMap::new(),
        }),
    )
}

pub fn read_scene(dir: &Path) -> Result<SceneSample> {
    let points_path = dir.join("points.txt");
    let text = std::fs::read_to_string(&points_path).map_err(|e| Error::io(&points_path, e))?;
    let pc = points_from_text(&text, &points_path)?;

    let cam_path = dir.join("camera.json");
    let cf: CameraFile = read_json(&cam_path)?;
    warn_unknown(&cam_path, &cf.extra);
    if cf.t.len() != 3 {
        return Err(parse_error(&cam_path, "key `t`", "expected 3 values"));
    }
    let camera = CameraModel::new(
        mat_rows(&cf.k, "K", &cam_path)?,
        mat_rows(&cf.r, "R", &cam_path)?,
        [cf.t[0], cf.t[1], cf.t[2]],
        cf.width,
        cf.height,
    )
    .map_err(|e| parse_error(&cam_path, "camera", e.to_string()))?;

    let boxes_path = dir.join("boxes.json");
    let bf: BoxesFile = read_json(&boxes_path)?;
    warn_unknown(&boxes_path, &bf.extra);
    let gts = bf
        .boxes
        .iter()
        .enumerate()
        .map(|(i, t)| LabeledBox::from_tuple(t).map_err(|e| parse_error(&boxes_path, format!("key `boxes[{i}]`"), e.to_string())))
        .collect::<Result<_>>()?;

    let meta_path = dir.join("meta.json");
    let mf: MetaFile = read_json(&meta_path)?;
    warn_unknown(&meta_path, &mf.extra);
    if mf.format_version != FORMAT_VERSION {
        return Err(parse_error(
            &meta_path,
            "key `format_version`",
            format!("unsupported version {}", mf.format_version),
        ));
    }
    Ok(SceneSample {
        scene_id: mf.scene_id,
        seed: mf.seed,
        pc,
        camera,
        gts,
    })
}

/// Train/validation scene ids of a dataset directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
}

impl SplitManifest {
    pub fn all(&self) -> Vec<u64> {
        let mut all: Vec<u64> = self.train.iter().chain(&self.val).copied().collect();
        all.sort_unstable();
        all
    }
}

pub const MANIFEST_FILE: &str = "split.json";

pub fn scene_dir(root: &Path, id: u64) -> PathBuf {
    root.join(format!("scene_{id:05}"))
}

/// Generates `count` scenes with seeds `base_seed..base_seed+count` and
/// writes them plus a split manifest under `root`.
pub fn write_dataset(root: &Path, count: usize, base_seed: u64, spec: &SceneSpec, train_fraction: f64) -> Result<SplitManifest> {
    if count == 0 {
        return Err(Error::Input("empty dataset".into()));
    }
    let ids: Vec<u64> = (0..count as u64).map(|i| base_seed + i).collect();
    let scenes = crate::Execution::default().map(&ids, |&id| generate_scene(id, spec));
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for scene in scenes {
        let scene = scene?;
        write_scene(&scene_dir(root, scene.scene_id), &scene)?;
    }
    let manifest = if count >= 2 {
        let (train, val) = split_dataset(&ids, train_fraction, base_seed)?;
        SplitManifest { train, val }
    } else {
        SplitManifest { train: ids, val: Vec::new() }
    };
    write_file(&root.join(MANIFEST_FILE), &to_json(&manifest))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<SplitManifest> {
    read_json(&root.join(MANIFEST_FILE))
}

pub fn read_scenes(root: &Path, ids: &[u64]) -> Result<Vec<SceneSample>> {
    ids.iter().map(|&id| read_scene(&scene_dir(root, id))).collect()
}
