use super::boxes::OrientedBox3D;

/// Intersections below this volume (m³) count as empty.
const MIN_INTERSECTION: f64 = 1e-12;

type Pt = [f64; 2];

fn cross2(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive when counter-clockwise).
pub fn polygon_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a[0] * b[1] - a[1] * b[0];
    }
    s / 2.0
}

/// Sutherland–Hodgman clip of `subject` against a convex counter-clockwise
/// `clip` polygon.
pub fn clip_convex(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross2(a, b, cur) >= 0.0;
            let prev_in = cross2(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    out.push(segment_line_intersection(prev, cur, a, b));
                }
                out.push(cur);
            } else if prev_in {
                out.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    out
}

fn segment_line_intersection(p: Pt, q: Pt, a: Pt, b: Pt) -> Pt {
    let dp = cross2(a, b, p);
    let dq = cross2(a, b, q);
    let denom = dp - dq;
    if denom.abs() < 1e-300 {
        return p;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Bird's-eye intersection area of two oriented boxes.
pub fn bev_intersection_area(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let pa = a.bev_corners();
    let pb = b.bev_corners();
    polygon_area(&clip_convex(&pa, &pb)).max(0.0)
}

/// Exact intersection volume of two yaw-rotated boxes.
pub fn intersection_volume(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter < MIN_INTERSECTION {
        0.0
    } else {
        inter
    }
}

/// Exact 3D IoU of two yaw-rotated boxes.
pub fn rotated_iou3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let inter = intersection_volume(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}
