//! Exact intersection-over-union of yaw-rotated boxes.

use super::Box7;

/// Collinearity slack for the half-plane test during clipping.
const CLIP_EPS: f64 = 1e-9;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d1 = [q[0] - p[0], q[1] - p[1]];
    let d2 = [b[0] - a[0], b[1] - a[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    if denom.abs() < f64::EPSILON {
        return q;
    }
    let t = ((a[0] - p[0]) * d2[1] - (a[1] - p[1]) * d2[0]) / denom;
    [p[0] + t * d1[0], p[1] + t * d1[1]]
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let inside = |p: [f64; 2]| cross(a, b, p) >= -CLIP_EPS;
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            match (inside(cur), inside(prev)) {
                (true, true) => output.push(cur),
                (true, false) => {
                    output.push(line_intersection(prev, cur, a, b));
                    output.push(cur);
                }
                (false, true) => output.push(line_intersection(prev, cur, a, b)),
                (false, false) => {}
            }
        }
    }
    output
}

/// Shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        twice += p[0] * q[1] - q[0] * p[1];
    }
    twice / 2.0
}

/// Footprint intersection area of two boxes.
pub fn bev_intersection(a: &Box7, b: &Box7) -> f64 {
    let poly = clip_convex(&a.bev_corners(), &b.bev_corners());
    polygon_area(&poly).max(0.0)
}

/// Rotated 3-D IoU in `[0, 1]`.
pub fn iou3d(a: &Box7, b: &Box7) -> f64 {
    // Clipping a polygon against itself is exact only up to rounding.
    if a == b {
        return 1.0;
    }
    let top = (a.z + a.h / 2.0).min(b.z + b.h / 2.0);
    let bottom = (a.z - a.h / 2.0).max(b.z - b.h / 2.0);
    let vertical = (top - bottom).max(0.0);
    if vertical == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * vertical;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes() {
        let a = Box7::new([1.0, 2.0, 0.0], [4.0, 2.0, 1.5], 0.3).unwrap();
        assert_eq!(iou3d(&a, &a), 1.0);
    }

    #[test]
    fn half_offset_cubes() {
        let a = Box7::new([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0).unwrap();
        let b = Box7::new([1.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0).unwrap();
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_boxes() {
        let a = Box7::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        let b = Box7::new([5.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.4).unwrap();
        assert_eq!(iou3d(&a, &b), 0.0);
        let c = Box7::new([0.0, 0.0, 3.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        assert_eq!(iou3d(&a, &c), 0.0);
    }

    #[test]
    fn square_rotated_by_45_degrees() {
        // unit-area square against its 45° rotation: octagon of area 2(√2 - 1)
        let a = Box7::new([0.0; 3], [1.0, 1.0, 1.0], 0.0).unwrap();
        let b = Box7::new([0.0; 3], [1.0, 1.0, 1.0], std::f64::consts::FRAC_PI_4).unwrap();
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        assert!((bev_intersection(&a, &b) - inter).abs() < 1e-12);
        assert!((iou3d(&a, &b) - inter / (2.0 - inter)).abs() < 1e-12);
    }
}
