use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Slack for the inclusive boundary test of [`Box7::contains`].
const BOUNDARY_EPS: f64 = 1e-9;

/// Oriented 3-D box with yaw about the vertical axis.
///
/// `w` is the extent along the box's own x axis (the heading direction), `l`
/// the extent along its y axis and `h` the vertical extent. `yaw` rotates the
/// box x axis away from the world x axis, counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box7 {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!("box sizes must be positive, got {size:?}")));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(Error::Parameter("box center and yaw must be finite".into()));
        }
        Ok(Box7 {
            x: center[0],
            y: center[1],
            z: center[2],
            w: size[0],
            l: size[1],
            h: size[2],
            yaw: normalize_angle(yaw),
        })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn size(&self) -> [f64; 3] {
        [self.w, self.l, self.h]
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.size().iter().all(|&s| s > 0.0 && s.is_finite())
            && self.center().iter().all(|c| c.is_finite())
            && self.yaw > -PI
            && self.yaw <= PI
    }

    /// Expresses a world point in the box frame (origin at the center, x
    /// along the heading).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }

    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.x + c * p[0] - s * p[1],
            self.y + s * p[0] + c * p[1],
            self.z + p[2],
        ]
    }

    /// Inclusive containment: boundary points count as inside.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= self.w / 2.0 + BOUNDARY_EPS
            && q[1].abs() <= self.l / 2.0 + BOUNDARY_EPS
            && q[2].abs() <= self.h / 2.0 + BOUNDARY_EPS
    }

    /// The same box grown by `margin` on every face.
    pub fn enlarged(&self, margin: f64) -> Box7 {
        Box7 {
            w: self.w + 2.0 * margin,
            l: self.l + 2.0 * margin,
            h: self.h + 2.0 * margin,
            ..*self
        }
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let hw = self.w / 2.0;
        let hl = self.l / 2.0;
        let local = [[hw, hl], [-hw, hl], [-hw, -hl], [hw, -hl]];
        let (s, c) = self.yaw.sin_cos();
        local.map(|[a, b]| [self.x + c * a - s * b, self.y + s * a + c * b])
    }

    pub fn center_distance(&self, other: &Box7) -> f64 {
        let d = [self.x - other.x, self.y - other.y, self.z - other.z];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// Moves `prev` by an offset expressed in its own frame and turns it by
/// `dyaw`; the size is unchanged.
pub fn apply_motion(prev: &Box7, dx: f64, dy: f64, dz: f64, dyaw: f64) -> Box7 {
    let c = prev.to_world([dx, dy, dz]);
    Box7 {
        x: c[0],
        y: c[1],
        z: c[2],
        yaw: normalize_angle(prev.yaw + dyaw),
        ..*prev
    }
}

/// The motion that undoes `apply_motion(_, dx, dy, dz, dyaw)` when applied to
/// its result.
pub fn inverse_motion(dx: f64, dy: f64, dz: f64, dyaw: f64) -> (f64, f64, f64, f64) {
    let (s, c) = dyaw.sin_cos();
    // rotate -d into the frame turned by dyaw
    let ix = -(c * dx + s * dy);
    let iy = -(-s * dx + c * dy);
    (ix, iy, -dz, -dyaw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(yaw: f64) -> Box7 {
        Box7::new([1.0, -2.0, 0.5], [4.0, 1.8, 1.5], yaw).unwrap()
    }

    #[test]
    fn yaw_is_normalized() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!(Box7::new([0.0; 3], [1.0, 0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn zero_motion_is_identity() {
        let p = b(0.7);
        assert_eq!(apply_motion(&p, 0.0, 0.0, 0.0, 0.0), p);
    }

    #[test]
    fn full_turn_keeps_yaw() {
        let p = b(0.7);
        let q = apply_motion(&p, 0.0, 0.0, 0.0, 2.0 * PI);
        assert!((q.yaw - p.yaw).abs() < 1e-12);
    }

    #[test]
    fn motion_is_expressed_in_the_box_frame() {
        let p = b(PI / 2.0);
        let q = apply_motion(&p, 1.0, 0.0, 0.0, 0.0);
        assert!((q.x - 1.0).abs() < 1e-12);
        assert!((q.y + 1.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_is_inside() {
        let p = b(0.0);
        assert!(p.contains(p.center()));
        assert!(p.contains(p.to_world([2.0, 0.0, 0.0])));
        assert!(!p.contains(p.to_world([2.01, 0.0, 0.0])));
    }
}
