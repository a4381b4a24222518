//! Planar geometry shared by the simulation: points, angle wrapping and
//! oriented-rectangle overlap.

use serde::{Deserialize, Serialize};

/// A 2-D point or vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the cross product; positive when `o` is to the left.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        self.sub(o).norm()
    }

    /// Left-hand normal (rotate by +90 degrees).
    pub fn left_normal(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn from_heading(psi: f64) -> Vec2 {
        Vec2::new(psi.cos(), psi.sin())
    }
}

/// Wrap an angle to the half-open interval (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Oriented bounding box: center, heading and half-extents.
#[derive(Debug, Clone, Copy)]
pub struct Obb {
    pub center: Vec2,
    pub heading: f64,
    pub half_len: f64,
    pub half_wid: f64,
}

impl Obb {
    pub fn new(center: Vec2, heading: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            heading,
            half_len: 0.5 * length,
            half_wid: 0.5 * width,
        }
    }

    fn axes(&self) -> [Vec2; 2] {
        let fwd = Vec2::from_heading(self.heading);
        [fwd, fwd.left_normal()]
    }

    /// Projection radius of the box onto a unit axis.
    fn radius_on(&self, axis: Vec2) -> f64 {
        let [fwd, left] = self.axes();
        self.half_len * fwd.dot(axis).abs() + self.half_wid * left.dot(axis).abs()
    }
}

/// Separating-axis overlap test for two oriented rectangles.
pub fn obb_overlap(a: &Obb, b: &Obb) -> bool {
    let d = b.center.sub(a.center);
    let axes = [a.axes()[0], a.axes()[1], b.axes()[0], b.axes()[1]];
    for axis in axes {
        if d.dot(axis).abs() > a.radius_on(axis) + b.radius_on(axis) {
            return false;
        }
    }
    true
}

/// Axis-aligned box given by half-extents around a center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub center: Vec2,
    pub half_x: f64,
    pub half_y: f64,
}

impl Aabb {
    pub fn contains(&self, p: Vec2) -> bool {
        (p.x - self.center.x).abs() <= self.half_x && (p.y - self.center.y).abs() <= self.half_y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrap_keeps_half_open_interval() {
        assert_eq!(wrap_angle(std::f64::consts::PI), std::f64::consts::PI);
        assert_eq!(wrap_angle(-std::f64::consts::PI), std::f64::consts::PI);
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn disjoint_and_touching_boxes() {
        let a = Obb::new(Vec2::new(0.0, 0.0), 0.0, 4.0, 2.0);
        let b = Obb::new(Vec2::new(10.0, 0.0), 0.0, 4.0, 2.0);
        assert!(!obb_overlap(&a, &b));
        let c = Obb::new(Vec2::new(3.0, 0.0), 0.0, 4.0, 2.0);
        assert!(obb_overlap(&a, &c));
        // rotated by 90 degrees, close enough to clip the corner region
        let d = Obb::new(Vec2::new(2.5, 1.5), std::f64::consts::FRAC_PI_2, 4.0, 2.0);
        assert!(obb_overlap(&a, &d));
    }

    proptest! {
        #[test]
        fn wrap_angle_always_in_range(a in -1e6f64..1e6f64) {
            let w = wrap_angle(a);
            prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        }

        #[test]
        fn obb_overlap_is_symmetric(
            ax in -5.0f64..5.0, ay in -5.0f64..5.0, ah in -3.2f64..3.2,
            bx in -5.0f64..5.0, by in -5.0f64..5.0, bh in -3.2f64..3.2,
        ) {
            let a = Obb::new(Vec2::new(ax, ay), ah, 5.0, 2.0);
            let b = Obb::new(Vec2::new(bx, by), bh, 5.0, 2.0);
            prop_assert_eq!(obb_overlap(&a, &b), obb_overlap(&b, &a));
        }
    }
}
