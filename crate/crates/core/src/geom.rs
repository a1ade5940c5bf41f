//! SE(2) poses, rotated bird's-eye-view boxes and exact convex-polygon IoU.
//!
//! Corner indexing is fixed: corner 0 is the `(+l/2, +w/2)` corner in the
//! object frame and the remaining corners follow counter-clockwise, so the
//! closest-corner rule used for box resizing is deterministic.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polygons with less area than this are treated as empty.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(&self, o: &Point2) -> f64 {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        dx * dx + dy * dy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
}

/// A LiDAR return: world position plus capture time in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point4 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub t: f64,
}

impl Point4 {
    pub const fn new(x: f64, y: f64, z: f64, t: f64) -> Self {
        Self { x, y, z, t }
    }

    pub fn xyz(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }
}

/// Planar rigid pose. `theta` is kept in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub const IDENTITY: Pose2D = Pose2D {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// `self ∘ other`: express `other` (given in this pose's frame) in the parent frame.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// Maps a point from this pose's local frame into the parent frame.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + c * x - s * y, self.y + s * x + c * y)
    }

    /// Maps a parent-frame point into this pose's local frame.
    #[inline]
    pub fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.x;
        let dy = y - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

pub fn se2_compose(a: &Pose2D, b: &Pose2D) -> Pose2D {
    a.compose(b)
}

/// Box footprint. `l` runs along the heading axis, `w` across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Size2D {
    pub w: f64,
    pub l: f64,
}

impl Size2D {
    /// Validated constructor; rejects non-positive or non-finite dimensions.
    pub fn new(w: f64, l: f64) -> Result<Self> {
        if w > 0.0 && l > 0.0 && w.is_finite() && l.is_finite() {
            Ok(Self { w, l })
        } else {
            Err(Error::InvalidSize { w, l })
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    pub fn scaled(&self, k: f64) -> Size2D {
        Size2D {
            w: self.w * k,
            l: self.l * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxBEV {
    pub pose: Pose2D,
    pub size: Size2D,
}

/// Object-frame sign pattern `(sign along l, sign along w)` of each corner.
pub const CORNER_SIGNS: [(f64, f64); 4] = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];

impl BoxBEV {
    pub fn new(pose: Pose2D, size: Size2D) -> Self {
        Self { pose, size }
    }

    pub fn area(&self) -> f64 {
        self.size.area()
    }

    pub fn corner(&self, idx: usize) -> Point2 {
        let (sl, sw) = CORNER_SIGNS[idx];
        let (x, y) = self
            .pose
            .apply(sl * 0.5 * self.size.l, sw * 0.5 * self.size.w);
        Point2::new(x, y)
    }

    pub fn corners(&self) -> [Point2; 4] {
        [self.corner(0), self.corner(1), self.corner(2), self.corner(3)]
    }

    /// Whether world point `(x, y)` lies in the box inflated by `scale` (boundary included).
    #[inline]
    pub fn contains_xy(&self, x: f64, y: f64, scale: f64) -> bool {
        let (lx, ly) = self.pose.apply_inverse(x, y);
        lx.abs() <= 0.5 * scale * self.size.l && ly.abs() <= 0.5 * scale * self.size.w
    }

    pub fn transformed(&self, t: &Pose2D) -> BoxBEV {
        BoxBEV::new(t.compose(&self.pose), self.size)
    }
}

/// Convex polygon, counter-clockwise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polygon2D {
    pub vertices: Vec<Point2>,
}

impl Polygon2D {
    pub fn new(vertices: Vec<Point2>) -> Self {
        Self { vertices }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    /// Signed shoelace area; positive for CCW winding.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            acc += a.x * b.y - b.x * a.y;
        }
        0.5 * acc
    }

    pub fn area(&self) -> f64 {
        self.signed_area().max(0.0)
    }
}

pub fn box_corners(b: &BoxBEV) -> Polygon2D {
    Polygon2D::new(b.corners().to_vec())
}

pub fn world_to_object(points: &[Point3], box_pose: &Pose2D) -> Vec<Point3> {
    points
        .iter()
        .map(|p| {
            let (x, y) = box_pose.apply_inverse(p.x, p.y);
            Point3::new(x, y, p.z)
        })
        .collect()
}

pub fn object_to_world(points: &[Point3], box_pose: &Pose2D) -> Vec<Point3> {
    points
        .iter()
        .map(|p| {
            let (x, y) = box_pose.apply(p.x, p.y);
            Point3::new(x, y, p.z)
        })
        .collect()
}

/// Points whose xy falls inside `b` with both dimensions scaled by `scale`.
pub fn points_in_box(points: &[Point4], b: &BoxBEV, scale: f64) -> Vec<Point4> {
    // circumscribed-circle prefilter, padded so it never rejects a boundary point
    let r = 0.5 * scale * b.size.w.hypot(b.size.l) * (1.0 + 1e-9) + 1e-9;
    let r2 = r * r;
    points
        .iter()
        .filter(|p| {
            let dx = p.x - b.pose.x;
            let dy = p.y - b.pose.y;
            dx * dx + dy * dy <= r2 && b.contains_xy(p.x, p.y, scale)
        })
        .copied()
        .collect()
}

#[inline]
fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Sutherland–Hodgman clipping of `subject` against every edge of `clip`.
pub fn convex_intersection(subject: &Polygon2D, clip: &Polygon2D) -> Polygon2D {
    if subject.is_empty() || clip.is_empty() {
        return Polygon2D::empty();
    }
    let mut out = subject.vertices.clone();
    let n = clip.vertices.len();
    let mut input = Vec::with_capacity(out.len() + n);
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let a = clip.vertices[i];
        let b = clip.vertices[(i + 1) % n];
        std::mem::swap(&mut input, &mut out);
        out.clear();
        let m = input.len();
        for j in 0..m {
            let p = input[j];
            let q = input[(j + 1) % m];
            let dp = cross(a, b, p);
            let dq = cross(a, b, q);
            if dp >= 0.0 {
                out.push(p);
                if dq < 0.0 {
                    out.push(lerp(p, q, dp / (dp - dq)));
                }
            } else if dq >= 0.0 {
                out.push(lerp(p, q, dp / (dp - dq)));
            }
        }
    }
    let poly = Polygon2D::new(out);
    if poly.area() < DEGENERATE_AREA {
        Polygon2D::empty()
    } else {
        poly
    }
}

#[inline]
fn lerp(p: Point2, q: Point2, t: f64) -> Point2 {
    Point2::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

pub fn intersection_area(a: &BoxBEV, b: &BoxBEV) -> f64 {
    convex_intersection(&box_corners(a), &box_corners(b)).area()
}

/// Exact rotated IoU in the ground plane.
pub fn box_iou_bev(a: &BoxBEV, b: &BoxBEV) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let inter = intersection_area(a, b);
    let union = aa + ab - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Index of the corner nearest to the ego position; ties go to the lowest index.
pub fn closest_corner_index(b: &BoxBEV, ego: &Pose2D) -> usize {
    let e = ego.position();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in b.corners().iter().enumerate() {
        let d = c.dist2(&e);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Resizes `b` keeping corner `idx` fixed in the world; heading is unchanged.
pub fn resize_about_corner(b: &BoxBEV, new_size: Size2D, idx: usize) -> BoxBEV {
    let anchor = b.corner(idx);
    let (sl, sw) = CORNER_SIGNS[idx];
    let (s, c) = b.pose.theta.sin_cos();
    let ox = sl * 0.5 * new_size.l;
    let oy = sw * 0.5 * new_size.w;
    let cx = anchor.x - (c * ox - s * oy);
    let cy = anchor.y - (s * ox + c * oy);
    BoxBEV::new(
        Pose2D {
            x: cx,
            y: cy,
            theta: b.pose.theta,
        },
        new_size,
    )
}

/// Resizes `b` so the corner closest to `ego` stays put and the box grows away from the ego.
pub fn corner_align_resize(b: &BoxBEV, new_size: Size2D, ego: &Pose2D) -> BoxBEV {
    resize_about_corner(b, new_size, closest_corner_index(b, ego))
}

pub fn center_align_resize(b: &BoxBEV, new_size: Size2D) -> BoxBEV {
    BoxBEV::new(b.pose, new_size)
}
