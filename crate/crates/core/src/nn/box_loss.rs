//! Rotated-box regression loss: −ln IoU through polygon clipping, with a
//! smooth-ℓ1 fallback on parameters when the boxes do not overlap.
//!
//! Gradients come from forward-mode dual numbers carried through a separate
//! implementation of the clipping, so the loss can be cross-checked against
//! [`crate::geom::box_iou_bev`].

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::geom::{BoxBEV, Pose2D, Size2D, CORNER_SIGNS};

/// Box parameters in loss order: x, y, θ, w, l.
pub const BOX_PARAMS: usize = 5;

/// IoU floor inside the logarithm.
pub const IOU_FLOOR: f64 = 1e-9;

/// Transition point of the smooth-ℓ1 fallback, in parameter units.
pub const SMOOTH_L1_BETA: f64 = 1.0;

const DEGENERATE_AREA: f64 = 1e-12;

/// Value plus gradient with respect to the five box parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; BOX_PARAMS],
}

impl Dual {
    pub const fn constant(v: f64) -> Self {
        Self {
            v,
            d: [0.0; BOX_PARAMS],
        }
    }

    pub fn variable(v: f64, idx: usize) -> Self {
        let mut d = [0.0; BOX_PARAMS];
        d[idx] = 1.0;
        Self { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in &mut d {
            *x *= dv;
        }
        Self { v, d }
    }

    pub fn sin(self) -> Self {
        self.map(self.v.sin(), self.v.cos())
    }

    pub fn cos(self) -> Self {
        self.map(self.v.cos(), -self.v.sin())
    }

    pub fn ln(self) -> Self {
        self.map(self.v.ln(), 1.0 / self.v)
    }

    pub fn scale(self, k: f64) -> Self {
        self.map(self.v * k, k)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Dual { v: self.v + o.v, d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Dual { v: self.v - o.v, d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; BOX_PARAMS];
        for (i, x) in d.iter_mut().enumerate() {
            *x = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; BOX_PARAMS];
        for (i, x) in d.iter_mut().enumerate() {
            *x = (self.d[i] - v * o.d[i]) * inv;
        }
        Dual { v, d }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.scale(-1.0)
    }
}

#[derive(Clone, Copy)]
struct DPoint {
    x: Dual,
    y: Dual,
}

fn dual_corners(p: &[f64; BOX_PARAMS]) -> [DPoint; 4] {
    let x = Dual::variable(p[0], 0);
    let y = Dual::variable(p[1], 1);
    let th = Dual::variable(p[2], 2);
    let w = Dual::variable(p[3], 3);
    let l = Dual::variable(p[4], 4);
    let (s, c) = (th.sin(), th.cos());
    CORNER_SIGNS.map(|(sl, sw)| {
        let lx = l.scale(0.5 * sl);
        let ly = w.scale(0.5 * sw);
        DPoint {
            x: x + c * lx - s * ly,
            y: y + s * lx + c * ly,
        }
    })
}

fn const_corners(b: &BoxBEV) -> [DPoint; 4] {
    b.corners().map(|p| DPoint {
        x: Dual::constant(p.x),
        y: Dual::constant(p.y),
    })
}

fn cross(o: DPoint, a: DPoint, b: DPoint) -> Dual {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn lerp(p: DPoint, q: DPoint, t: Dual) -> DPoint {
    DPoint {
        x: p.x + t * (q.x - p.x),
        y: p.y + t * (q.y - p.y),
    }
}

fn shoelace(poly: &[DPoint]) -> Dual {
    let n = poly.len();
    let mut acc = Dual::constant(0.0);
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc = acc + (a.x * b.y - b.x * a.y);
    }
    acc.scale(0.5)
}

/// Intersection area of the (differentiable) subject with a constant clip polygon.
fn clipped_area(subject: &[DPoint; 4], clip: &[DPoint; 4]) -> Dual {
    let mut out: Vec<DPoint> = subject.to_vec();
    let mut input: Vec<DPoint> = Vec::with_capacity(8);
    for i in 0..4 {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % 4];
        std::mem::swap(&mut input, &mut out);
        out.clear();
        let m = input.len();
        for j in 0..m {
            let p = input[j];
            let q = input[(j + 1) % m];
            let dp = cross(a, b, p);
            let dq = cross(a, b, q);
            if dp.v >= 0.0 {
                out.push(p);
                if dq.v < 0.0 {
                    out.push(lerp(p, q, dp / (dp - dq)));
                }
            } else if dq.v >= 0.0 {
                out.push(lerp(p, q, dp / (dp - dq)));
            }
        }
    }
    if out.len() < 3 {
        return Dual::constant(0.0);
    }
    let area = shoelace(&out);
    if area.v < DEGENERATE_AREA {
        Dual::constant(0.0)
    } else {
        area
    }
}

/// IoU of the predicted parameters against `gt`, with its gradient.
pub fn iou_dual(pred: &[f64; BOX_PARAMS], gt: &BoxBEV) -> Dual {
    let inter = clipped_area(&dual_corners(pred), &const_corners(gt));
    if inter.v <= 0.0 {
        return Dual::constant(0.0);
    }
    let area_p = Dual::variable(pred[3], 3) * Dual::variable(pred[4], 4);
    let area_g = Dual::constant(gt.area());
    inter / (area_p + area_g - inter)
}

fn smooth_l1(d: Dual) -> Dual {
    if d.v.abs() < SMOOTH_L1_BETA {
        (d * d).scale(0.5 / SMOOTH_L1_BETA)
    } else if d.v >= 0.0 {
        d - Dual::constant(0.5 * SMOOTH_L1_BETA)
    } else {
        -d - Dual::constant(0.5 * SMOOTH_L1_BETA)
    }
}

/// Loss and gradient for one box.
///
/// Overlapping boxes give −ln(max(IoU, 1e-9)); disjoint boxes fall back to
/// smooth-ℓ1 summed over (x, y, sin θ, cos θ, w, l).
pub fn box_loss(pred: &[f64; BOX_PARAMS], gt: &BoxBEV) -> Result<Dual> {
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("predicted box"));
    }
    if pred[3] <= 0.0 || pred[4] <= 0.0 {
        return Err(Error::InvalidSize {
            w: pred[3],
            l: pred[4],
        });
    }
    let iou = iou_dual(pred, gt);
    if iou.v > 0.0 {
        let as_box = BoxBEV::new(
            Pose2D::new(pred[0], pred[1], pred[2]),
            Size2D {
                w: pred[3],
                l: pred[4],
            },
        );
        if as_box == *gt {
            return Ok(Dual { v: 0.0, d: (-iou.ln()).d });
        }
        if iou.v < IOU_FLOOR {
            return Ok(Dual::constant(-IOU_FLOOR.ln()));
        }
        return Ok(-iou.ln());
    }
    let th = Dual::variable(pred[2], 2);
    let terms = [
        Dual::variable(pred[0], 0) - Dual::constant(gt.pose.x),
        Dual::variable(pred[1], 1) - Dual::constant(gt.pose.y),
        th.sin() - Dual::constant(gt.pose.theta.sin()),
        th.cos() - Dual::constant(gt.pose.theta.cos()),
        Dual::variable(pred[3], 3) - Dual::constant(gt.size.w),
        Dual::variable(pred[4], 4) - Dual::constant(gt.size.l),
    ];
    Ok(terms
        .into_iter()
        .fold(Dual::constant(0.0), |acc, t| acc + smooth_l1(t)))
}

pub fn box_params(b: &BoxBEV) -> [f64; BOX_PARAMS] {
    [b.pose.x, b.pose.y, b.pose.theta, b.size.w, b.size.l]
}
