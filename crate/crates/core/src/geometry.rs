//! Oriented 3D boxes: containment, rotated IoU, regression encodings and
//! boundary offsets.
//!
//! Boxes rotate about the vertical axis only. `l` runs along the heading,
//! `w` across it, `h` is vertical and `cz` is the box's vertical center.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{FsdError, Result};

/// Tolerance for counting points on a face as inside.
const BOUNDARY_EPS: f64 = 1e-9;

/// Maps any angle into (−π, π].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// 7-DoF oriented box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    /// Validated constructor; yaw is normalized.
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Result<Self> {
        let b = Box3D {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l: dims[0],
            w: dims[1],
            h: dims[2],
            yaw: normalize_yaw(yaw),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(FsdError::contract(format!("non-finite box {self:?}")));
        }
        if self.l <= 0.0 || self.w <= 0.0 || self.h <= 0.0 {
            return Err(FsdError::contract(format!(
                "box dimensions must be positive, got {:?}",
                self.dims()
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    #[inline]
    pub fn dims(&self) -> [f64; 3] {
        [self.l, self.w, self.h]
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn z_min(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    /// World point expressed in the box frame (x along heading).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    /// Box-frame point mapped back to world coordinates.
    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.cx + c * q[0] - s * q[1],
            self.cy + s * q[0] + c * q[1],
            self.cz + q[2],
        ]
    }

    /// BEV corners, counter-clockwise.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|[x, y]| {
            let p = self.to_world([x, y, 0.0]);
            [p[0], p[1]]
        })
    }

    /// Grows every dimension by `2 * margin`.
    pub fn enlarged(&self, margin: f64) -> Box3D {
        Box3D {
            l: self.l + 2.0 * margin,
            w: self.w + 2.0 * margin,
            h: self.h + 2.0 * margin,
            ..*self
        }
    }

    /// Axis-aligned BEV bounds `(xmin, ymin, xmax, ymax)`.
    pub fn bev_bounds(&self) -> [f64; 4] {
        let cs = self.corners_bev();
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for [x, y] in cs {
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
        }
        b
    }
}

/// Point coordinates with optional per-point intensity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        Self {
            coords,
            intensity: None,
        }
    }

    pub fn with_intensity(coords: Vec<[f64; 3]>, intensity: Vec<f64>) -> Result<Self> {
        if coords.len() != intensity.len() {
            return Err(FsdError::contract("intensity length differs from point count"));
        }
        Ok(Self {
            coords,
            intensity: Some(intensity),
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn intensity_at(&self, i: usize) -> f64 {
        self.intensity.as_ref().map_or(0.0, |v| v[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FsdError::contract("point cloud has non-finite coordinates"));
        }
        if let Some(i) = &self.intensity {
            if i.len() != self.coords.len() {
                return Err(FsdError::contract("intensity length differs from point count"));
            }
        }
        Ok(())
    }
}

/// Inside test in the box frame; points on a face count as inside.
pub fn point_in_box(p: [f64; 3], b: &Box3D) -> bool {
    let q = b.to_local(p);
    q[0].abs() <= 0.5 * b.l + BOUNDARY_EPS
        && q[1].abs() <= 0.5 * b.w + BOUNDARY_EPS
        && q[2].abs() <= 0.5 * b.h + BOUNDARY_EPS
}

/// Signed distances from `p` to the six faces, in the box frame:
/// `[front, back, left, right, top, bottom]`. Negative when outside a face.
pub fn boundary_offsets(p: [f64; 3], b: &Box3D) -> [f64; 6] {
    let q = b.to_local(p);
    let (hl, hw, hh) = (0.5 * b.l, 0.5 * b.w, 0.5 * b.h);
    [hl - q[0], hl + q[0], hw - q[1], hw + q[1], hh - q[2], hh + q[2]]
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    0.5 * s.abs()
}

/// Sutherland–Hodgman: clips `subject` against the convex CCW polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    let m = clip.len();
    for e in 0..m {
        if out.is_empty() {
            break;
        }
        let a = clip[e];
        let b = clip[(e + 1) % m];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        let k = input.len();
        for i in 0..k {
            let cur = input[i];
            let prev = input[(i + k - 1) % k];
            let sc = side(cur);
            let sp = side(prev);
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Exact area of the BEV (top-down) intersection of two boxes.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    // cheap reject on the circumscribed circles
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    if dx * dx + dy * dy > (ra + rb) * (ra + rb) {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.corners_bev(), &b.corners_bev()))
}

fn degenerate(b: &Box3D) -> bool {
    !(b.l > 0.0 && b.w > 0.0 && b.h > 0.0)
}

/// Rotated IoU in the ground plane.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    if degenerate(a) || degenerate(b) {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b);
    let union = a.l * a.w + b.l * b.w - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Rotated 3D IoU: BEV intersection times vertical overlap over volume union.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if degenerate(a) || degenerate(b) {
        return 0.0;
    }
    let dz = (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Length of a box regression vector.
pub const CODE_LEN: usize = 8;

/// Regression target relative to an anchor point:
/// `(Δx, Δy, Δz, ln l, ln w, ln h, sin yaw, cos yaw)`.
pub fn box_encode(gt: &Box3D, anchor: [f64; 3]) -> Result<[f64; CODE_LEN]> {
    gt.validate()?;
    let (s, c) = gt.yaw.sin_cos();
    Ok([
        gt.cx - anchor[0],
        gt.cy - anchor[1],
        gt.cz - anchor[2],
        gt.l.ln(),
        gt.w.ln(),
        gt.h.ln(),
        s,
        c,
    ])
}

/// Inverse of [`box_encode`]. Yaw comes from `atan2(sin, cos)`.
pub fn box_decode(code: &[f64], anchor: [f64; 3]) -> Box3D {
    debug_assert!(code.len() >= CODE_LEN);
    Box3D {
        cx: anchor[0] + code[0],
        cy: anchor[1] + code[1],
        cz: anchor[2] + code[2],
        l: code[3].clamp(-20.0, 20.0).exp(),
        w: code[4].clamp(-20.0, 20.0).exp(),
        h: code[5].clamp(-20.0, 20.0).exp(),
        yaw: normalize_yaw(code[6].atan2(code[7])),
    }
}

/// Residual from a proposal to a target box, with the center shift
/// expressed in the proposal frame:
/// `(R⁻¹Δc, ln(l/lₚ), ln(w/wₚ), ln(h/hₚ), sin Δyaw, cos Δyaw)`.
pub fn residual_encode(gt: &Box3D, proposal: &Box3D) -> Result<[f64; CODE_LEN]> {
    gt.validate()?;
    proposal.validate()?;
    let d = proposal.to_local(gt.center());
    let (s, c) = (gt.yaw - proposal.yaw).sin_cos();
    Ok([
        d[0],
        d[1],
        d[2],
        (gt.l / proposal.l).ln(),
        (gt.w / proposal.w).ln(),
        (gt.h / proposal.h).ln(),
        s,
        c,
    ])
}

/// Applies a residual to a proposal. An all-zero residual returns the proposal.
pub fn residual_decode(res: &[f64], proposal: &Box3D) -> Box3D {
    debug_assert!(res.len() >= CODE_LEN);
    let c = proposal.to_world([res[0], res[1], res[2]]);
    Box3D {
        cx: c[0],
        cy: c[1],
        cz: c[2],
        l: proposal.l * res[3].clamp(-20.0, 20.0).exp(),
        w: proposal.w * res[4].clamp(-20.0, 20.0).exp(),
        h: proposal.h * res[5].clamp(-20.0, 20.0).exp(),
        yaw: normalize_yaw(proposal.yaw + res[6].atan2(res[7])),
    }
}

/// Greedy rotated-BEV NMS. Returns kept indices in descending score order;
/// equal scores keep the lower index first.
pub fn nms_bev(boxes: &[Box3D], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou_bev(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}
