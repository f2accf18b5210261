//! Potential and field of planar surface-electrode patterns in the gapless-plane
//! approximation.
//!
//! With every point of the plane `z = 0` belonging to some electrode, the
//! potential above the plane is the sum over signal electrodes of
//! `V · Ω(r) / 2π`, where `Ω` is the solid angle the electrode polygon
//! subtends at `r`. Ground electrodes contribute nothing and are kept only for
//! validation and bookkeeping.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Vec2};
use crate::pseudopot::DriveParams;

pub type Vec3 = Vector3<f64>;

/// Vertex distance below which mirrored polygons are considered identical.
pub const MIRROR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Signal,
    Ground,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Electrode {
    /// Counterclockwise vertices in the chip plane, meters.
    pub polygon: Vec<Vec2>,
    pub role: Role,
}

impl Electrode {
    pub fn signal(polygon: Vec<Vec2>) -> Self {
        Self { polygon, role: Role::Signal }
    }

    pub fn ground(polygon: Vec<Vec2>) -> Self {
        Self { polygon, role: Role::Ground }
    }

    /// Polygon reflected through `x = 0`, re-ordered to stay counterclockwise.
    pub fn mirrored(&self) -> Self {
        let mut polygon: Vec<Vec2> = self.polygon.iter().map(|p| Vec2::new(-p.x, p.y)).collect();
        polygon.reverse();
        Self { polygon, role: self.role }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("electrode {index}: polygon has {count} vertices, at least 3 required")]
    TooFewVertices { index: usize, count: usize },
    #[error("electrode {index}: consecutive vertices {vertex} and its successor coincide")]
    RepeatedVertex { index: usize, vertex: usize },
    #[error("electrode {index}: polygon is not simple")]
    SelfIntersecting { index: usize },
    #[error("electrode {index}: vertices are not counterclockwise")]
    Clockwise { index: usize },
    #[error("electrodes {first} and {second} overlap")]
    Overlap { first: usize, second: usize },
    #[error("electrode {index}: signal layout is not mirror symmetric about x = 0")]
    NotMirrorSymmetric { index: usize },
    #[error("electrode {index}: non-finite vertex coordinate")]
    NonFinite { index: usize },
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum FieldError {
    #[error("field point must lie above the chip plane (z = {z} m)")]
    NotAbovePlane { z: f64 },
}

/// Anything that can report the potential and its gradient for a unit drive
/// voltage. Implementations must be pure.
pub trait UnitField: Send + Sync {
    /// Potential with all signal electrodes at 1 V.
    fn unit_potential(&self, p: &Vec3) -> f64;
    /// Gradient of [`UnitField::unit_potential`], 1/m.
    fn unit_gradient(&self, p: &Vec3) -> Vec3;
}

impl<T: UnitField + ?Sized> UnitField for &T {
    fn unit_potential(&self, p: &Vec3) -> f64 {
        (**self).unit_potential(p)
    }
    fn unit_gradient(&self, p: &Vec3) -> Vec3 {
        (**self).unit_gradient(p)
    }
}

impl<T: UnitField + ?Sized> UnitField for Box<T> {
    fn unit_potential(&self, p: &Vec3) -> f64 {
        (**self).unit_potential(p)
    }
    fn unit_gradient(&self, p: &Vec3) -> Vec3 {
        (**self).unit_gradient(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    /// Volts.
    pub potential: f64,
    /// V/m, `-∇φ`.
    pub e_field: Vec3,
    /// V/m², `-∇∇φ`; row `i`, column `j` is `∂E_i/∂x_j`.
    pub field_jacobian: Option<Matrix3<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    start: Vec3,
    dir: Vec3,
    len: f64,
}

/// Immutable polygonal electrode pattern on the plane `z = 0`.
#[derive(Debug, Clone)]
pub struct ElectrodeLayout {
    electrodes: Vec<Electrode>,
    mirror_symmetric_x: bool,
    signal_edges: Vec<Edge>,
    signal_polygons: Vec<usize>,
}

impl ElectrodeLayout {
    pub fn new(electrodes: Vec<Electrode>, mirror_symmetric_x: bool) -> Result<Self, GeometryError> {
        validate(&electrodes, mirror_symmetric_x)?;
        let signal_polygons: Vec<usize> = electrodes
            .iter()
            .enumerate()
            .filter(|(_, e)| e.role == Role::Signal)
            .map(|(i, _)| i)
            .collect();
        let mut signal_edges = Vec::new();
        for &i in &signal_polygons {
            let poly = &electrodes[i].polygon;
            let n = poly.len();
            for k in 0..n {
                let a = poly[k];
                let b = poly[(k + 1) % n];
                let start = Vec3::new(a.x, a.y, 0.0);
                let d = Vec3::new(b.x - a.x, b.y - a.y, 0.0);
                let len = d.norm();
                signal_edges.push(Edge { start, dir: d / len, len });
            }
        }
        Ok(Self { electrodes, mirror_symmetric_x, signal_edges, signal_polygons })
    }

    /// Layout containing no electrodes at all: zero potential everywhere.
    pub fn empty() -> Self {
        Self { electrodes: Vec::new(), mirror_symmetric_x: true, signal_edges: Vec::new(), signal_polygons: Vec::new() }
    }

    pub fn electrodes(&self) -> &[Electrode] {
        &self.electrodes
    }

    pub fn mirror_symmetric_x(&self) -> bool {
        self.mirror_symmetric_x
    }

    pub fn signal_electrodes(&self) -> impl Iterator<Item = &Electrode> {
        self.signal_polygons.iter().map(move |&i| &self.electrodes[i])
    }

    /// Copy of the layout with every signal electrode set to ground.
    pub fn grounded(&self) -> Self {
        let electrodes = self
            .electrodes
            .iter()
            .map(|e| Electrode { polygon: e.polygon.clone(), role: Role::Ground })
            .collect();
        Self { electrodes, mirror_symmetric_x: self.mirror_symmetric_x, signal_edges: Vec::new(), signal_polygons: Vec::new() }
    }

    /// Rigid motion in the chip plane: rotate by `angle` about the origin, then translate.
    pub fn transformed(&self, angle: f64, shift: Vec2) -> Result<Self, GeometryError> {
        let (s, c) = angle.sin_cos();
        let electrodes = self
            .electrodes
            .iter()
            .map(|e| Electrode {
                polygon: e.polygon.iter().map(|p| Vec2::new(c * p.x - s * p.y, s * p.x + c * p.y) + shift).collect(),
                role: e.role,
            })
            .collect();
        let mirror = self.mirror_symmetric_x && angle == 0.0 && shift.x == 0.0;
        Self::new(electrodes, mirror)
    }

    /// Potential at `point` with signal electrodes at 1 V.
    pub fn potential_at(&self, point: &Vec3) -> Result<f64, FieldError> {
        check_point(point)?;
        Ok(self.unit_potential(point))
    }

    /// Unit-voltage potential, field and optionally its Jacobian.
    pub fn field_at(&self, point: &Vec3, with_jacobian: bool) -> Result<FieldSample, FieldError> {
        check_point(point)?;
        Ok(field_sample(self, point, with_jacobian))
    }

    fn raw_potential(&self, p: &Vec3) -> f64 {
        let mut omega = 0.0;
        for &i in &self.signal_polygons {
            omega += polygon_solid_angle(&self.electrodes[i].polygon, p);
        }
        omega / (2.0 * PI)
    }

    fn raw_gradient(&self, p: &Vec3) -> Vec3 {
        // Solid-angle gradient of a flat loop as a sum of straight-segment
        // Biot–Savart integrals; sign fixed by ∂Ω/∂z < 0 above a CCW polygon.
        let mut g = Vec3::zeros();
        for e in &self.signal_edges {
            let ra = p - e.start;
            let t = ra.dot(&e.dir);
            let perp = e.dir.cross(&ra);
            let rho2 = perp.norm_squared();
            let da = ra.norm();
            let rb = ra - e.dir * e.len;
            let db = rb.norm();
            let k = ((e.len - t) / db + t / da) / rho2;
            g -= perp * k;
        }
        g / (2.0 * PI)
    }
}

impl UnitField for ElectrodeLayout {
    fn unit_potential(&self, p: &Vec3) -> f64 {
        if self.mirror_symmetric_x && p.x < 0.0 {
            self.raw_potential(&Vec3::new(-p.x, p.y, p.z))
        } else {
            self.raw_potential(p)
        }
    }

    fn unit_gradient(&self, p: &Vec3) -> Vec3 {
        // Mirror layouts are evaluated on the x ≥ 0 half so that the field is
        // exactly odd in x.
        if self.mirror_symmetric_x && p.x < 0.0 {
            let g = self.raw_gradient(&Vec3::new(-p.x, p.y, p.z));
            Vec3::new(-g.x, g.y, g.z)
        } else {
            let mut g = self.raw_gradient(p);
            if self.mirror_symmetric_x && p.x == 0.0 {
                g.x = 0.0;
            }
            g
        }
    }
}

fn check_point(p: &Vec3) -> Result<(), FieldError> {
    if p.z > 0.0 && p.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(FieldError::NotAbovePlane { z: p.z })
    }
}

/// Finite-difference step for derivatives of the analytic gradient.
#[inline]
pub fn derivative_step(z: f64) -> f64 {
    (1e-6 * z).max(1e-8)
}

/// Jacobian of the unit gradient (the Hessian of φ) by central differences.
pub fn gradient_jacobian<F: UnitField + ?Sized>(field: &F, p: &Vec3) -> Matrix3<f64> {
    let h = derivative_step(p.z).min(0.5 * p.z);
    let mut m = Matrix3::zeros();
    for j in 0..3 {
        let mut dp = Vec3::zeros();
        dp[j] = h;
        let d = (field.unit_gradient(&(p + dp)) - field.unit_gradient(&(p - dp))) / (2.0 * h);
        m.set_column(j, &d);
    }
    m
}

/// Potential, field and Jacobian for any unit field at a validated point.
pub fn field_sample<F: UnitField + ?Sized>(field: &F, p: &Vec3, with_jacobian: bool) -> FieldSample {
    let potential = field.unit_potential(p);
    let e_field = -field.unit_gradient(p);
    let field_jacobian = with_jacobian.then(|| {
        let h = gradient_jacobian(field, p);
        -0.5 * (h + h.transpose())
    });
    FieldSample { potential, e_field, field_jacobian }
}

/// Field at time `t` for the drive `V0 cos(Ωt + phase)` on the signal electrodes.
pub fn instantaneous_field<F: UnitField + ?Sized>(field: &F, drive: &DriveParams, p: &Vec3, t: f64) -> Vec3 {
    -field.unit_gradient(p) * (drive.v0 * (drive.omega * t + drive.phase).cos())
}

/// Signed solid angle of triangle `abc` seen from `r` (Van Oosterom–Strackee).
///
/// Positive for `r` above a counterclockwise triangle lying in `z = 0`.
pub fn triangle_solid_angle(r: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let ra = a - r;
    let rb = b - r;
    let rc = c - r;
    let la = ra.norm();
    let lb = rb.norm();
    let lc = rc.norm();
    let num = -ra.dot(&rb.cross(&rc));
    let den = la * lb * lc + ra.dot(&rb) * lc + ra.dot(&rc) * lb + rb.dot(&rc) * la;
    2.0 * num.atan2(den)
}

/// Solid angle of a planar polygon in `z = 0`, fan-triangulated from vertex 0.
pub fn polygon_solid_angle(poly: &[Vec2], r: &Vec3) -> f64 {
    let v0 = Vec3::new(poly[0].x, poly[0].y, 0.0);
    let mut total = 0.0;
    for k in 1..poly.len() - 1 {
        let a = Vec3::new(poly[k].x, poly[k].y, 0.0);
        let b = Vec3::new(poly[k + 1].x, poly[k + 1].y, 0.0);
        total += triangle_solid_angle(r, &v0, &a, &b);
    }
    total
}

fn validate(electrodes: &[Electrode], mirror: bool) -> Result<(), GeometryError> {
    for (index, e) in electrodes.iter().enumerate() {
        let poly = &e.polygon;
        if poly.len() < 3 {
            return Err(GeometryError::TooFewVertices { index, count: poly.len() });
        }
        if poly.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFinite { index });
        }
        for k in 0..poly.len() {
            if poly[k] == poly[(k + 1) % poly.len()] {
                return Err(GeometryError::RepeatedVertex { index, vertex: k });
            }
        }
        if !geometry::is_simple(poly) {
            return Err(GeometryError::SelfIntersecting { index });
        }
        if geometry::signed_area2(poly) <= 0.0 {
            return Err(GeometryError::Clockwise { index });
        }
    }
    for i in 0..electrodes.len() {
        for j in (i + 1)..electrodes.len() {
            if bounding_boxes_overlap(&electrodes[i].polygon, &electrodes[j].polygon)
                && geometry::interiors_overlap(&electrodes[i].polygon, &electrodes[j].polygon)
            {
                return Err(GeometryError::Overlap { first: i, second: j });
            }
        }
    }
    if mirror {
        let signals: Vec<(usize, &Electrode)> =
            electrodes.iter().enumerate().filter(|(_, e)| e.role == Role::Signal).collect();
        for &(index, e) in &signals {
            let m = e.mirrored();
            if !signals.iter().any(|(_, other)| same_polygon(&m.polygon, &other.polygon, MIRROR_TOLERANCE)) {
                return Err(GeometryError::NotMirrorSymmetric { index });
            }
        }
    }
    Ok(())
}

fn bounding_boxes_overlap(a: &[Vec2], b: &[Vec2]) -> bool {
    let bb = |p: &[Vec2]| {
        p.iter().fold([f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY], |m, q| {
            [m[0].min(q.x), m[1].max(q.x), m[2].min(q.y), m[3].max(q.y)]
        })
    };
    let (ba, bb_) = (bb(a), bb(b));
    ba[0] < bb_[1] && bb_[0] < ba[1] && ba[2] < bb_[3] && bb_[2] < ba[3]
}

/// Same vertex cycle up to a cyclic shift, within `tol`.
fn same_polygon(a: &[Vec2], b: &[Vec2], tol: f64) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let n = a.len();
    (0..n).any(|shift| (0..n).all(|k| (a[k] - b[(k + shift) % n]).norm() <= tol))
}

/// Ideal two-dimensional quadrupole `φ = (x² − (z − h)²) / (2 r0²)` with its
/// field null at height `h`; an analytic stand-in for tests and oracles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadrupoleField {
    pub center_height: f64,
    pub radius: f64,
}

impl UnitField for QuadrupoleField {
    fn unit_potential(&self, p: &Vec3) -> f64 {
        let dz = p.z - self.center_height;
        (p.x * p.x - dz * dz) / (2.0 * self.radius * self.radius)
    }

    fn unit_gradient(&self, p: &Vec3) -> Vec3 {
        let r2 = self.radius * self.radius;
        Vec3::new(p.x / r2, 0.0, -(p.z - self.center_height) / r2)
    }
}

/// Field that vanishes everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullField;

impl UnitField for NullField {
    fn unit_potential(&self, _p: &Vec3) -> f64 {
        0.0
    }
    fn unit_gradient(&self, _p: &Vec3) -> Vec3 {
        Vec3::zeros()
    }
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]` as a CCW polygon.
pub fn rectangle(x0: f64, x1: f64, y0: f64, y1: f64) -> Vec<Vec2> {
    vec![Vec2::new(x0, y0), Vec2::new(x1, y0), Vec2::new(x1, y1), Vec2::new(x0, y1)]
}
