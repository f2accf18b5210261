//! Parametric splitter chip: a five-wire quadrupole guide whose grounded
//! centre strip gains a tapered signal electrode, turning the field into a
//! hexapole and splitting the guide into two arms.
//!
//! The transverse cross-section at each `y` is described by three widths
//! (all on the `x > 0` half, mirrored to `x < 0`):
//!
//! * `c`: full width of the central signal electrode (zero in the quadrupole section)
//! * `g`: width of the grounded strip between the centre electrode and a rail
//! * `b`: width of each signal rail
//!
//! Between knots the widths follow a monotone cubic (Fritsch–Carlson) interpolant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::electrostatics::{Electrode, ElectrodeLayout, GeometryError};
use crate::geometry::Vec2;
use crate::interp::Pchip;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileKnot {
    pub y: f64,
    pub center_width: f64,
    pub gap_width: f64,
    pub rail_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitterProfile {
    pub knots: Vec<ProfileKnot>,
    /// Chip length along y; electrodes span `0..=length`.
    pub length: f64,
    /// Longitudinal vertex spacing used to sample curved edges.
    pub sample_step: f64,
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile needs at least two knots")]
    TooFewKnots,
    #[error("knot y values must be strictly increasing and span 0..=length")]
    BadKnots,
    #[error("negative width at knot {0}")]
    NegativeWidth(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Cross-section widths at one `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Section {
    pub center_width: f64,
    pub gap_width: f64,
    pub rail_width: f64,
}

impl Section {
    pub fn rail_inner(&self) -> f64 {
        0.5 * self.center_width + self.gap_width
    }

    pub fn rail_outer(&self) -> f64 {
        self.rail_inner() + self.rail_width
    }
}

impl SplitterProfile {
    /// Default reconstruction, tuned so the guide reproduces the published
    /// height, trap frequency, double-well separations and barriers.
    pub fn reconstructed() -> Self {
        let um = 1e-6;
        let mm = 1e-3;
        let k = |y: f64, c: f64, g: f64, b: f64| ProfileKnot {
            y: y * mm,
            center_width: c * um,
            gap_width: g * um,
            rail_width: b * um,
        };
        Self {
            knots: vec![
                k(0.0, 0.0, 309.76, 387.2),
                k(9.0, 0.0, 309.76, 387.2),
                k(14.0, 160.0, 285.0, 692.0),
                k(27.0, 260.0, 237.0, 675.0),
                k(40.0, 1200.0, 237.0, 675.0),
                k(56.0, 3700.0, 237.0, 675.0),
            ],
            length: 56.0 * mm,
            sample_step: 0.25 * mm,
        }
    }

    /// Straight five-wire quadrupole guide with the reconstruction's input cross-section.
    pub fn straight_quadrupole(length: f64) -> Self {
        let first = Self::reconstructed().knots[0];
        Self {
            knots: vec![first, ProfileKnot { y: length, ..first }],
            length,
            sample_step: length,
        }
    }

    fn validate(&self) -> Result<(), ProfileError> {
        if self.knots.len() < 2 {
            return Err(ProfileError::TooFewKnots);
        }
        let first = self.knots[0].y;
        let last = self.knots[self.knots.len() - 1].y;
        if first != 0.0 || (last - self.length).abs() > 1e-12 || self.knots.windows(2).any(|w| w[1].y <= w[0].y) {
            return Err(ProfileError::BadKnots);
        }
        for (i, k) in self.knots.iter().enumerate() {
            if k.center_width < 0.0 || k.gap_width <= 0.0 || k.rail_width <= 0.0 {
                return Err(ProfileError::NegativeWidth(i));
            }
        }
        Ok(())
    }

    fn splines(&self) -> [Pchip; 3] {
        let ys: Vec<f64> = self.knots.iter().map(|k| k.y).collect();
        let f = |g: fn(&ProfileKnot) -> f64| profile_spline(ys.clone(), self.knots.iter().map(g).collect());
        [f(|k| k.center_width), f(|k| k.gap_width), f(|k| k.rail_width)]
    }

    pub fn section_at(&self, y: f64) -> Section {
        let [c, g, b] = self.splines();
        Section { center_width: c.eval(y).max(0.0), gap_width: g.eval(y), rail_width: b.eval(y) }
    }

    /// Sampling positions: knots plus a uniform grid, with vertices that would
    /// be collinear on every edge dropped later.
    fn sample_ys(&self) -> Vec<f64> {
        let n = (self.length / self.sample_step).ceil().max(1.0) as usize;
        let mut ys: Vec<f64> = (0..=n).map(|i| self.length * i as f64 / n as f64).collect();
        ys.extend(self.knots.iter().map(|k| k.y));
        ys.sort_by(|a, b| a.total_cmp(b));
        ys.dedup_by(|a, b| (*a - *b).abs() < 1e-9 * self.length);
        ys
    }

    pub fn build(&self) -> Result<ElectrodeLayout, ProfileError> {
        self.validate()?;
        let ys = self.sample_ys();
        let sections: Vec<(f64, Section)> = ys.iter().map(|&y| (y, self.section_at(y))).collect();
        let mut electrodes = Vec::new();

        // Centre electrode: pointed tip where its width first becomes positive.
        let tol = 1e-9;
        if let Some(start) = sections.iter().position(|(_, s)| s.center_width > tol) {
            let tip_y = if start == 0 { 0.0 } else { sections[start - 1].0 };
            let right: Vec<Vec2> =
                sections[start..].iter().map(|(y, s)| Vec2::new(0.5 * s.center_width, *y)).collect();
            let mut poly = Vec::with_capacity(2 * right.len() + 1);
            if start > 0 {
                poly.push(Vec2::new(0.0, tip_y));
            }
            poly.extend(right.iter().copied());
            poly.extend(right.iter().rev().map(|p| Vec2::new(-p.x, p.y)));
            electrodes.push(Electrode::signal(simplify(poly)));
        }

        for side in [1.0, -1.0] {
            let inner: Vec<Vec2> = sections.iter().map(|(y, s)| Vec2::new(side * s.rail_inner(), *y)).collect();
            let outer: Vec<Vec2> = sections.iter().map(|(y, s)| Vec2::new(side * s.rail_outer(), *y)).collect();
            let mut poly: Vec<Vec2> = Vec::with_capacity(2 * inner.len());
            if side > 0.0 {
                // Counterclockwise: up the outer edge, down the inner edge.
                poly.extend(outer.iter().copied());
                poly.extend(inner.iter().rev().copied());
            } else {
                poly.extend(inner.iter().copied());
                poly.extend(outer.iter().rev().copied());
            }
            electrodes.push(Electrode::signal(simplify(poly)));
        }
        Ok(ElectrodeLayout::new(electrodes, true)?)
    }
}

/// Drop vertices lying on the straight line through their neighbours.
/// Flat at the start so each section is entered smoothly, linear past the end.
fn profile_spline(xs: Vec<f64>, ys: Vec<f64>) -> Pchip {
    let n = xs.len();
    let p = Pchip::new(xs, ys);
    if n == 2 {
        return p;
    }
    let last = (p.ys()[n - 1] - p.ys()[n - 2]) / (p.xs()[n - 1] - p.xs()[n - 2]);
    p.with_end_slopes(0.0, last)
}

fn simplify(poly: Vec<Vec2>) -> Vec<Vec2> {
    let n = poly.len();
    if n <= 3 {
        return poly;
    }
    let mut keep = Vec::with_capacity(n);
    for i in 0..n {
        let a = poly[(i + n - 1) % n];
        let b = poly[i];
        let c = poly[(i + 1) % n];
        let cross = (b - a).perp(&(c - b));
        if cross.abs() > 1e-15 * (b - a).norm() * (c - b).norm().max(1e-30) * 1e3 {
            keep.push(b);
        }
    }
    keep
}

/// The shipped reconstructed splitter layout.
pub fn reconstructed_layout() -> ElectrodeLayout {
    SplitterProfile::reconstructed().build().expect("default profile is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_builds_symmetric_layout() {
        let layout = reconstructed_layout();
        assert!(layout.mirror_symmetric_x());
        assert_eq!(layout.electrodes().len(), 3);
        let p = SplitterProfile::reconstructed();
        let s14 = p.section_at(14e-3);
        assert!((s14.center_width - 160e-6).abs() < 1e-12);
        let s27 = p.section_at(27e-3);
        assert!((s27.center_width - 260e-6).abs() < 1e-12);
        assert_eq!(p.section_at(5e-3).center_width, 0.0);
    }

    #[test]
    fn pchip_is_monotone_between_knots() {
        let s = profile_spline(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 0.0, 1.0, 1.2]);
        let mut last = f64::NEG_INFINITY;
        for i in 0..=300 {
            let v = s.eval(i as f64 / 100.0);
            assert!(v >= last - 1e-15);
            last = v;
        }
        assert!((s.eval(2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn straight_guide_has_no_centre_electrode() {
        let layout = SplitterProfile::straight_quadrupole(20e-3).build().unwrap();
        assert_eq!(layout.electrodes().len(), 2);
        assert!(layout.electrodes().iter().all(|e| e.polygon.len() == 4));
    }
}
