//! Shape optimization of the electrode layout: selected vertices move along
//! fixed directions, and a simplex search minimizes a merit that penalizes
//! vertical pseudopotential gradients along the guide and deviations of the
//! vertical trap frequency from a target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::electrostatics::{Electrode, ElectrodeLayout, GeometryError, UnitField, MIRROR_TOLERANCE};
use crate::exec::Workers;
use crate::geometry::Vec2;
use crate::pseudopot::{find_transverse_minimum, DriveParams, MinimumOptions, ParticleSpecies, Pseudo, TransverseMinimum};
use crate::simplex::{self, HistoryEntry, SimplexOptions, SimplexResult};
use crate::units::ELEMENTARY_CHARGE;

/// Merit assigned when the guide minimum cannot be followed.
pub const MERIT_PENALTY: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutOptError {
    #[error("control point {0}: electrode or vertex index out of range")]
    BadIndex(usize),
    #[error("control point {0}: direction must be a nonzero vector")]
    BadDirection(usize),
    #[error("control point {0}: bounds must satisfy lower < upper")]
    BadBounds(usize),
    #[error("control point {0}: vertex has no mirror partner in a mirror-symmetric layout")]
    NoMirrorPartner(usize),
    #[error("control point {0}: a vertex on the symmetry axis can only move along y")]
    AxisVertex(usize),
    #[error("initial parameter vector is outside the bounds or has the wrong length")]
    BadInitial,
    #[error("merit spec: {0}")]
    BadMerit(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlPoint {
    pub electrode: usize,
    pub vertex: usize,
    /// Displacement direction in the chip plane; normalized on construction.
    pub direction: [f64; 2],
    /// Displacement bounds along `direction`, meters.
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct LayoutParametrization {
    base: ElectrodeLayout,
    controls: Vec<ControlPoint>,
    /// Per control point: every (electrode, vertex, unit direction) that moves with it.
    moves: Vec<Vec<(usize, usize, Vec2)>>,
}

fn find_vertex(electrodes: &[Electrode], p: Vec2, tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, e) in electrodes.iter().enumerate() {
        for (j, q) in e.polygon.iter().enumerate() {
            if (q - p).norm() <= tol {
                out.push((i, j));
            }
        }
    }
    out
}

impl LayoutParametrization {
    /// Vertices that coincide with a control vertex (shared boundaries) move
    /// with it; in a mirror-symmetric layout the mirror images move with the
    /// reflected direction.
    pub fn new(base: ElectrodeLayout, controls: Vec<ControlPoint>) -> Result<Self, LayoutOptError> {
        let electrodes = base.electrodes();
        let scale = electrodes
            .iter()
            .flat_map(|e| e.polygon.iter())
            .fold(0.0_f64, |m, p| m.max(p.x.abs()).max(p.y.abs()))
            .max(1e-30);
        let tol = MIRROR_TOLERANCE * scale.max(1.0);
        let mut moves = Vec::with_capacity(controls.len());
        let mut normalized = Vec::with_capacity(controls.len());
        for (k, c) in controls.iter().enumerate() {
            let p = *electrodes
                .get(c.electrode)
                .and_then(|e| e.polygon.get(c.vertex))
                .ok_or(LayoutOptError::BadIndex(k))?;
            let d = Vec2::new(c.direction[0], c.direction[1]);
            let norm = d.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(LayoutOptError::BadDirection(k));
            }
            if !(c.lower < c.upper) || !c.lower.is_finite() || !c.upper.is_finite() {
                return Err(LayoutOptError::BadBounds(k));
            }
            let d = d / norm;
            let mut list: Vec<(usize, usize, Vec2)> =
                find_vertex(electrodes, p, tol).into_iter().map(|(i, j)| (i, j, d)).collect();
            if base.mirror_symmetric_x() {
                if p.x.abs() <= tol {
                    if d.x.abs() > 1e-12 {
                        return Err(LayoutOptError::AxisVertex(k));
                    }
                } else {
                    let partners = find_vertex(electrodes, Vec2::new(-p.x, p.y), tol);
                    if partners.is_empty() {
                        return Err(LayoutOptError::NoMirrorPartner(k));
                    }
                    list.extend(partners.into_iter().map(|(i, j)| (i, j, Vec2::new(-d.x, d.y))));
                }
            }
            moves.push(list);
            normalized.push(ControlPoint { direction: [d.x, d.y], ..*c });
        }
        Ok(Self { base, controls: normalized, moves })
    }

    pub fn base(&self) -> &ElectrodeLayout {
        &self.base
    }

    pub fn controls(&self) -> &[ControlPoint] {
        &self.controls
    }

    pub fn dof(&self) -> usize {
        self.controls.len()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.controls.iter().map(|c| c.lower).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.controls.iter().map(|c| c.upper).collect()
    }

    pub fn apply(&self, params: &[f64]) -> Result<ElectrodeLayout, GeometryError> {
        assert_eq!(params.len(), self.dof(), "parameter count mismatch");
        let mut electrodes: Vec<Electrode> = self.base.electrodes().to_vec();
        for (list, &t) in self.moves.iter().zip(params) {
            for &(i, j, d) in list {
                electrodes[i].polygon[j] += d * t;
            }
        }
        ElectrodeLayout::new(electrodes, self.base.mirror_symmetric_x())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeritSpec {
    /// Longitudinal positions where the guide is probed, meters.
    pub stations: Vec<f64>,
    /// Target vertical trap frequency, rad/s.
    pub target_omega_z: f64,
    pub weight_gradient: f64,
    pub weight_omega: f64,
    /// Height at which ∂Ψ/∂z is evaluated above each station's minimum.
    /// `None` uses the guide height found at the first station.
    #[serde(default)]
    pub reference_height: Option<f64>,
    /// Starting height for the minimum search at the first station.
    pub height_guess: f64,
}

impl MeritSpec {
    pub fn validate(&self) -> Result<(), LayoutOptError> {
        if self.stations.is_empty() {
            return Err(LayoutOptError::BadMerit("at least one station is required"));
        }
        if !(self.weight_gradient >= 0.0 && self.weight_omega >= 0.0) {
            return Err(LayoutOptError::BadMerit("weights must be non-negative"));
        }
        if self.weight_gradient == 0.0 && self.weight_omega == 0.0 {
            return Err(LayoutOptError::BadMerit("weights must not both be zero"));
        }
        if !(self.target_omega_z > 0.0) {
            return Err(LayoutOptError::BadMerit("target frequency must be positive"));
        }
        if !(self.height_guess > 0.0) || self.reference_height.is_some_and(|h| !(h > 0.0)) {
            return Err(LayoutOptError::BadMerit("heights must be positive"));
        }
        Ok(())
    }

    /// Equally spaced stations covering `[y0, y1]`.
    pub fn spanning(y0: f64, y1: f64, count: usize, target_omega_z: f64, height_guess: f64) -> Self {
        let stations = if count <= 1 {
            vec![y0]
        } else {
            (0..count).map(|i| y0 + (y1 - y0) * i as f64 / (count - 1) as f64).collect()
        };
        Self { stations, target_omega_z, weight_gradient: 1.0, weight_omega: 1.0, reference_height: None, height_guess }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationMerit {
    pub y: f64,
    pub x: f64,
    pub z: f64,
    /// ∂Ψ/∂z at the reference height, eV/mm.
    pub gradient_ev_per_mm: f64,
    pub omega_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeritValue {
    pub value: f64,
    pub gradient_term: f64,
    pub omega_term: f64,
    pub stations: Vec<StationMerit>,
    pub diagnostic: Option<String>,
}

impl MeritValue {
    fn penalty(reason: String) -> Self {
        Self { value: MERIT_PENALTY, gradient_term: 0.0, omega_term: 0.0, stations: Vec::new(), diagnostic: Some(reason) }
    }

    pub fn is_penalty(&self) -> bool {
        self.diagnostic.is_some()
    }
}

/// Follows the guide minimum station by station, preferring the `x >= 0`
/// well when the guide has split.
fn follow_minimum<F: UnitField + ?Sized>(
    field: &F,
    drive: &DriveParams,
    species: &ParticleSpecies,
    y: f64,
    previous: Option<(f64, f64)>,
    height_guess: f64,
) -> Option<TransverseMinimum> {
    let opts = MinimumOptions::default();
    let h = previous.map_or(height_guess, |p| p.1);
    let mut guesses = Vec::new();
    if let Some(p) = previous {
        guesses.push(p);
    }
    guesses.extend([(0.0, h), (0.25 * h, h), (0.25 * h, 0.7 * h), (0.5 * h, 0.7 * h)]);
    guesses
        .into_iter()
        .filter_map(|g| find_transverse_minimum(field, drive, species, y, g, &opts).ok())
        .map(|m| if m.x < 0.0 { TransverseMinimum { x: -m.x, ..m } } else { m })
        .next()
}

pub fn merit<F: UnitField + ?Sized>(
    field: &F,
    drive: &DriveParams,
    species: &ParticleSpecies,
    spec: &MeritSpec,
) -> MeritValue {
    if let Err(e) = spec.validate() {
        return MeritValue::penalty(e.to_string());
    }
    let pseudo = Pseudo::new(field, drive, species);
    let k = ELEMENTARY_CHARGE / species.mass;
    let mut previous = None;
    let mut reference = spec.reference_height;
    let mut stations = Vec::with_capacity(spec.stations.len());
    let (mut gt, mut ot) = (0.0, 0.0);
    for &y in &spec.stations {
        let Some(m) = follow_minimum(field, drive, species, y, previous, spec.height_guess) else {
            return MeritValue::penalty(format!("guide minimum lost at y = {y:.6e} m"));
        };
        previous = Some((m.x, m.z));
        let z_ref = *reference.get_or_insert(m.z);
        let g = pseudo.gradient_xz(m.x, y, z_ref).y * 1e-3;
        let omega_z = (m.hessian[3] * k).max(0.0).sqrt();
        let rel = (omega_z - spec.target_omega_z) / spec.target_omega_z;
        gt += g * g;
        ot += rel * rel;
        stations.push(StationMerit { y, x: m.x, z: m.z, gradient_ev_per_mm: g, omega_z });
    }
    let value = spec.weight_gradient * gt + spec.weight_omega * ot;
    if !value.is_finite() {
        return MeritValue::penalty("merit is not finite".to_string());
    }
    MeritValue { value, gradient_term: spec.weight_gradient * gt, omega_term: spec.weight_omega * ot, stations, diagnostic: None }
}

#[derive(Debug, Clone)]
pub struct LayoutOptimization {
    pub best_params: Vec<f64>,
    pub best_layout: ElectrodeLayout,
    pub best_merit: f64,
    pub history: Vec<HistoryEntry>,
    pub penalized: Vec<simplex::Failure>,
    pub converged: bool,
}

pub fn optimize_layout(
    param: &LayoutParametrization,
    initial: &[f64],
    drive: &DriveParams,
    species: &ParticleSpecies,
    spec: &MeritSpec,
    options: &SimplexOptions,
    workers: Workers,
) -> Result<LayoutOptimization, LayoutOptError> {
    spec.validate()?;
    let (lo, hi) = (param.lower(), param.upper());
    if initial.len() != param.dof() || initial.iter().zip(lo.iter().zip(&hi)).any(|(v, (l, h))| v < l || v > h) {
        return Err(LayoutOptError::BadInitial);
    }
    let mirror = param.base().mirror_symmetric_x();
    let objective = |p: &[f64]| -> Result<f64, String> {
        let layout = param.apply(p).map_err(|e| format!("invalid geometry: {e}"))?;
        assert!(!mirror || layout.mirror_symmetric_x(), "candidate lost mirror symmetry");
        let m = merit(&layout, drive, species, spec);
        match m.diagnostic {
            Some(d) => Err(d),
            None => Ok(m.value),
        }
    };
    let opts = SimplexOptions { penalty: MERIT_PENALTY, ..*options };
    let SimplexResult { best, best_value, history, failures, converged, .. } =
        simplex::minimize(&objective, initial, &lo, &hi, &opts, workers);
    let best_layout = param.apply(&best)?;
    Ok(LayoutOptimization { best_params: best, best_layout, best_merit: best_value, history, penalized: failures, converged })
}
