//! Time-averaged pseudopotential of an oscillating surface-electrode field and
//! characterization of the guide it forms: minimum paths, secular
//! frequencies, stability parameter, double-well separation and barrier.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::electrostatics::{gradient_jacobian, FieldError, UnitField, Vec3};
use crate::exec::{self, Workers};
use crate::units::{ELECTRON_MASS, ELEMENTARY_CHARGE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("drive angular frequency must be positive (got {0})")]
    NonPositiveOmega(f64),
    #[error("drive amplitude must be non-negative (got {0})")]
    NegativeAmplitude(f64),
    #[error("particle mass must be positive (got {0})")]
    NonPositiveMass(f64),
}

/// Drive `V0 cos(Ωt + phase)` applied to every signal electrode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveParams {
    /// Angular frequency Ω, rad/s.
    pub omega: f64,
    /// Amplitude V0, volts.
    pub v0: f64,
    /// Phase offset, radians.
    pub phase: f64,
}

impl DriveParams {
    pub fn new(omega: f64, v0: f64, phase: f64) -> Result<Self, ParamError> {
        if !(omega > 0.0) {
            return Err(ParamError::NonPositiveOmega(omega));
        }
        if !(v0 >= 0.0) {
            return Err(ParamError::NegativeAmplitude(v0));
        }
        Ok(Self { omega, v0, phase })
    }

    /// 990 MHz, 16 V: the operating point of the demonstrated splitter.
    pub fn experiment() -> Self {
        Self { omega: 2.0 * PI * 990e6, v0: 16.0, phase: 0.0 }
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    pub fn with_v0(self, v0: f64) -> Self {
        Self { v0, ..self }
    }

    pub fn with_omega(self, omega: f64) -> Self {
        Self { omega, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleSpecies {
    /// Coulombs (signed).
    pub charge: f64,
    /// Kilograms.
    pub mass: f64,
}

impl ParticleSpecies {
    pub fn new(charge: f64, mass: f64) -> Result<Self, ParamError> {
        if !(mass > 0.0) {
            return Err(ParamError::NonPositiveMass(mass));
        }
        Ok(Self { charge, mass })
    }

    pub fn electron() -> Self {
        Self { charge: -ELEMENTARY_CHARGE, mass: ELECTRON_MASS }
    }

    pub fn charge_to_mass(&self) -> f64 {
        self.charge.abs() / self.mass
    }
}

/// `Q² V0² / (4 M Ω²)` expressed in eV·m², so that `Ψ = prefactor · |∇φ_unit|²`.
pub fn pseudopotential_prefactor(drive: &DriveParams, species: &ParticleSpecies) -> f64 {
    species.charge * species.charge * drive.v0 * drive.v0
        / (4.0 * species.mass * drive.omega * drive.omega)
        / ELEMENTARY_CHARGE
}

/// Pseudopotential Ψ in eV.
pub fn pseudopotential_at<F: UnitField + ?Sized>(
    field: &F,
    drive: &DriveParams,
    species: &ParticleSpecies,
    point: &Vec3,
) -> Result<f64, FieldError> {
    if !(point.z > 0.0) {
        return Err(FieldError::NotAbovePlane { z: point.z });
    }
    Ok(Pseudo::new(field, drive, species).value(point))
}

/// Evaluator bundling a field with the pseudopotential prefactor.
pub struct Pseudo<'a, F: ?Sized> {
    field: &'a F,
    prefactor: f64,
}

impl<'a, F: UnitField + ?Sized> Pseudo<'a, F> {
    pub fn new(field: &'a F, drive: &DriveParams, species: &ParticleSpecies) -> Self {
        Self { field, prefactor: pseudopotential_prefactor(drive, species) }
    }

    pub fn prefactor(&self) -> f64 {
        self.prefactor
    }

    /// Ψ in eV.
    pub fn value(&self, p: &Vec3) -> f64 {
        self.prefactor * self.field.unit_gradient(p).norm_squared()
    }

    /// ∇Ψ in eV/m.
    pub fn gradient(&self, p: &Vec3) -> Vec3 {
        let g = self.field.unit_gradient(p);
        let h = gradient_jacobian(self.field, p);
        let hs = 0.5 * (h + h.transpose());
        hs * g * (2.0 * self.prefactor)
    }

    /// Transverse (x, z) gradient at height `z`, fixed `y`.
    pub fn gradient_xz(&self, x: f64, y: f64, z: f64) -> Vector2<f64> {
        let g = self.gradient(&Vec3::new(x, y, z));
        Vector2::new(g.x, g.z)
    }

    /// Transverse Hessian of Ψ in eV/m², central differences of the gradient.
    pub fn hessian_xz(&self, x: f64, y: f64, z: f64) -> Matrix2<f64> {
        let h = (1e-4 * z).max(1e-8);
        let gxp = self.gradient_xz(x + h, y, z);
        let gxm = self.gradient_xz(x - h, y, z);
        let gzp = self.gradient_xz(x, y, z + h);
        let gzm = self.gradient_xz(x, y, z - h);
        let cx = (gxp - gxm) / (2.0 * h);
        let cz = (gzp - gzm) / (2.0 * h);
        let off = 0.5 * (cx.y + cz.x);
        Matrix2::new(cx.x, off, off, cz.y)
    }
}

/// Stability parameter `q = η (Q/M) 2V0 / (Ω² R0²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityQ {
    pub q: f64,
    pub stable: bool,
}

pub fn stability_q(eta: f64, species: &ParticleSpecies, drive: &DriveParams, r0: f64) -> StabilityQ {
    let q = eta * species.charge_to_mass() * 2.0 * drive.v0 / (drive.omega * drive.omega * r0 * r0);
    StabilityQ { q, stable: q > 0.0 && q < 0.9 }
}

/// Secular frequency `ω = q Ω / √8` of the small-q pseudopotential limit.
pub fn secular_omega(q: f64, drive: &DriveParams) -> f64 {
    q * drive.omega / 8f64.sqrt()
}

/// Potential depth `U = (η/u)(q/8)V0`, volts.
pub fn depth_formula(eta: f64, u: f64, q: f64, drive: &DriveParams) -> f64 {
    eta / u * q / 8.0 * drive.v0
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MinimumError {
    #[error("minimum search did not converge after {iterations} iterations (last x = {x} m, z = {z} m, |∇Ψ| = {gradient_norm} eV/m)")]
    NotConverged { x: f64, z: f64, gradient_norm: f64, iterations: usize },
    #[error("converged to a stationary point that is not a minimum (x = {x} m, z = {z} m)")]
    NotAMinimum { x: f64, z: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimumOptions {
    /// Convergence threshold on |∇Ψ| in the transverse plane, eV/m.
    pub gradient_tol: f64,
    pub max_iterations: usize,
}

impl Default for MinimumOptions {
    fn default() -> Self {
        Self { gradient_tol: 1e-9, max_iterations: 200 }
    }
}

/// A local minimum of Ψ in the transverse plane at fixed `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransverseMinimum {
    pub x: f64,
    pub z: f64,
    /// eV.
    pub psi: f64,
    /// eV/m.
    pub gradient_norm: f64,
    /// Transverse Hessian, eV/m², row-major `[xx, xz, zx, zz]`.
    pub hessian: [f64; 4],
    pub iterations: usize,
}

impl TransverseMinimum {
    pub fn hessian_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.hessian[0], self.hessian[1], self.hessian[2], self.hessian[3])
    }

    /// Harmonic angular frequencies along x and z, rad/s.
    pub fn omegas(&self, species: &ParticleSpecies) -> (f64, f64) {
        let k = ELEMENTARY_CHARGE / species.mass;
        ((self.hessian[0] * k).max(0.0).sqrt(), (self.hessian[3] * k).max(0.0).sqrt())
    }
}

/// Trust-region Newton descent on Ψ(x, z) at fixed `y`.
pub fn find_transverse_minimum<F: UnitField + ?Sized>(
    field: &F,
    drive: &DriveParams,
    species: &ParticleSpecies,
    y: f64,
    initial_guess: (f64, f64),
    options: &MinimumOptions,
) -> Result<TransverseMinimum, MinimumError> {
    if !(initial_guess.1 > 0.0) {
        return Err(FieldError::NotAbovePlane { z: initial_guess.1 }.into());
    }
    let pseudo = Pseudo::new(field, drive, species);
    descend(&pseudo, y, Vector2::new(initial_guess.0, initial_guess.1), options)
}

fn descend<F: UnitField + ?Sized>(
    pseudo: &Pseudo<'_, F>,
    y: f64,
    start: Vector2<f64>,
    options: &MinimumOptions,
) -> Result<TransverseMinimum, MinimumError> {
    let value = |v: &Vector2<f64>| pseudo.value(&Vec3::new(v.x, y, v.y));
    let mut p = start;
    let mut f = value(&p);
    let mut radius = 0.1 * p.y;
    let mut stalled = 0;
    for it in 0..options.max_iterations {
        let g = pseudo.gradient_xz(p.x, y, p.y);
        let gn = g.norm();
        let h = pseudo.hessian_xz(p.x, y, p.y);
        if gn < options.gradient_tol || stalled > 8 {
            let eig = h.symmetric_eigen();
            if eig.eigenvalues.min() <= 0.0 {
                return Err(MinimumError::NotAMinimum { x: p.x, z: p.y });
            }
            if gn >= options.gradient_tol {
                return Err(MinimumError::NotConverged { x: p.x, z: p.y, gradient_norm: gn, iterations: it });
            }
            return Ok(TransverseMinimum {
                x: p.x,
                z: p.y,
                psi: f,
                gradient_norm: gn,
                hessian: [h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]],
                iterations: it,
            });
        }
        let step = trust_region_step(&h, &g, radius);
        let mut trial = p + step;
        if trial.y <= 0.0 {
            trial.y = 0.5 * p.y;
        }
        let ft = value(&trial);
        let predicted = -(g.dot(&step) + 0.5 * step.dot(&(h * step)));
        let actual = f - ft;
        // Once Ψ differences sit below rounding, accept Newton steps that
        // reduce the gradient instead.
        let flat = actual.abs() <= 1e-13 * f.abs().max(1e-300) && predicted.abs() <= 1e-13 * f.abs().max(1e-300);
        let accept = if flat {
            pseudo.gradient_xz(trial.x, y, trial.y).norm() < gn
        } else {
            actual > 0.0
        };
        if accept {
            let ratio = if predicted > 0.0 { actual / predicted } else { 1.0 };
            if ratio > 0.75 && step.norm() > 0.8 * radius {
                radius *= 2.0;
            } else if ratio < 0.25 {
                radius *= 0.5;
            }
            p = trial;
            f = ft;
            stalled = 0;
        } else {
            radius = 0.25 * step.norm();
            if radius < 1e-15 * p.y.abs().max(1e-6) {
                stalled += 1;
                radius = 1e-12 * p.y;
            }
        }
        radius = radius.min(0.5 * p.y).max(1e-16);
    }
    let g = pseudo.gradient_xz(p.x, y, p.y);
    Err(MinimumError::NotConverged { x: p.x, z: p.y, gradient_norm: g.norm(), iterations: options.max_iterations })
}

/// Levenberg-shifted Newton step restricted to the trust radius.
fn trust_region_step(h: &Matrix2<f64>, g: &Vector2<f64>, radius: f64) -> Vector2<f64> {
    let eig = h.symmetric_eigen();
    let lmin = eig.eigenvalues.min();
    let q = eig.eigenvectors;
    let gq = q.transpose() * g;
    let step_for = |shift: f64| -> Vector2<f64> {
        let c = Vector2::new(-gq[0] / (eig.eigenvalues[0] + shift), -gq[1] / (eig.eigenvalues[1] + shift));
        q * c
    };
    if lmin > 0.0 {
        let s = step_for(0.0);
        if s.norm() <= radius {
            return s;
        }
    }
    let mut lo = (-lmin).max(0.0) + 1e-300;
    let scale = eig.eigenvalues.abs().max().max(1e-300);
    let mut hi = lo + scale + g.norm() / radius;
    if g.norm() == 0.0 || step_for(lo + 1e-12 * scale).norm() <= radius && lmin <= 0.0 {
        // Hard case: move along the most negative curvature direction.
        let k = if eig.eigenvalues[0] <= eig.eigenvalues[1] { 0 } else { 1 };
        let mut v: Vector2<f64> = q.column(k).into();
        if v.x < 0.0 || (v.x == 0.0 && v.y < 0.0) {
            v = -v;
        }
        return v * radius;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if step_for(mid).norm() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    step_for(hi)
}

/// Newton iteration for a stationary point of Ψ (used for saddles).
fn stationary_point<F: UnitField + ?Sized>(pseudo: &Pseudo<'_, F>, y: f64, start: Vector2<f64>) -> Option<Vector2<f64>> {
    let mut p = start;
    let cap = 0.05 * start.y;
    for _ in 0..60 {
        let g = pseudo.gradient_xz(p.x, y, p.y);
        if g.norm() < 1e-9 {
            return Some(p);
        }
        let h = pseudo.hessian_xz(p.x, y, p.y);
        let mut step = -h.try_inverse()? * g;
        if step.norm() > cap {
            step *= cap / step.norm();
        }
        p += step;
        if p.y <= 0.0 {
            return None;
        }
    }
    let g = pseudo.gradient_xz(p.x, y, p.y);
    (g.norm() < 1e-6).then_some(p)
}

/// Search rectangle for the coarse scan that seeds the minimum finder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchWindow {
    pub x_half_width: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub nx: usize,
    pub nz: usize,
}

impl SearchWindow {
    pub fn around_height(height: f64) -> Self {
        Self { x_half_width: 1.5 * height, z_min: 0.2 * height, z_max: 2.5 * height, nx: 31, nz: 25 }
    }
}

/// All local minima found in `window` at fixed `y`, refined and sorted by x.
///
/// `seeds` are tried first (continuation from a neighbouring station), then the
/// local minima of a coarse grid scan. Mirror-symmetric fields get exact mirror
/// partners for every minimum off the axis.
pub fn transverse_minima<F: UnitField + ?Sized>(
    field: &F,
    drive: &DriveParams,
    species: &ParticleSpecies,
    y: f64,
    window: &SearchWindow,
    seeds: &[(f64, f64)],
    mirror_symmetric: bool,
    options: &MinimumOptions,
) -> Vec<TransverseMinimum> {
    let pseudo = Pseudo::new(field, drive, species);
    let mut starts: Vec<Vector2<f64>> = seeds.iter().map(|&(x, z)| Vector2::new(x, z)).collect();
    let nx = window.nx.max(3);
    let nz = window.nz.max(3);
    let x0 = if mirror_symmetric { 0.0 } else { -window.x_half_width };
    let xs: Vec<f64> = (0..nx).map(|i| x0 + (window.x_half_width - x0) * i as f64 / (nx - 1) as f64).collect();
    let zs: Vec<f64> =
        (0..nz).map(|j| window.z_min + (window.z_max - window.z_min) * j as f64 / (nz - 1) as f64).collect();
    let grid: Vec<f64> = xs
        .iter()
        .flat_map(|&x| zs.iter().map(move |&z| (x, z)))
        .map(|(x, z)| pseudo.value(&Vec3::new(x, y, z)))
        .collect();
    let at = |i: usize, j: usize| grid[i * nz + j];
    for i in 0..nx {
        for j in 1..nz - 1 {
            let v = at(i, j);
            let mut is_min = true;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let ii = i as i64 + di;
                    let jj = j as i64 + dj;
                    let ii = if ii < 0 {
                        if mirror_symmetric {
                            1
                        } else {
                            continue;
                        }
                    } else {
                        ii
                    };
                    if ii >= nx as i64 {
                        continue;
                    }
                    if at(ii as usize, jj as usize) < v {
                        is_min = false;
                    }
                }
            }
            if is_min {
                starts.push(Vector2::new(xs[i], zs[j]));
            }
        }
    }
    let mut found: Vec<TransverseMinimum> = Vec::new();
    let dedupe = 1e-7_f64.max(1e-4 * window.z_max);
    for s in starts {
        if let Ok(m) = descend(&pseudo, y, s, options) {
            push_unique(&mut found, m, dedupe);
        }
    }
    if mirror_symmetric {
        // Off-axis minima are paired, on-axis ones are exactly symmetric already.
        let partners: Vec<TransverseMinimum> = found
            .iter()
            .filter(|m| m.x.abs() > dedupe)
            .map(|m| TransverseMinimum {
                x: -m.x,
                hessian: [m.hessian[0], -m.hessian[1], -m.hessian[2], m.hessian[3]],
                ..*m
            })
            .collect();
        found.retain(|m| m.x >= -dedupe);
        let mut all: Vec<TransverseMinimum> = Vec::new();
        for m in found.into_iter().filter(|m| m.x.abs() <= dedupe || m.x > 0.0).chain(partners) {
            push_unique(&mut all, m, dedupe);
        }
        found = all;
    }
    found.sort_by(|a, b| a.x.total_cmp(&b.x));
    found
}

fn push_unique(list: &mut Vec<TransverseMinimum>, m: TransverseMinimum, tol: f64) {
    if !list.iter().any(|o| (o.x - m.x).hypot(o.z - m.z) < tol) {
        list.push(m);
    }
}

/// Highest point along a minimum-energy path between two minima, found by a
/// 64-node string relaxed with perpendicular gradient steps, refined to the
/// exact saddle point with Newton's method.
pub fn barrier_between<F: UnitField + ?Sized>(
    field: &F,
    drive: &DriveParams,
    species: &ParticleSpecies,
    y: f64,
    a: &TransverseMinimum,
    b: &TransverseMinimum,
) -> Option<(f64, f64, f64)> {
    const NODES: usize = 64;
    let pseudo = Pseudo::new(field, drive, species);
    let pa = Vector2::new(a.x, a.z);
    let pb = Vector2::new(b.x, b.z);
    let length = (pb - pa).norm();
    if length == 0.0 {
        return None;
    }
    let mut nodes: Vec<Vector2<f64>> = (0..NODES).map(|i| pa + (pb - pa) * (i as f64 / (NODES - 1) as f64)).collect();
    let seg = length / (NODES - 1) as f64;
    for _ in 0..300 {
        let mut moved = 0.0_f64;
        let grads: Vec<Vector2<f64>> = nodes.iter().map(|n| pseudo.gradient_xz(n.x, y, n.y)).collect();
        let gmax = grads[1..NODES - 1].iter().map(|g| g.norm()).fold(0.0, f64::max).max(1e-300);
        for i in 1..NODES - 1 {
            let tangent = (nodes[i + 1] - nodes[i - 1]).normalize();
            let g = grads[i];
            let perp = g - tangent * g.dot(&tangent);
            let d = -perp * (0.2 * seg / gmax);
            let mut next = nodes[i] + d;
            next.y = next.y.max(0.05 * nodes[i].y);
            moved = moved.max((next - nodes[i]).norm());
            nodes[i] = next;
        }
        nodes = reparametrize(&nodes);
        if moved < 1e-3 * seg {
            break;
        }
    }
    let values: Vec<f64> = nodes.iter().map(|n| pseudo.value(&Vec3::new(n.x, y, n.y))).collect();
    let (imax, vmax) =
        values.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    if imax == 0 || imax == NODES - 1 {
        return None;
    }
    match stationary_point(&pseudo, y, nodes[imax]) {
        Some(s) => Some((s.x, s.y, pseudo.value(&Vec3::new(s.x, y, s.y)))),
        None => Some((nodes[imax].x, nodes[imax].y, vmax)),
    }
}

fn reparametrize(nodes: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let n = nodes.len();
    let mut cum = vec![0.0; n];
    for i in 1..n {
        cum[i] = cum[i - 1] + (nodes[i] - nodes[i - 1]).norm();
    }
    let total = cum[n - 1];
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for i in 0..n {
        let s = total * i as f64 / (n - 1) as f64;
        while k < n - 2 && cum[k + 1] < s {
            k += 1;
        }
        let span = cum[k + 1] - cum[k];
        let w = if span > 0.0 { (s - cum[k]) / span } else { 0.0 };
        out.push(nodes[k] + (nodes[k + 1] - nodes[k]) * w);
    }
    out[0] = nodes[0];
    out[n - 1] = nodes[n - 1];
    out
}

/// Escape depth above a minimum: highest Ψ along the vertical line through it,
/// refined to the saddle point.
pub fn escape_depth<F: UnitField + ?Sized>(
    field: &F,
    drive: &DriveParams,
    species: &ParticleSpecies,
    y: f64,
    m: &TransverseMinimum,
) -> Option<f64> {
    let pseudo = Pseudo::new(field, drive, species);
    let samples = 240;
    let top = 6.0 * m.z;
    let (mut best_z, mut best) = (m.z, m.psi);
    for k in 1..=samples {
        let z = m.z + (top - m.z) * k as f64 / samples as f64;
        let v = pseudo.value(&Vec3::new(m.x, y, z));
        if v > best {
            best = v;
            best_z = z;
        }
    }
    if best_z >= top * (1.0 - 1.0 / samples as f64) || best_z == m.z {
        return None;
    }
    let saddle = stationary_point(&pseudo, y, Vector2::new(m.x, best_z))
        .filter(|s| (s.y - best_z).abs() < 0.5 * (best_z - m.z))
        .map(|s| pseudo.value(&Vec3::new(s.x, y, s.y)))
        .unwrap_or(best);
    Some(saddle - m.psi)
}

/// One characterized station along the guide.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuideStation {
    pub y: f64,
    /// Minima sorted by x; one for a single well, two for a double well.
    pub minima: Vec<TransverseMinimum>,
    pub omega_x: f64,
    pub omega_z: f64,
    /// `√8 ω / Ω` with ω the mean of the two transverse frequencies.
    pub q_param: f64,
    /// Escape depth above the primary minimum, eV.
    pub depth: Option<f64>,
    /// Distance between the two wells, m (0 for a single well).
    pub well_separation: f64,
    /// Saddle height above the lower well, eV (0 for a single well).
    pub barrier_height: f64,
    pub saddle: Option<(f64, f64)>,
}

impl GuideStation {
    /// Minimum with the largest x: the right well, or the only one.
    pub fn primary(&self) -> &TransverseMinimum {
        self.minima.last().expect("station has at least one minimum")
    }

    pub fn is_double_well(&self) -> bool {
        self.minima.len() >= 2
    }

    pub fn omega(&self) -> f64 {
        0.5 * (self.omega_x + self.omega_z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CharacterizedGuide {
    pub drive: DriveParams,
    pub species: ParticleSpecies,
    pub stations: Vec<GuideStation>,
    /// Geometry constant η from matching the q formula to the Hessian-fit q
    /// over the single-well stations (median).
    pub eta: Option<f64>,
    /// Geometry constant u from matching the depth formula to the measured depth.
    pub u: Option<f64>,
    /// Set when the path could not be followed to the end of the range.
    pub truncated: Option<String>,
}

impl CharacterizedGuide {
    pub fn station_near(&self, y: f64) -> Option<&GuideStation> {
        self.stations.iter().min_by(|a, b| (a.y - y).abs().total_cmp(&(b.y - y).abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharacterizeOptions {
    pub window: SearchWindow,
    /// Initial height guess for the first station.
    pub height_guess: f64,
    pub compute_depth: bool,
    pub workers: Workers,
}

impl CharacterizeOptions {
    pub fn for_height(height_guess: f64) -> Self {
        Self { window: SearchWindow::around_height(height_guess), height_guess, compute_depth: true, workers: Workers::default() }
    }
}

fn characterize_station<F: UnitField + ?Sized>(
    field: &F,
    drive: &DriveParams,
    species: &ParticleSpecies,
    y: f64,
    seeds: &[(f64, f64)],
    mirror: bool,
    opts: &CharacterizeOptions,
) -> Result<GuideStation, String> {
    let minima = transverse_minima(field, drive, species, y, &opts.window, seeds, mirror, &MinimumOptions::default());
    if minima.is_empty() {
        return Err(format!("no pseudopotential minimum found at y = {y:.6e} m"));
    }
    // Keep the two deepest wells nearest the axis; spurious surface minima are dropped.
    let mut minima = minima;
    if minima.len() > 2 {
        minima.sort_by(|a, b| a.psi.total_cmp(&b.psi));
        minima.truncate(if mirror && minima[0].x.abs() > 1e-7 { 2 } else { 1 });
        minima.sort_by(|a, b| a.x.total_cmp(&b.x));
    }
    let main = *minima.last().unwrap();
    let (omega_x, omega_z) = main.omegas(species);
    let q_param = 8f64.sqrt() * 0.5 * (omega_x + omega_z) / drive.omega;
    let depth = if opts.compute_depth { escape_depth(field, drive, species, y, &main) } else { None };
    let (mut well_separation, mut barrier_height, mut saddle) = (0.0, 0.0, None);
    if minima.len() == 2 {
        let (a, b) = (minima[0], minima[1]);
        if let Some((sx, sz, psi_s)) = barrier_between(field, drive, species, y, &a, &b) {
            let lower = a.psi.min(b.psi);
            if psi_s > lower {
                well_separation = (b.x - a.x).hypot(b.z - a.z);
                barrier_height = psi_s - lower;
                saddle = Some((sx, sz));
            }
        }
        if barrier_height == 0.0 {
            minima = vec![if a.psi <= b.psi { a } else { b }];
        }
    }
    Ok(GuideStation { y, minima, omega_x, omega_z, q_param, depth, well_separation, barrier_height, saddle })
}

/// Follow the minimum path(s) over `y_start..=y_end` in steps of `step`.
///
/// Stations are split into contiguous chunks processed in order (the previous
/// minimum seeds the next search); chunks run on separate workers, each seeded
/// by a fresh coarse scan, so results do not depend on the worker count.
pub fn characterize_guide<F: UnitField + ?Sized>(
    field: &F,
    drive: &DriveParams,
    species: &ParticleSpecies,
    y_start: f64,
    y_end: f64,
    step: f64,
    mirror_symmetric: bool,
    opts: &CharacterizeOptions,
) -> CharacterizedGuide {
    assert!(step > 0.0, "station step must be positive");
    let count = ((y_end - y_start) / step + 1e-9).floor() as usize + 1;
    let ys: Vec<f64> = (0..count).map(|i| y_start + step * i as f64).collect();
    // Fixed chunking keeps the seed chain identical for any worker count.
    let chunk = 8usize;
    let chunks: Vec<Vec<f64>> = ys.chunks(chunk).map(|c| c.to_vec()).collect();
    let results = exec::map(opts.workers, &chunks, |ys| {
        let mut out = Vec::new();
        let mut seeds: Vec<(f64, f64)> = vec![(0.0, opts.height_guess)];
        for &y in ys {
            match characterize_station(field, drive, species, y, &seeds, mirror_symmetric, opts) {
                Ok(st) => {
                    seeds = st.minima.iter().map(|m| (m.x, m.z)).collect();
                    out.push(Ok(st));
                }
                Err(e) => {
                    out.push(Err(e));
                    break;
                }
            }
        }
        out
    });
    let mut stations = Vec::new();
    let mut truncated = None;
    'outer: for chunk in results {
        for r in chunk {
            match r {
                Ok(s) => stations.push(s),
                Err(e) => {
                    truncated = Some(e);
                    break 'outer;
                }
            }
        }
    }
    let etas: Vec<f64> = stations
        .iter()
        .filter(|s| !s.is_double_well() && s.q_param > 0.0)
        .map(|s| eta_from_station(s, drive, species))
        .collect();
    let eta = median(etas);
    let u = eta.and_then(|eta| {
        median(
            stations
                .iter()
                .filter(|s| !s.is_double_well())
                .filter_map(|s| s.depth.filter(|d| *d > 0.0).map(|d| eta * s.q_param * drive.v0 / (8.0 * d)))
                .collect(),
        )
    });
    CharacterizedGuide { drive: *drive, species: *species, stations, eta, u, truncated }
}

/// η that makes the q formula reproduce the Hessian-fit q at this station.
pub fn eta_from_station(s: &GuideStation, drive: &DriveParams, species: &ParticleSpecies) -> f64 {
    let r0 = s.primary().z;
    s.q_param * drive.omega * drive.omega * r0 * r0 / (species.charge_to_mass() * 2.0 * drive.v0)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Rectilinear sampling of Ψ in the transverse plane at fixed `y`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoMap {
    pub y: f64,
    pub xs: Vec<f64>,
    pub zs: Vec<f64>,
    /// eV, index `ix * zs.len() + iz`.
    pub values: Vec<f64>,
}

impl PseudoMap {
    pub fn value(&self, ix: usize, iz: usize) -> f64 {
        self.values[ix * self.zs.len() + iz]
    }

    /// Grid node with the smallest Ψ.
    pub fn grid_minimum(&self) -> (f64, f64, f64) {
        let (k, v) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        (self.xs[k / self.zs.len()], self.zs[k % self.zs.len()], v)
    }
}

pub fn pseudo_map_xz<F: UnitField + ?Sized>(
    field: &F,
    drive: &DriveParams,
    species: &ParticleSpecies,
    y: f64,
    x_range: (f64, f64),
    z_range: (f64, f64),
    nx: usize,
    nz: usize,
    workers: Workers,
) -> Result<PseudoMap, FieldError> {
    if !(z_range.0 > 0.0) {
        return Err(FieldError::NotAbovePlane { z: z_range.0 });
    }
    let lin = |(a, b): (f64, f64), n: usize| -> Vec<f64> {
        if n <= 1 {
            vec![a]
        } else {
            (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
        }
    };
    let xs = lin(x_range, nx);
    let zs = lin(z_range, nz);
    let pseudo = Pseudo::new(field, drive, species);
    let rows = exec::map(workers, &xs, |&x| zs.iter().map(|&z| pseudo.value(&Vec3::new(x, y, z))).collect::<Vec<f64>>());
    Ok(PseudoMap { y, xs, zs, values: rows.into_iter().flatten().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::electrostatics::QuadrupoleField;

    #[test]
    fn quadrupole_closed_form() {
        let quad = QuadrupoleField { center_height: 300e-6, radius: 400e-6 };
        let drive = DriveParams::experiment();
        let e = ParticleSpecies::electron();
        let p = Vec3::new(30e-6, 0.0, 260e-6);
        let g = (30e-6f64.powi(2) + 40e-6f64.powi(2)).sqrt() / (400e-6f64 * 400e-6);
        let expect = e.charge.powi(2) * 16.0f64.powi(2) * g * g / (4.0 * e.mass * drive.omega.powi(2)) / ELEMENTARY_CHARGE;
        let psi = pseudopotential_at(&quad, &drive, &e, &p).unwrap();
        assert!((psi - expect).abs() <= 1e-14 * expect);
        let on_axis = pseudopotential_at(&quad, &drive, &e, &Vec3::new(0.0, 0.0, 300e-6)).unwrap();
        assert_eq!(on_axis, 0.0);
        let doubled = pseudopotential_at(&quad, &drive.with_omega(2.0 * drive.omega), &e, &p).unwrap();
        assert!((doubled - 0.25 * psi).abs() <= 1e-15 * psi);
    }

    #[test]
    fn quadrupole_minimum_and_frequency() {
        let r0 = 400e-6;
        let quad = QuadrupoleField { center_height: 300e-6, radius: r0 };
        let drive = DriveParams::experiment();
        let e = ParticleSpecies::electron();
        let m = find_transverse_minimum(&quad, &drive, &e, 0.0, (40e-6, 350e-6), &MinimumOptions::default()).unwrap();
        assert!(m.x.abs() < 1e-12 && (m.z - 300e-6).abs() < 1e-12, "{m:?}");
        assert!(m.gradient_norm < 1e-9);
        let (wx, wz) = m.omegas(&e);
        // q = 2 (Q/M) V0 / (Ω² r0²) and ω = q Ω / √8.
        let q = stability_q(1.0, &e, &drive, r0).q;
        let w = secular_omega(q, &drive);
        assert!((wx - w).abs() < 1e-6 * w && (wz - w).abs() < 1e-6 * w, "{wx} {wz} {w}");
    }

    #[test]
    fn stability_flags() {
        let e = ParticleSpecies::electron();
        let d = DriveParams::experiment();
        assert_eq!(stability_q(1.0, &e, &d.with_v0(0.0), 1e-3).q, 0.0);
        assert!(!stability_q(1.0, &e, &d.with_v0(0.0), 1e-3).stable);
        assert!(stability_q(0.1, &e, &d, 450e-6).stable);
        assert!(!stability_q(100.0, &e, &d, 450e-6).stable);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(DriveParams::new(0.0, 1.0, 0.0).is_err());
        assert!(DriveParams::new(1.0, -1.0, 0.0).is_err());
        assert!(ParticleSpecies::new(1.0, 0.0).is_err());
        let quad = QuadrupoleField { center_height: 1e-3, radius: 1e-3 };
        assert!(find_transverse_minimum(&quad, &DriveParams::experiment(), &ParticleSpecies::electron(), 0.0, (0.0, -1.0), &MinimumOptions::default()).is_err());
    }
}
