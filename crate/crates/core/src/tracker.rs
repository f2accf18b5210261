//! Classical trajectories in the oscillating surface-electrode field and
//! synthesis of detector images from ensembles.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::electrostatics::{UnitField, Vec3};
use crate::exec::{self, Workers};
use crate::pseudopot::{DriveParams, ParticleSpecies};
use crate::units::{joule_to_ev, speed_from_ev, ELEMENTARY_CHARGE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error("initial position {0:?} lies outside the simulation domain")]
    OutsideDomain([f64; 3]),
    #[error("invalid source: {0}")]
    Source(String),
}

/// Box outside of which a particle counts as lost.
///
/// Over the substrate (`y ≤ substrate_end`) the floor is the chip plane
/// `z = 0`; in the field-free drift past the chip edge the box extends down
/// to `z = −z_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub x_half_width: f64,
    pub z_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub substrate_end: f64,
}

impl Domain {
    /// `0 < z ≤ 3 mm`, `|x| ≤ 6 mm`, `0 ≤ y ≤ chip length + drift`.
    pub fn for_chip(chip_length: f64, drift: f64) -> Self {
        Self { x_half_width: 6e-3, z_max: 3e-3, y_min: 0.0, y_max: chip_length + drift, substrate_end: chip_length }
    }

    pub fn floor_at(&self, y: f64) -> f64 {
        if y > self.substrate_end {
            -self.z_max
        } else {
            0.0
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        p.z > self.floor_at(p.y)
            && p.z <= self.z_max
            && p.x.abs() <= self.x_half_width
            && p.y >= self.y_min
            && p.y <= self.y_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorPlane {
    pub y: f64,
    /// Detected electrons with `|x|` below this are counted in the loss band.
    pub spot_gate: f64,
    pub bin_size: f64,
    pub x_half_width: f64,
    /// The image spans `−z_half_width..z_half_width`, since the plane lies past the chip edge.
    pub z_half_width: f64,
}

impl DetectorPlane {
    pub fn at(y: f64) -> Self {
        Self { y, spot_gate: 1.5e-3, bin_size: 50e-6, x_half_width: 6e-3, z_half_width: 3e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
}

impl ParticleState {
    pub fn new(position: Vec3, velocity: Vec3) -> Self {
        Self { position: position.into(), velocity: velocity.into() }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::from(self.position)
    }

    pub fn velocity(&self) -> Vec3 {
        Vec3::from(self.velocity)
    }

    pub fn mirrored(&self) -> Self {
        let [x, y, z] = self.position;
        let [vx, vy, vz] = self.velocity;
        Self { position: [-x, y, z], velocity: [-vx, vy, vz] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    GuidedLeft,
    GuidedRight,
    /// Reached the detector inside the loss band between the spots.
    LostDetected,
    /// Left the domain before the detector plane.
    LostInFlight,
    TimedOut,
    Failed,
}

impl Outcome {
    pub fn is_guided(&self) -> bool {
        matches!(self, Outcome::GuidedLeft | Outcome::GuidedRight)
    }

    pub fn is_lost(&self) -> bool {
        matches!(self, Outcome::LostDetected | Outcome::LostInFlight)
    }

    pub fn reached_detector(&self) -> bool {
        matches!(self, Outcome::GuidedLeft | Outcome::GuidedRight | Outcome::LostDetected)
    }

    pub fn mirrored(&self) -> Self {
        match self {
            Outcome::GuidedLeft => Outcome::GuidedRight,
            Outcome::GuidedRight => Outcome::GuidedLeft,
            o => *o,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Outcome::GuidedLeft => "guided_left",
            Outcome::GuidedRight => "guided_right",
            Outcome::LostDetected => "lost_detected",
            Outcome::LostInFlight => "lost_in_flight",
            Outcome::TimedOut => "timed_out",
            Outcome::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateSample {
    pub t: f64,
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    /// Kinetic plus instantaneous electric potential energy, eV.
    pub energy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub initial: ParticleState,
    /// Drive phase at release, radians.
    pub release_phase: f64,
    pub samples: Vec<StateSample>,
    pub outcome: Outcome,
    /// State at the detector plane, at the loss point, or at the last step.
    pub exit: StateSample,
    pub stats: StepStats,
    /// Largest relative deviation of the recorded total energy from its initial value.
    pub energy_drift: Option<f64>,
    pub diagnostic: Option<String>,
}

/// Integrator and termination settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackOptions {
    pub rtol: f64,
    /// Position tolerance, m. Velocity components use `atol · Ω`.
    pub atol: f64,
    /// Largest step as a fraction of the drive period.
    pub max_step_fraction: f64,
    pub min_step: f64,
    pub t_max: f64,
    pub sample_interval: Option<f64>,
    pub record_energy: bool,
    /// Evaluate the drive at `t = 0` for all times (static-field mode).
    pub frozen_drive: bool,
}

impl TrackOptions {
    pub fn new(t_max: f64) -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-12,
            max_step_fraction: 1.0 / 20.0,
            min_step: 1e-20,
            t_max,
            sample_interval: None,
            record_energy: false,
            frozen_drive: false,
        }
    }
}

/// Anything that can answer "unit-voltage gradient at p" for the integrator.
pub struct FieldModel<'a> {
    field: &'a dyn UnitField,
    /// Direct field used for the energy bookkeeping potential.
    potential: &'a dyn UnitField,
}

impl<'a> FieldModel<'a> {
    pub fn direct(field: &'a dyn UnitField) -> Self {
        Self { field, potential: field }
    }

    pub fn cached(cache: &'a FieldCache<'a>) -> Self {
        Self { field: cache, potential: cache.source }
    }
}

/// Lazily filled trilinear grid of the unit-voltage gradient, folded onto
/// `x ≥ 0` for mirror-symmetric fields. Blocks are computed on first use and
/// never change afterwards, so lookups are thread safe and deterministic.
pub struct FieldCache<'a> {
    source: &'a dyn UnitField,
    spacing: f64,
    mirror: bool,
    origin: Vec3,
    cells: [usize; 3],
    blocks: [usize; 3],
    storage: Vec<OnceLock<Box<[Vec3]>>>,
}

const BLOCK: usize = 8;
const BLOCK_NODES: usize = BLOCK + 1;

impl<'a> FieldCache<'a> {
    /// Grid over `domain` (x folded to `0..=x_half_width` when `mirror`), starting
    /// one spacing above the plane; points below fall back to direct evaluation.
    pub fn new(source: &'a dyn UnitField, domain: &Domain, spacing: f64, mirror: bool) -> Self {
        let x0 = if mirror { 0.0 } else { -domain.x_half_width };
        let origin = Vec3::new(x0, domain.y_min, spacing);
        let extent = Vec3::new(domain.x_half_width - x0, domain.y_max - domain.y_min, domain.z_max - spacing);
        let cells = [
            (extent.x / spacing).ceil().max(1.0) as usize,
            (extent.y / spacing).ceil().max(1.0) as usize,
            (extent.z / spacing).ceil().max(1.0) as usize,
        ];
        let blocks = [cells[0].div_ceil(BLOCK), cells[1].div_ceil(BLOCK), cells[2].div_ceil(BLOCK)];
        let storage = (0..blocks[0] * blocks[1] * blocks[2]).map(|_| OnceLock::new()).collect();
        Self { source, spacing, mirror, origin, cells, blocks, storage }
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Number of blocks computed so far.
    pub fn filled_blocks(&self) -> usize {
        self.storage.iter().filter(|b| b.get().is_some()).count()
    }

    fn block(&self, b: [usize; 3]) -> &[Vec3] {
        let id = (b[0] * self.blocks[1] + b[1]) * self.blocks[2] + b[2];
        self.storage[id].get_or_init(|| {
            let mut nodes = Vec::with_capacity(BLOCK_NODES.pow(3));
            for i in 0..BLOCK_NODES {
                for j in 0..BLOCK_NODES {
                    for k in 0..BLOCK_NODES {
                        let p = self.origin
                            + Vec3::new(
                                ((b[0] * BLOCK + i) as f64) * self.spacing,
                                ((b[1] * BLOCK + j) as f64) * self.spacing,
                                ((b[2] * BLOCK + k) as f64) * self.spacing,
                            );
                        nodes.push(self.source.unit_gradient(&p));
                    }
                }
            }
            nodes.into_boxed_slice()
        })
    }

    fn interpolate(&self, p: &Vec3) -> Option<Vec3> {
        let rel = (p - self.origin) / self.spacing;
        let mut idx = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let v = rel[a];
            if !(v >= 0.0) {
                return None;
            }
            let i = v.floor() as usize;
            if i > self.cells[a] {
                return None;
            }
            let i = i.min(self.cells[a] - 1);
            idx[a] = i;
            frac[a] = v - i as f64;
            if frac[a] > 1.0 + 1e-9 {
                return None;
            }
        }
        let b = [idx[0] / BLOCK, idx[1] / BLOCK, idx[2] / BLOCK];
        if b[0] >= self.blocks[0] || b[1] >= self.blocks[1] || b[2] >= self.blocks[2] {
            return None;
        }
        let nodes = self.block(b);
        let (i, j, k) = (idx[0] % BLOCK, idx[1] % BLOCK, idx[2] % BLOCK);
        let at = |di: usize, dj: usize, dk: usize| nodes[((i + di) * BLOCK_NODES + (j + dj)) * BLOCK_NODES + (k + dk)];
        let [fx, fy, fz] = frac;
        let lerp = |a: Vec3, b: Vec3, t: f64| a + (b - a) * t;
        let c00 = lerp(at(0, 0, 0), at(1, 0, 0), fx);
        let c10 = lerp(at(0, 1, 0), at(1, 1, 0), fx);
        let c01 = lerp(at(0, 0, 1), at(1, 0, 1), fx);
        let c11 = lerp(at(0, 1, 1), at(1, 1, 1), fx);
        Some(lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz))
    }

    /// RMS of `|∇_cache − ∇_direct|` relative to the RMS of `|∇_direct|` over `points`.
    pub fn relative_error(&self, points: &[Vec3]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for p in points {
            let d = self.source.unit_gradient(p);
            num += (self.unit_gradient(p) - d).norm_squared();
            den += d.norm_squared();
        }
        (num / den.max(1e-300)).sqrt()
    }
}

impl UnitField for FieldCache<'_> {
    fn unit_potential(&self, p: &Vec3) -> f64 {
        self.source.unit_potential(p)
    }

    fn unit_gradient(&self, p: &Vec3) -> Vec3 {
        let flip = self.mirror && p.x < 0.0;
        let q = if flip { Vec3::new(-p.x, p.y, p.z) } else { *p };
        match self.interpolate(&q) {
            Some(mut g) => {
                if flip {
                    g.x = -g.x;
                } else if self.mirror && p.x == 0.0 {
                    g.x = 0.0;
                }
                g
            }
            None => self.source.unit_gradient(p),
        }
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

type State = [f64; 6];

/// Continuous extension of one accepted step.
struct Dense {
    t0: f64,
    h: f64,
    r: [State; 5],
}

impl Dense {
    fn at(&self, t: f64) -> State {
        let th = (t - self.t0) / self.h;
        let th1 = 1.0 - th;
        let mut out = [0.0; 6];
        for i in 0..6 {
            out[i] = self.r[0][i]
                + th * (self.r[1][i] + th1 * (self.r[2][i] + th * (self.r[3][i] + th1 * self.r[4][i])));
        }
        out
    }
}

struct Rhs<'a> {
    model: &'a FieldModel<'a>,
    substrate_end: f64,
    /// −(Q/M)·V0, so that a = k · cos(Ωt + φ) · ∇φ_unit.
    k: f64,
    omega: f64,
    phase: f64,
    frozen: bool,
    evaluations: usize,
}

impl Rhs<'_> {
    fn drive(&self, t: f64) -> f64 {
        if self.frozen {
            self.phase.cos()
        } else {
            (self.omega * t + self.phase).cos()
        }
    }

    fn eval(&mut self, t: f64, y: &State) -> State {
        self.evaluations += 1;
        // Below the plane past the chip edge there is no field; over the chip,
        // stages that dip below the plane are clamped and the step endpoint
        // decides the loss.
        if y[2] <= 0.0 && y[1] > self.substrate_end {
            return [y[3], y[4], y[5], 0.0, 0.0, 0.0];
        }
        let p = Vec3::new(y[0], y[1], y[2].max(1e-7));
        let g = self.model.field.unit_gradient(&p) * (self.k * self.drive(t));
        [y[3], y[4], y[5], g.x, g.y, g.z]
    }
}

fn to_sample(t: f64, y: &State) -> StateSample {
    StateSample { t, position: [y[0], y[1], y[2]], velocity: [y[3], y[4], y[5]], energy: None }
}

/// Integrate `M r̈ = Q E(r, t)` from `initial` until the particle reaches the
/// detector plane `y = detector_y`, leaves `domain`, or `options.t_max` elapses.
pub fn integrate_trajectory(
    model: &FieldModel<'_>,
    drive: &DriveParams,
    species: &ParticleSpecies,
    initial: &ParticleState,
    domain: &Domain,
    detector: Option<&DetectorPlane>,
    options: &TrackOptions,
) -> Result<Trajectory, TrackError> {
    if !domain.contains(&initial.position()) {
        return Err(TrackError::OutsideDomain(initial.position));
    }
    let mut rhs = Rhs {
        model,
        substrate_end: domain.substrate_end,
        k: -species.charge / species.mass * drive.v0,
        omega: drive.omega,
        phase: drive.phase,
        frozen: options.frozen_drive,
        evaluations: 0,
    };
    let energy = |t: f64, y: &State, rhs: &Rhs<'_>| -> f64 {
        let v2 = y[3] * y[3] + y[4] * y[4] + y[5] * y[5];
        let p = Vec3::new(y[0], y[1], y[2]);
        let phi = if p.z > 0.0 { model.potential.unit_potential(&p) } else { 0.0 } * drive.v0 * rhs.drive(t);
        joule_to_ev(0.5 * species.mass * v2 + species.charge * phi)
    };
    let detector_y = detector.map(|d| d.y).unwrap_or(f64::INFINITY);
    let h_max = options.max_step_fraction * drive.period();
    let atol_v = options.atol * drive.omega;
    let tol = |i: usize, a: f64, b: f64| {
        let base = if i < 3 { options.atol } else { atol_v };
        base + options.rtol * a.abs().max(b.abs())
    };

    let p0 = initial.position;
    let v0 = initial.velocity;
    let mut y: State = [p0[0], p0[1], p0[2], v0[0], v0[1], v0[2]];
    let mut t = 0.0;
    let mut k1 = rhs.eval(t, &y);
    let mut h = h_max.min(1e-3 * drive.period().max(options.min_step * 10.0)).max(options.min_step * 10.0);
    h = h.max(0.01 * h_max);

    let mut samples = Vec::new();
    let mut next_sample = options.sample_interval.map(|_| 0.0);
    let e0 = if options.record_energy { Some(energy(0.0, &y, &rhs)) } else { None };
    let mut drift: f64 = 0.0;
    let mut stats = StepStats::default();

    let record = |t: f64, s: &State, samples: &mut Vec<StateSample>, drift: &mut f64, rhs: &Rhs<'_>| {
        let mut smp = to_sample(t, s);
        if let Some(e0) = e0 {
            let e = energy(t, s, rhs);
            *drift = drift.max(((e - e0) / e0).abs());
            smp.energy = Some(e);
        }
        samples.push(smp);
    };

    let finish = |outcome: Outcome, exit: StateSample, samples, stats, drift: f64, diag: Option<String>| Trajectory {
        initial: *initial,
        release_phase: drive.phase,
        samples,
        outcome,
        exit,
        stats,
        energy_drift: e0.map(|_| drift),
        diagnostic: diag,
    };

    loop {
        if t >= options.t_max {
            let exit = to_sample(t, &y);
            stats.evaluations = rhs.evaluations;
            return Ok(finish(Outcome::TimedOut, exit, samples, stats, drift, None));
        }
        let h_step = h.min(h_max).min(options.t_max - t).max(options.min_step);
        let mut k = [[0.0; 6]; 7];
        k[0] = k1;
        for s in 1..7 {
            let mut ys = y;
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = A[s][j];
                if a != 0.0 {
                    for i in 0..6 {
                        ys[i] += h_step * a * kj[i];
                    }
                }
            }
            k[s] = rhs.eval(t + C[s] * h_step, &ys);
        }
        let mut y_new = y;
        for (j, kj) in k.iter().enumerate().take(6) {
            let b = A[6][j];
            for i in 0..6 {
                y_new[i] += h_step * b * kj[i];
            }
        }
        let mut err2 = 0.0;
        for i in 0..6 {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[i];
            }
            let r = h_step * e / tol(i, y[i], y_new[i]);
            err2 += r * r;
        }
        let err = (err2 / 6.0).sqrt();
        if !err.is_finite() || err > 1.0 {
            stats.rejected += 1;
            let factor = if err.is_finite() { (0.9 * err.powf(-0.2)).max(0.2) } else { 0.2 };
            h = h_step * factor;
            if h < options.min_step {
                let exit = to_sample(t, &y);
                stats.evaluations = rhs.evaluations;
                let diag = format!("step size underflow at t = {t:.6e} s (h = {h:.3e} s)");
                return Ok(finish(Outcome::Failed, exit, samples, stats, drift, Some(diag)));
            }
            continue;
        }
        stats.accepted += 1;
        let mut r = [[0.0; 6]; 5];
        for i in 0..6 {
            let diff = y_new[i] - y[i];
            let bspl = h_step * k[0][i] - diff;
            r[0][i] = y[i];
            r[1][i] = diff;
            r[2][i] = bspl;
            r[3][i] = diff - h_step * k[6][i] - bspl;
            let mut d = 0.0;
            for (j, kj) in k.iter().enumerate() {
                d += D[j] * kj[i];
            }
            r[4][i] = h_step * d;
        }
        let dense = Dense { t0: t, h: h_step, r };
        let t_new = t + h_step;

        if let (Some(dt), Some(ns)) = (options.sample_interval, next_sample.as_mut()) {
            while *ns <= t_new {
                let s = if *ns == t { y } else { dense.at(*ns) };
                record(*ns, &s, &mut samples, &mut drift, &rhs);
                *ns += dt;
            }
        }

        let end = Vec3::new(y_new[0], y_new[1], y_new[2]);
        if y_new[1] >= detector_y {
            let tc = bisect(&dense, t, t_new, |s| s[1] - detector_y);
            let s = dense.at(tc);
            let mut exit = to_sample(tc, &s);
            exit.position[1] = detector_y;
            let d = detector.expect("detector set when crossing");
            let in_box = s[2] > domain.floor_at(detector_y) && s[2] <= domain.z_max && s[0].abs() <= domain.x_half_width;
            let outcome = if !in_box {
                Outcome::LostInFlight
            } else if s[0].abs() < d.spot_gate {
                Outcome::LostDetected
            } else if s[0] < 0.0 {
                Outcome::GuidedLeft
            } else {
                Outcome::GuidedRight
            };
            if options.record_energy {
                record(tc, &s, &mut samples, &mut drift, &rhs);
            }
            stats.evaluations = rhs.evaluations;
            return Ok(finish(outcome, exit, samples, stats, drift, None));
        }
        if !domain.contains(&end) {
            let tc = bisect(&dense, t, t_new, |s| if domain.contains(&Vec3::new(s[0], s[1], s[2])) { -1.0 } else { 1.0 });
            let exit = to_sample(tc, &dense.at(tc));
            stats.evaluations = rhs.evaluations;
            return Ok(finish(Outcome::LostInFlight, exit, samples, stats, drift, None));
        }

        y = y_new;
        t = t_new;
        k1 = k[6];
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h = h_step * factor;
    }
}

/// First crossing of `f` from negative to non-negative inside one dense step.
fn bisect(dense: &Dense, mut lo: f64, mut hi: f64, f: impl Fn(&State) -> f64) -> f64 {
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if f(&dense.at(mid)) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Electron source: rays on a disk in the xz plane, each released at several
/// equally spaced drive phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub center: [f64; 3],
    pub diameter: f64,
    pub rays: usize,
    pub phases: usize,
    pub energy_ev: f64,
    /// Half-angle of the velocity cone around +y; zero gives a parallel beam.
    pub half_angle: f64,
    pub seed: u64,
}

impl SourceSpec {
    /// 100 rays on a 100 µm disk, ten release phases, 7 mrad cone half-angle.
    pub fn standard(center: [f64; 3], energy_ev: f64, seed: u64) -> Self {
        Self { center, diameter: 100e-6, rays: 100, phases: 10, energy_ev, half_angle: 7e-3, seed }
    }

    pub fn validate(&self) -> Result<(), TrackError> {
        if !(self.diameter >= 0.0) {
            return Err(TrackError::Source("diameter must be non-negative".into()));
        }
        if self.rays == 0 || self.phases == 0 {
            return Err(TrackError::Source("ray and phase counts must be at least one".into()));
        }
        if !(self.energy_ev > 0.0) {
            return Err(TrackError::Source("kinetic energy must be positive".into()));
        }
        if !(0.0..PI / 2.0).contains(&self.half_angle) {
            return Err(TrackError::Source("cone half-angle must be in [0, π/2)".into()));
        }
        Ok(())
    }

    pub fn shifted_x(&self, dx: f64) -> Self {
        let mut s = *self;
        s.center[0] += dx;
        s
    }

    /// Ray initial states: sunflower points on the disk, cone directions drawn
    /// from a seeded generator.
    pub fn rays(&self, species: &ParticleSpecies) -> Vec<ParticleState> {
        let golden = PI * (3.0 - 5f64.sqrt());
        let speed = speed_from_ev(self.energy_ev, species.mass);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let cos_min = self.half_angle.cos();
        let r_max = 0.5 * self.diameter;
        (0..self.rays)
            .map(|k| {
                let r = r_max * ((k as f64 + 0.5) / self.rays as f64).sqrt();
                let a = k as f64 * golden;
                let pos = Vec3::new(self.center[0] + r * a.cos(), self.center[1], self.center[2] + r * a.sin());
                let u: f64 = rng.random();
                let w: f64 = rng.random();
                let ct = 1.0 - u * (1.0 - cos_min);
                let st = (1.0 - ct * ct).max(0.0).sqrt();
                let ph = 2.0 * PI * w;
                let vel = Vec3::new(st * ph.cos(), ct, st * ph.sin()) * speed;
                ParticleState::new(pos, vel)
            })
            .collect()
    }

    pub fn release_phases(&self) -> Vec<f64> {
        (0..self.phases).map(|i| 2.0 * PI * i as f64 / self.phases as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeTotals {
    pub guided_left: usize,
    pub guided_right: usize,
    pub lost_detected: usize,
    pub lost_in_flight: usize,
    pub timed_out: usize,
    pub failed: usize,
}

impl OutcomeTotals {
    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a Outcome>) -> Self {
        let mut t = OutcomeTotals { guided_left: 0, guided_right: 0, lost_detected: 0, lost_in_flight: 0, timed_out: 0, failed: 0 };
        for o in outcomes {
            match o {
                Outcome::GuidedLeft => t.guided_left += 1,
                Outcome::GuidedRight => t.guided_right += 1,
                Outcome::LostDetected => t.lost_detected += 1,
                Outcome::LostInFlight => t.lost_in_flight += 1,
                Outcome::TimedOut => t.timed_out += 1,
                Outcome::Failed => t.failed += 1,
            }
        }
        t
    }

    pub fn guided(&self) -> usize {
        self.guided_left + self.guided_right
    }

    pub fn detected(&self) -> usize {
        self.guided() + self.lost_detected
    }

    pub fn total(&self) -> usize {
        self.detected() + self.lost_in_flight + self.timed_out + self.failed
    }

    /// Guided share of the electrons that reached the detector.
    pub fn guided_fraction(&self) -> f64 {
        if self.detected() == 0 {
            0.0
        } else {
            self.guided() as f64 / self.detected() as f64
        }
    }

    /// Lost share of the whole ensemble (in flight or in the loss band).
    pub fn loss_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.lost_detected + self.lost_in_flight) as f64 / self.total() as f64
        }
    }

    /// `(N_right − N_left)/(N_right + N_left)`, zero when nothing is guided.
    pub fn asymmetry(&self) -> f64 {
        let n = self.guided();
        if n == 0 {
            0.0
        } else {
            (self.guided_right as f64 - self.guided_left as f64) / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorImage {
    pub plane: DetectorPlane,
    pub nx: usize,
    pub nz: usize,
    /// Row-major `ix * nz + iz`, bins of `plane.bin_size` from `x = −x_half_width`, `z = −z_half_width`.
    pub counts: Vec<u32>,
    pub totals: OutcomeTotals,
}

/// Centre and widths of one output spot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpotStats {
    pub count: usize,
    pub center_x: f64,
    pub center_z: f64,
    pub fwhm_x: f64,
    pub fwhm_z: f64,
}

impl SpotStats {
    /// Mean of the two full widths at half maximum.
    pub fn diameter(&self) -> f64 {
        0.5 * (self.fwhm_x + self.fwhm_z)
    }
}

impl DetectorImage {
    /// Histogram built in trajectory order, so the image never depends on scheduling.
    pub fn build(plane: &DetectorPlane, trajectories: &[Trajectory]) -> Self {
        let nx = (2.0 * plane.x_half_width / plane.bin_size).round() as usize;
        let nz = (2.0 * plane.z_half_width / plane.bin_size).round() as usize;
        let mut counts = vec![0u32; nx * nz];
        for tr in trajectories.iter().filter(|t| t.outcome.reached_detector()) {
            let [x, _, z] = tr.exit.position;
            let ix = (((x + plane.x_half_width) / plane.bin_size).floor() as isize).clamp(0, nx as isize - 1) as usize;
            let iz = (((z + plane.z_half_width) / plane.bin_size).floor() as isize).clamp(0, nz as isize - 1) as usize;
            counts[ix * nz + iz] += 1;
        }
        let totals = OutcomeTotals::from_outcomes(trajectories.iter().map(|t| &t.outcome));
        Self { plane: *plane, nx, nz, counts, totals }
    }

    pub fn total_counts(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn bin_center_x(&self, ix: usize) -> f64 {
        -self.plane.x_half_width + (ix as f64 + 0.5) * self.plane.bin_size
    }

    pub fn bin_center_z(&self, iz: usize) -> f64 {
        -self.plane.z_half_width + (iz as f64 + 0.5) * self.plane.bin_size
    }

    /// Statistics of the spot on one side of the loss band (`side` = ±1).
    pub fn spot(&self, side: f64) -> Option<SpotStats> {
        let gate = self.plane.spot_gate;
        let xs: Vec<usize> = (0..self.nx).filter(|&ix| side * self.bin_center_x(ix) >= gate).collect();
        let mut px = vec![0.0; xs.len()];
        let mut pz = vec![0.0; self.nz];
        let (mut n, mut sx, mut sz) = (0.0, 0.0, 0.0);
        for (k, &ix) in xs.iter().enumerate() {
            for iz in 0..self.nz {
                let c = self.counts[ix * self.nz + iz] as f64;
                px[k] += c;
                pz[iz] += c;
                n += c;
                sx += c * self.bin_center_x(ix);
                sz += c * self.bin_center_z(iz);
            }
        }
        if n == 0.0 {
            return None;
        }
        Some(SpotStats {
            count: n as usize,
            center_x: sx / n,
            center_z: sz / n,
            fwhm_x: fwhm(&px, self.plane.bin_size),
            fwhm_z: fwhm(&pz, self.plane.bin_size),
        })
    }

    /// Distance between the two spot centroids.
    pub fn spot_separation(&self) -> Option<f64> {
        Some(self.spot(1.0)?.center_x - self.spot(-1.0)?.center_x)
    }
}

/// Full width at half maximum of a binned profile, with linear interpolation
/// of the half-maximum crossings on both sides of the peak.
pub fn fwhm(profile: &[f64], bin: f64) -> f64 {
    let Some((peak, &max)) = profile.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else {
        return 0.0;
    };
    if max <= 0.0 {
        return 0.0;
    }
    let half = 0.5 * max;
    let mut left = peak as f64;
    for i in (0..peak).rev() {
        if profile[i] < half {
            left = i as f64 + (half - profile[i]) / (profile[i + 1] - profile[i]);
            break;
        }
        left = i as f64;
    }
    let mut right = peak as f64;
    for i in peak + 1..profile.len() {
        if profile[i] < half {
            right = i as f64 - (half - profile[i]) / (profile[i - 1] - profile[i]);
            break;
        }
        right = i as f64;
    }
    ((right - left) * bin).max(bin)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleResult {
    pub trajectories: Vec<Trajectory>,
    pub image: DetectorImage,
}

impl EnsembleResult {
    /// Among guided electrons with `|x0| > min_offset`, the share whose output
    /// port has the sign of the initial displacement.
    pub fn port_prediction(&self, min_offset: f64) -> Option<f64> {
        let selected: Vec<&Trajectory> = self
            .trajectories
            .iter()
            .filter(|t| t.outcome.is_guided() && t.initial.position[0].abs() > min_offset)
            .collect();
        if selected.is_empty() {
            return None;
        }
        let hits = selected
            .iter()
            .filter(|t| (t.initial.position[0] > 0.0) == (t.outcome == Outcome::GuidedRight))
            .count();
        Some(hits as f64 / selected.len() as f64)
    }

    /// Guided fraction (of detected electrons) for each release phase, in phase order.
    pub fn guided_fraction_by_phase(&self) -> Vec<(f64, f64)> {
        let mut phases: Vec<f64> = self.trajectories.iter().map(|t| t.release_phase).collect();
        phases.sort_by(|a, b| a.total_cmp(b));
        phases.dedup();
        phases
            .into_iter()
            .map(|p| {
                let totals = OutcomeTotals::from_outcomes(
                    self.trajectories.iter().filter(|t| t.release_phase == p).map(|t| &t.outcome),
                );
                (p, totals.guided_fraction())
            })
            .collect()
    }

    /// Share of lost electrons (either kind) whose `|x0|` lies below the
    /// ensemble median of `|x0 − x_center|`.
    pub fn near_axis_loss_share(&self, axis_x: f64) -> Option<f64> {
        let mut d: Vec<f64> = self.trajectories.iter().map(|t| (t.initial.position[0] - axis_x).abs()).collect();
        d.sort_by(|a, b| a.total_cmp(b));
        let median = *d.get(d.len() / 2)?;
        let lost: Vec<&Trajectory> = self.trajectories.iter().filter(|t| t.outcome.is_lost()).collect();
        if lost.is_empty() {
            return None;
        }
        let near = lost.iter().filter(|t| (t.initial.position[0] - axis_x).abs() < median).count();
        Some(near as f64 / lost.len() as f64)
    }
}

/// Trajectories for every (ray, phase) pair; ray index varies slowest.
pub fn run_ensemble(
    model: &FieldModel<'_>,
    drive: &DriveParams,
    species: &ParticleSpecies,
    source: &SourceSpec,
    domain: &Domain,
    detector: &DetectorPlane,
    options: &TrackOptions,
    workers: Workers,
) -> Result<EnsembleResult, TrackError> {
    source.validate()?;
    let rays = source.rays(species);
    for r in &rays {
        if !domain.contains(&r.position()) {
            return Err(TrackError::OutsideDomain(r.position));
        }
    }
    let phases = source.release_phases();
    let jobs: Vec<(ParticleState, f64)> =
        rays.iter().flat_map(|r| phases.iter().map(move |&p| (*r, p))).collect();
    let trajectories: Vec<Trajectory> = exec::map(workers, &jobs, |(state, phase)| {
        let d = DriveParams { phase: drive.phase + phase, ..*drive };
        match integrate_trajectory(model, &d, species, state, domain, Some(detector), options) {
            Ok(t) => t,
            Err(e) => failed_trajectory(state, d.phase, e.to_string()),
        }
    });
    let image = DetectorImage::build(detector, &trajectories);
    Ok(EnsembleResult { trajectories, image })
}

fn failed_trajectory(state: &ParticleState, phase: f64, diag: String) -> Trajectory {
    let exit = StateSample { t: 0.0, position: state.position, velocity: state.velocity, energy: None };
    Trajectory {
        initial: *state,
        release_phase: phase,
        samples: Vec::new(),
        outcome: Outcome::Failed,
        exit,
        stats: StepStats::default(),
        energy_drift: None,
        diagnostic: Some(diag),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisplacedRun {
    pub offset: f64,
    pub image: DetectorImage,
    pub asymmetry: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisplacedScan {
    pub runs: Vec<DisplacedRun>,
    /// Asymmetry is non-increasing (or non-decreasing) with offset across the scan.
    pub monotone_trend: Option<&'static str>,
}

pub fn displaced_source_scan(
    model: &FieldModel<'_>,
    drive: &DriveParams,
    species: &ParticleSpecies,
    base: &SourceSpec,
    offsets: &[f64],
    domain: &Domain,
    detector: &DetectorPlane,
    options: &TrackOptions,
    workers: Workers,
) -> Result<DisplacedScan, TrackError> {
    let mut runs = Vec::with_capacity(offsets.len());
    for &dx in offsets {
        let res = run_ensemble(model, drive, species, &base.shifted_x(dx), domain, detector, options, workers)?;
        runs.push(DisplacedRun { offset: dx, asymmetry: res.image.totals.asymmetry(), image: res.image });
    }
    let mut sorted: Vec<(f64, f64)> = runs.iter().map(|r| (r.offset, r.asymmetry)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let inc = sorted.windows(2).all(|w| w[1].1 >= w[0].1);
    let dec = sorted.windows(2).all(|w| w[1].1 <= w[0].1);
    let monotone_trend = match (inc, dec) {
        (true, true) => Some("constant"),
        (true, false) => Some("increasing"),
        (false, true) => Some("decreasing"),
        _ => None,
    };
    Ok(DisplacedScan { runs, monotone_trend })
}

/// Spatial oscillation period of `x(y)` from the mean spacing of its zero
/// crossings (twice the half-period), restricted to `y_range`.
pub fn spatial_period(samples: &[StateSample], axis_x: f64, y_range: (f64, f64)) -> Option<f64> {
    let mut crossings = Vec::new();
    for w in samples.windows(2) {
        let (a, b) = (w[0].position, w[1].position);
        if a[1] < y_range.0 || b[1] > y_range.1 {
            continue;
        }
        let (xa, xb) = (a[0] - axis_x, b[0] - axis_x);
        if xa == 0.0 || xa.signum() != xb.signum() {
            let f = xa / (xa - xb);
            crossings.push(a[1] + f * (b[1] - a[1]));
        }
    }
    if crossings.len() < 2 {
        return None;
    }
    Some(2.0 * (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64)
}

/// Secular angular frequency in a harmonic guide implied by a spatial period at speed `v`.
pub fn secular_omega_from_period(period: f64, speed: f64) -> f64 {
    2.0 * PI * speed / period
}

/// eV of the instantaneous potential energy per unit-voltage potential, for reference.
pub fn potential_energy_ev(species: &ParticleSpecies, phi: f64) -> f64 {
    species.charge * phi / ELEMENTARY_CHARGE
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::electrostatics::{NullField, QuadrupoleField};

    fn far_domain() -> Domain {
        Domain { x_half_width: 1.0, z_max: 1.0, y_min: -1.0, y_max: 1.0, substrate_end: 1.0 }
    }

    #[test]
    fn free_flight_is_a_straight_line() {
        let field = NullField;
        let model = FieldModel::direct(&field);
        let drive = DriveParams::experiment();
        let e = ParticleSpecies::electron();
        let v = Vec3::new(1e3, 7e5, -2e3);
        let init = ParticleState::new(Vec3::new(1e-4, 0.0, 0.5), v);
        let mut o = TrackOptions::new(5e-7);
        o.sample_interval = Some(1e-8);
        let tr = integrate_trajectory(&model, &drive, &e, &init, &far_domain(), None, &o).unwrap();
        assert_eq!(tr.outcome, Outcome::TimedOut);
        for s in &tr.samples {
            for i in 0..3 {
                let expect = init.position[i] + init.velocity[i] * s.t;
                assert!((s.position[i] - expect).abs() <= 1e-12 * expect.abs().max(1e-3), "{s:?}");
            }
        }
    }

    #[test]
    fn pseudopotential_secular_frequency_in_ideal_quadrupole() {
        let drive = DriveParams::experiment();
        let e = ParticleSpecies::electron();
        // Choose r0 so that q = 0.15.
        let q = 0.15;
        let r0 = (2.0 * e.charge_to_mass() * drive.v0 / (q * drive.omega * drive.omega)).sqrt();
        let field = QuadrupoleField { center_height: 0.5, radius: r0 };
        let model = FieldModel::direct(&field);
        let omega = q * drive.omega / 8f64.sqrt();
        let periods = 12.0;
        let mut o = TrackOptions::new(periods * 2.0 * PI / omega);
        o.sample_interval = Some(drive.period() / 16.0);
        let init = ParticleState::new(Vec3::new(20e-6, 0.0, 0.5), Vec3::zeros());
        let tr = integrate_trajectory(&model, &drive, &e, &init, &far_domain(), None, &o).unwrap();
        // Time-domain zero crossings of x(t).
        let mut cross = Vec::new();
        for w in tr.samples.windows(2) {
            let (a, b) = (w[0].position[0], w[1].position[0]);
            if a.signum() != b.signum() {
                cross.push(w[0].t + a / (a - b) * (w[1].t - w[0].t));
            }
        }
        let period = 2.0 * (cross[cross.len() - 1] - cross[0]) / (cross.len() - 1) as f64;
        let measured = 2.0 * PI / period;
        assert!((measured / omega - 1.0).abs() < 0.01, "{measured} vs {omega}");
        // Micromotion: the Ω − ω sideband stands far above the spectral floor.
        let n = tr.samples.len();
        let power = |w: f64| {
            let (mut re, mut im) = (0.0, 0.0);
            for s in &tr.samples {
                re += s.position[0] * (w * s.t).cos();
                im += s.position[0] * (w * s.t).sin();
            }
            (re * re + im * im) / (n * n) as f64
        };
        let side = power(drive.omega - omega);
        let floor = power(0.5 * drive.omega);
        assert!(side > 100.0 * floor, "{side} {floor}");
    }

    #[test]
    fn static_field_conserves_energy() {
        let field = QuadrupoleField { center_height: 1e-3, radius: 1e-3 };
        let model = FieldModel::direct(&field);
        let drive = DriveParams { phase: 0.3, ..DriveParams::experiment() };
        let e = ParticleSpecies::electron();
        let mut o = TrackOptions::new(2e-7);
        o.frozen_drive = true;
        o.record_energy = true;
        o.sample_interval = Some(1e-9);
        let init = ParticleState::new(Vec3::new(30e-6, 0.0, 1.02e-3), Vec3::new(0.0, 7e5, 0.0));
        let tr = integrate_trajectory(&model, &drive, &e, &init, &far_domain(), None, &o).unwrap();
        assert!(tr.energy_drift.unwrap() < 1e-6, "{:?}", tr.energy_drift);
    }

    #[test]
    fn detector_crossing_and_domain_exit() {
        let field = NullField;
        let model = FieldModel::direct(&field);
        let drive = DriveParams::experiment();
        let e = ParticleSpecies::electron();
        let dom = Domain { x_half_width: 6e-3, z_max: 3e-3, y_min: 0.0, y_max: 0.02, substrate_end: 0.02 };
        let det = DetectorPlane::at(0.02);
        let o = TrackOptions::new(1e-6);
        let hit = ParticleState::new(Vec3::new(2e-3, 0.0, 1e-3), Vec3::new(0.0, 7e5, 0.0));
        let tr = integrate_trajectory(&model, &drive, &e, &hit, &dom, Some(&det), &o).unwrap();
        assert_eq!(tr.outcome, Outcome::GuidedRight);
        assert!((tr.exit.t - 0.02 / 7e5).abs() < 1e-15);
        let band = ParticleState::new(Vec3::new(-1e-3, 0.0, 1e-3), Vec3::new(0.0, 7e5, 0.0));
        assert_eq!(integrate_trajectory(&model, &drive, &e, &band, &dom, Some(&det), &o).unwrap().outcome, Outcome::LostDetected);
        let down = ParticleState::new(Vec3::new(2e-3, 0.0, 1e-3), Vec3::new(0.0, 7e5, -1e5));
        let tr = integrate_trajectory(&model, &drive, &e, &down, &dom, Some(&det), &o).unwrap();
        assert_eq!(tr.outcome, Outcome::LostInFlight);
        assert!(tr.exit.position[2].abs() < 1e-12);
        let outside = ParticleState::new(Vec3::new(0.0, 0.0, -1e-3), Vec3::zeros());
        assert!(integrate_trajectory(&model, &drive, &e, &outside, &dom, Some(&det), &o).is_err());
    }

    #[test]
    fn sunflower_rays_fill_the_disk() {
        let s = SourceSpec::standard([0.0, 0.0, 4e-4], 1.5, 7);
        let rays = s.rays(&ParticleSpecies::electron());
        assert_eq!(rays.len(), 100);
        let speed = speed_from_ev(1.5, ParticleSpecies::electron().mass);
        for r in &rays {
            let d = (r.position[0].powi(2) + (r.position[2] - 4e-4).powi(2)).sqrt();
            assert!(d <= 50e-6 + 1e-15);
            let v = r.velocity();
            assert!((v.norm() / speed - 1.0).abs() < 1e-12);
            assert!((v.y / v.norm()).acos() <= 7e-3 + 1e-12);
        }
        let right = rays.iter().filter(|r| r.position[0] > 0.0).count();
        assert!((45..=55).contains(&right));
        assert_eq!(s.rays(&ParticleSpecies::electron()), rays);
    }

    #[test]
    fn fwhm_of_triangle() {
        let p = [0.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0, 0.0];
        assert!((fwhm(&p, 1.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cache_matches_direct_field() {
        let field = QuadrupoleField { center_height: 5e-4, radius: 5e-4 };
        let dom = Domain { x_half_width: 1e-3, z_max: 1e-3, y_min: 0.0, y_max: 1e-3, substrate_end: 1e-3 };
        let cache = FieldCache::new(&field, &dom, 50e-6, true);
        // A quadratic potential has a linear gradient: trilinear is exact.
        for p in [Vec3::new(1.2e-4, 3.3e-4, 4.1e-4), Vec3::new(-2.7e-4, 1e-4, 6e-4)] {
            let d = field.unit_gradient(&p);
            let c = cache.unit_gradient(&p);
            assert!((d - c).norm() < 1e-9 * d.norm(), "{d} {c}");
        }
        assert!(cache.filled_blocks() >= 1);
    }
}
