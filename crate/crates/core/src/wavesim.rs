//! Split-step wave-packet propagation through an X-shaped splitter and the
//! resulting 2×2 port matrix.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::exec::{self, Workers};
use crate::pseudopot::ParticleSpecies;
use crate::qmodes::{self, LongitudinalPotential, ModeExpansion, ParitySelection, QmodesError, XGrid};
use crate::units::{ev_to_joule, speed_from_ev, HBAR};

#[derive(Debug, Error)]
pub enum WaveError {
    #[error("density reached the grid edge at y = {y:.6e} m (edge fraction {edge:.3e}); grid too small")]
    GridTooSmall { y: f64, edge: f64 },
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error("grid resolves the ground state with only {0:.1} points per width")]
    Underresolved(f64),
    #[error(transparent)]
    Modes(#[from] QmodesError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WavePacketState {
    pub grid: XGrid,
    pub psi: Vec<Complex64>,
    pub y: f64,
    pub t: f64,
}

impl WavePacketState {
    pub fn new(grid: XGrid, psi: Vec<Complex64>, y: f64) -> Result<Self, WaveError> {
        if psi.len() != grid.points {
            return Err(WaveError::BadInput(format!("{} amplitudes on a {}-point grid", psi.len(), grid.points)));
        }
        Ok(Self { grid, psi, y, t: 0.0 })
    }

    pub fn norm(&self) -> f64 {
        self.psi.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.grid.dx()
    }

    pub fn density(&self) -> Vec<f64> {
        self.psi.iter().map(|z| z.norm_sqr()).collect()
    }

    /// `⟨f|ψ⟩` for a real mode `f` sampled on the grid.
    pub fn project(&self, f: &[f64]) -> Complex64 {
        self.psi.iter().zip(f).map(|(p, q)| p * q).sum::<Complex64>() * self.grid.dx()
    }

    pub fn mean_x(&self) -> f64 {
        self.psi.iter().enumerate().map(|(j, z)| z.norm_sqr() * self.grid.x(j)).sum::<f64>() * self.grid.dx() / self.norm()
    }

    pub fn variance_x(&self) -> f64 {
        let m = self.mean_x();
        self.psi.iter().enumerate().map(|(j, z)| z.norm_sqr() * (self.grid.x(j) - m).powi(2)).sum::<f64>() * self.grid.dx()
            / self.norm()
    }

    /// Fraction of the norm within `fraction` of the box width from either edge.
    pub fn edge_density(&self, fraction: f64) -> f64 {
        let n = self.grid.points;
        let m = ((fraction * n as f64).ceil() as usize).max(1).min(n / 2);
        let edge: f64 = self.psi[..m].iter().chain(&self.psi[n - m..]).map(|z| z.norm_sqr()).sum::<f64>() * self.grid.dx();
        edge / self.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitStepOptions {
    pub steps: usize,
    /// Width of the monitored edge band as a fraction of the box.
    pub edge_fraction: f64,
    pub edge_tolerance: f64,
    /// Record the density every this many steps (0 disables).
    pub snapshot_stride: usize,
}

impl Default for SplitStepOptions {
    fn default() -> Self {
        Self { steps: 1 << 15, edge_fraction: 0.05, edge_tolerance: 1e-8, snapshot_stride: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub state: WavePacketState,
    pub max_step_norm_drift: f64,
    pub total_norm_drift: f64,
    pub max_edge_density: f64,
    pub snapshots: Vec<(f64, Vec<f64>)>,
}

struct Kinetic {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    phases: Vec<Complex64>,
}

impl Kinetic {
    fn new(grid: &XGrid, mass: f64, dt: f64) -> Self {
        let n = grid.points;
        let mut planner = FftPlanner::new();
        let dk = 2.0 * PI / grid.width();
        let phases = (0..n)
            .map(|j| {
                let m = if j < n / 2 { j as f64 } else { j as f64 - n as f64 };
                let k = m * dk;
                Complex64::from_polar(1.0 / n as f64, -HBAR * k * k * dt / (2.0 * mass))
            })
            .collect();
        Self { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n), phases }
    }

    fn apply(&self, psi: &mut [Complex64]) {
        self.forward.process(psi);
        for (p, f) in psi.iter_mut().zip(&self.phases) {
            *p *= f;
        }
        self.inverse.process(psi);
    }
}

fn potential_phase(v_ev: &[f64], dt: f64, fraction: f64) -> Vec<Complex64> {
    v_ev.iter().map(|&v| Complex64::from_polar(1.0, -ev_to_joule(v) * fraction * dt / HBAR)).collect()
}

/// Strang splitting from the state's `y` to `y_end`: half potential, full kinetic, half potential.
pub fn split_step_propagate<P: LongitudinalPotential + ?Sized>(
    state: WavePacketState,
    potential: &P,
    species: &ParticleSpecies,
    kinetic_ev: f64,
    y_end: f64,
    opts: &SplitStepOptions,
) -> Result<Propagation, WaveError> {
    if opts.steps == 0 || !(kinetic_ev > 0.0) || !(y_end > state.y) {
        return Err(WaveError::BadInput("need steps > 0, positive energy and y_end beyond the start".into()));
    }
    let v = speed_from_ev(kinetic_ev, species.mass);
    let dy = (y_end - state.y) / opts.steps as f64;
    let dt = dy / v;
    let xs = state.grid.xs();
    let kin = Kinetic::new(&state.grid, species.mass, dt);
    let y0 = state.y;
    let norm0 = state.norm();
    let mut st = state;
    let mut out = Propagation {
        state: st.clone(),
        max_step_norm_drift: 0.0,
        total_norm_drift: 0.0,
        max_edge_density: st.edge_density(opts.edge_fraction),
        snapshots: Vec::new(),
    };
    if opts.snapshot_stride > 0 {
        out.snapshots.push((st.y, st.density()));
    }
    let mut half = potential_phase(&potential.sample(y0, &xs), dt, 0.5);
    let mut prev_norm = norm0;
    for step in 0..opts.steps {
        let y_next = y0 + (step + 1) as f64 * dy;
        for (p, f) in st.psi.iter_mut().zip(&half) {
            *p *= f;
        }
        kin.apply(&mut st.psi);
        half = potential_phase(&potential.sample(y_next, &xs), dt, 0.5);
        for (p, f) in st.psi.iter_mut().zip(&half) {
            *p *= f;
        }
        st.y = y_next;
        st.t += dt;
        let check = step % 64 == 63 || step + 1 == opts.steps;
        if check {
            let n = st.norm();
            out.max_step_norm_drift = out.max_step_norm_drift.max((n - prev_norm).abs() / norm0 / 64.0);
            prev_norm = n;
            let edge = st.edge_density(opts.edge_fraction);
            out.max_edge_density = out.max_edge_density.max(edge);
            if edge > opts.edge_tolerance {
                return Err(WaveError::GridTooSmall { y: st.y, edge });
            }
        }
        if opts.snapshot_stride > 0 && (step + 1) % opts.snapshot_stride == 0 {
            out.snapshots.push((st.y, st.density()));
        }
    }
    out.total_norm_drift = (st.norm() - norm0).abs() / norm0;
    out.state = st;
    Ok(out)
}

/// Two copies of a Y-splitter joined at their single-well ends by a straight section:
/// the first copy merges the two input wells, the second splits them again.
pub struct XShaped<'a, P: ?Sized> {
    pub arm: &'a P,
    pub center: f64,
}

impl<P: LongitudinalPotential + ?Sized> LongitudinalPotential for XShaped<'_, P> {
    fn length(&self) -> f64 {
        2.0 * self.arm.length() + self.center
    }
    fn grid(&self) -> XGrid {
        self.arm.grid()
    }
    fn alpha(&self) -> f64 {
        self.arm.alpha()
    }
    fn sample(&self, y: f64, xs: &[f64]) -> Vec<f64> {
        let l = self.arm.length();
        let s = if y < l {
            l - y
        } else if y <= l + self.center {
            0.0
        } else {
            y - l - self.center
        };
        self.arm.sample(s.clamp(0.0, l), xs)
    }
}

/// Left/right port modes on the wave grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PortState {
    pub grid: XGrid,
    pub symmetric: Vec<f64>,
    pub antisymmetric: Vec<f64>,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    /// Full width at half maximum of `|L|²`, m.
    pub width: f64,
}

fn normalize(v: &mut [f64], dx: f64) {
    let n = (v.iter().map(|x| x * x).sum::<f64>() * dx).sqrt();
    for x in v {
        *x /= n;
    }
}

fn fwhm(xs: &[f64], f: &[f64]) -> f64 {
    let d: Vec<f64> = f.iter().map(|v| v * v).collect();
    let (imax, &m) = d.iter().enumerate().fold((0, &0.0), |b, (i, v)| if v > b.1 { (i, v) } else { b });
    let half = 0.5 * m;
    let mut lo = imax;
    while lo > 0 && d[lo] > half {
        lo -= 1;
    }
    let mut hi = imax;
    while hi + 1 < d.len() && d[hi] > half {
        hi += 1;
    }
    let cross = |a: usize, b: usize| xs[a] + (half - d[a]) / (d[b] - d[a]) * (xs[b] - xs[a]);
    cross(hi - 1, hi) - cross(lo, lo + 1)
}

impl PortState {
    pub fn from_modes(grid: XGrid, even: &ModeExpansion, odd: &ModeExpansion) -> Self {
        let xs = grid.xs();
        let dx = grid.dx();
        let mut s: Vec<f64> = xs.iter().map(|&x| even.eval(x)).collect();
        let mut a: Vec<f64> = xs.iter().map(|&x| odd.eval(x)).collect();
        normalize(&mut s, dx);
        normalize(&mut a, dx);
        if s.iter().sum::<f64>() < 0.0 {
            s.iter_mut().for_each(|v| *v = -*v);
        }
        // `(|1⟩ + |2⟩)/√2` should sit in the x < 0 well.
        let left_weight: f64 = xs.iter().zip(s.iter().zip(&a)).filter(|(x, _)| **x < 0.0).map(|(_, (p, q))| p * q).sum();
        if left_weight < 0.0 {
            a.iter_mut().for_each(|v| *v = -*v);
        }
        let r2 = std::f64::consts::FRAC_1_SQRT_2;
        let left: Vec<f64> = s.iter().zip(&a).map(|(p, q)| r2 * (p + q)).collect();
        let right: Vec<f64> = s.iter().zip(&a).map(|(p, q)| r2 * (p - q)).collect();
        let width = fwhm(&xs, &left);
        Self { grid, symmetric: s, antisymmetric: a, left, right, width }
    }

    pub fn state(&self, l: Complex64, r: Complex64, y: f64) -> WavePacketState {
        let psi = self.left.iter().zip(&self.right).map(|(a, b)| l * a + r * b).collect();
        WavePacketState { grid: self.grid, psi, y, t: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveOptions {
    /// Box width in units of the output well separation.
    pub box_factor: f64,
    pub min_points: usize,
    pub points_per_width: f64,
    pub basis: usize,
    pub split_step: SplitStepOptions,
}

impl Default for WaveOptions {
    fn default() -> Self {
        Self {
            box_factor: 24.0,
            min_points: 4096,
            points_per_width: 16.0,
            basis: qmodes::DEFAULT_BASIS,
            split_step: SplitStepOptions::default(),
        }
    }
}

/// Port modes of the potential's end station on a wave grid sized from the output separation.
pub fn ports<P: LongitudinalPotential + ?Sized>(
    potential: &P,
    species: &ParticleSpecies,
    at_y: f64,
    opts: &WaveOptions,
) -> Result<PortState, WaveError> {
    let qgrid = potential.grid();
    let v = potential.sample(at_y, &qgrid.xs());
    let evens = qmodes::solve_expansions(&v, &qgrid, species, opts.basis, 1, ParitySelection::Even)?;
    let odds = qmodes::solve_expansions(&v, &qgrid, species, opts.basis, 1, ParitySelection::Odd)?;
    let separation = 2.0 * qmodes::half_separation(&qgrid, &v);
    if !(separation > 0.0) {
        return Err(WaveError::BadInput("port station is not a double well".into()));
    }
    let half_extent = 0.5 * opts.box_factor * separation;
    // Width measured on a fine local grid first, then the wave grid is sized to resolve it.
    let probe = PortState::from_modes(qgrid, &evens[0], &odds[0]);
    let need = (opts.points_per_width * 2.0 * half_extent / probe.width).ceil() as usize;
    let points = need.max(opts.min_points).next_power_of_two();
    let grid = XGrid::new(half_extent, points)?;
    let p = PortState::from_modes(grid, &evens[0], &odds[0]);
    let per_width = p.width / grid.dx();
    if per_width < opts.points_per_width {
        return Err(WaveError::Underresolved(per_width));
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitterRun {
    pub input: [Complex64; 2],
    pub output: [Complex64; 2],
    pub leakage: f64,
    pub non_adiabatic_failure: bool,
    pub propagation: Propagation,
}

/// Sends `l|L⟩ + r|R⟩` through the full length of `potential` and projects onto the output ports.
pub fn run_splitter<P: LongitudinalPotential + ?Sized>(
    potential: &P,
    input: [Complex64; 2],
    species: &ParticleSpecies,
    kinetic_ev: f64,
    opts: &WaveOptions,
) -> Result<SplitterRun, WaveError> {
    let p = ports(potential, species, 0.0, opts)?;
    run_with_ports(potential, &p, &p, input, species, kinetic_ev, opts)
}

fn run_with_ports<P: LongitudinalPotential + ?Sized>(
    potential: &P,
    inp: &PortState,
    outp: &PortState,
    input: [Complex64; 2],
    species: &ParticleSpecies,
    kinetic_ev: f64,
    opts: &WaveOptions,
) -> Result<SplitterRun, WaveError> {
    let n = input[0].norm_sqr() + input[1].norm_sqr();
    if (n - 1.0).abs() > 1e-9 {
        return Err(WaveError::BadInput(format!("input amplitudes have norm {n}")));
    }
    let st = inp.state(input[0], input[1], 0.0);
    let prop = split_step_propagate(st, potential, species, kinetic_ev, potential.length(), &opts.split_step)?;
    let output = [prop.state.project(&outp.left), prop.state.project(&outp.right)];
    let leakage = 1.0 - output[0].norm_sqr() - output[1].norm_sqr();
    let non_adiabatic_failure = leakage > 0.5;
    if non_adiabatic_failure {
        log::warn!("splitter leaked {leakage:.3} of the norm out of the port modes");
    }
    Ok(SplitterRun { input, output, leakage, non_adiabatic_failure, propagation: prop })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitterMatrix {
    /// `b[(out, in)]` with index 0 = L, 1 = R, after removing the global phase.
    pub b: Matrix2<Complex64>,
    pub residual: f64,
    pub theta: f64,
    pub leakage: f64,
    pub det_abs: f64,
    pub non_unitary_regime: bool,
}

/// Global phase: ⟨L|out⟩ real-positive for an |L⟩ input, using the diagonal
/// sum so that the convention survives a vanishing B_LL.
fn global_phase(col_l: [Complex64; 2], col_r: [Complex64; 2]) -> Complex64 {
    let anchor = col_l[0] + col_r[1];
    let anchor = if anchor.norm() > 1e-12 { anchor } else { col_l[1] + col_r[0] };
    if anchor.norm() > 0.0 {
        anchor.conj() / anchor.norm()
    } else {
        Complex64::new(1.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixJson {
    pub re: [[f64; 2]; 2],
    pub im: [[f64; 2]; 2],
    pub residual: f64,
    pub theta: f64,
    pub leakage: f64,
}

impl SplitterMatrix {
    pub fn from_columns(col_l: [Complex64; 2], col_r: [Complex64; 2], leakage: f64) -> Self {
        let raw = Matrix2::new(col_l[0], col_r[0], col_l[1], col_r[1]);
        let b = raw * global_phase(col_l, col_r);
        let gram = b.adjoint() * b - Matrix2::identity();
        let residual = gram.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let diag = 0.5 * (b[(0, 0)].norm() + b[(1, 1)].norm());
        let off = 0.5 * (b[(0, 1)].norm() + b[(1, 0)].norm());
        let theta = off.atan2(diag);
        Self { b, residual, theta, leakage, det_abs: b.determinant().norm(), non_unitary_regime: leakage > 0.3 }
    }

    pub fn apply(&self, input: [Complex64; 2]) -> [Complex64; 2] {
        let v = self.b * nalgebra::Vector2::new(input[0], input[1]);
        [v[0], v[1]]
    }

    /// Closest unitary matrix (polar factor), the ideal rotation up to port phases.
    pub fn nearest_unitary(&self) -> Matrix2<Complex64> {
        let svd = self.b.svd(true, true);
        svd.u.unwrap() * svd.v_t.unwrap()
    }

    pub fn to_json(&self) -> MatrixJson {
        let g = |f: fn(&Complex64) -> f64| [[f(&self.b[(0, 0)]), f(&self.b[(0, 1)])], [f(&self.b[(1, 0)]), f(&self.b[(1, 1)])]];
        MatrixJson { re: g(|z| z.re), im: g(|z| z.im), residual: self.residual, theta: self.theta, leakage: self.leakage }
    }
}

/// Columns of `B` from the two basis inputs.
pub fn extract_matrix<P: LongitudinalPotential + ?Sized>(
    potential: &P,
    species: &ParticleSpecies,
    kinetic_ev: f64,
    opts: &WaveOptions,
    workers: Workers,
) -> Result<SplitterMatrix, WaveError> {
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    let p = ports(potential, species, 0.0, opts)?;
    let inputs = [[one, zero], [zero, one]];
    let runs = exec::map(workers, &inputs, |inp| run_with_ports(potential, &p, &p, *inp, species, kinetic_ev, opts));
    let mut cols = Vec::new();
    let mut leak: f64 = 0.0;
    for r in runs {
        let r = r?;
        leak = leak.max(r.leakage);
        cols.push(r.output);
    }
    let m = SplitterMatrix::from_columns(cols[0], cols[1], leak);
    if m.non_unitary_regime {
        log::warn!("splitter matrix extracted in a non-unitary regime (leakage {leak:.3})");
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocusPoint {
    pub angle: f64,
    pub intensity_l: f64,
    pub intensity_r: f64,
    /// From the extracted matrix.
    pub matrix_l: f64,
    pub matrix_r: f64,
    /// From the nearest unitary rotation.
    pub rotation_l: f64,
    pub rotation_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Locus {
    pub points: Vec<LocusPoint>,
    pub matrix: SplitterMatrix,
    /// `√(1 − (σ₂/σ₁)²)` of the `(cos²χ, I_L)` locus, 0 for a circle.
    pub eccentricity: f64,
    pub max_rotation_deviation: f64,
    pub max_matrix_deviation: f64,
}

/// Output intensities for inputs `cos χ |L⟩ + e^{iφ} sin χ |R⟩`.
pub fn intensity_locus<P: LongitudinalPotential + ?Sized>(
    potential: &P,
    species: &ParticleSpecies,
    kinetic_ev: f64,
    angles: &[f64],
    phase: f64,
    opts: &WaveOptions,
    workers: Workers,
) -> Result<Locus, WaveError> {
    if angles.len() < 2 {
        return Err(WaveError::BadInput("need at least two mixing angles".into()));
    }
    let p = ports(potential, species, 0.0, opts)?;
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    let mut inputs: Vec<[Complex64; 2]> = vec![[one, zero], [zero, one]];
    inputs.extend(angles.iter().map(|&a| [Complex64::new(a.cos(), 0.0), Complex64::from_polar(a.sin(), phase)]));
    let runs: Vec<SplitterRun> = exec::map(workers, &inputs, |inp| run_with_ports(potential, &p, &p, *inp, species, kinetic_ev, opts))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let matrix = SplitterMatrix::from_columns(runs[0].output, runs[1].output, runs[0].leakage.max(runs[1].leakage));
    let u = matrix.nearest_unitary();
    let mut points = Vec::new();
    for (run, &chi) in runs[2..].iter().zip(angles) {
        let inp = nalgebra::Vector2::new(run.input[0], run.input[1]);
        let m = matrix.b * inp;
        let r = u * inp;
        points.push(LocusPoint {
            angle: chi,
            intensity_l: run.output[0].norm_sqr(),
            intensity_r: run.output[1].norm_sqr(),
            matrix_l: m[0].norm_sqr(),
            matrix_r: m[1].norm_sqr(),
            rotation_l: r[0].norm_sqr(),
            rotation_r: r[1].norm_sqr(),
        });
    }
    let eccentricity = locus_eccentricity(&points.iter().map(|p| (p.angle, p.intensity_l)).collect::<Vec<_>>());
    let dev = |f: &dyn Fn(&LocusPoint) -> f64| points.iter().map(f).fold(0.0, f64::max);
    let max_rotation_deviation =
        dev(&|p| (p.intensity_l - p.rotation_l).abs().max((p.intensity_r - p.rotation_r).abs()));
    let max_matrix_deviation = dev(&|p| (p.intensity_l - p.matrix_l).abs().max((p.intensity_r - p.matrix_r).abs()));
    Ok(Locus { points, matrix, eccentricity, max_rotation_deviation, max_matrix_deviation })
}

/// Eccentricity of the curve `(cos²χ, I_L(χ))`.
///
/// Both coordinates are affine in `(cos 2χ, sin 2χ)`, so the curve is an
/// ellipse; `I_L = c + a cos 2χ + b sin 2χ` is fitted by least squares and the
/// semi-axes are the singular values of `[[½, 0], [a, b]]`. A balanced unitary
/// splitter traces a circle; lost contrast flattens it.
pub fn locus_eccentricity(rows: &[(f64, f64)]) -> f64 {
    let a = DMatrix::from_fn(rows.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => (2.0 * rows[i].0).cos(),
        _ => (2.0 * rows[i].0).sin(),
    });
    let y = nalgebra::DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let Some(inv) = (a.transpose() * &a).try_inverse() else {
        return f64::NAN;
    };
    let c = inv * a.transpose() * y;
    let m = Matrix2::new(0.5, 0.0, c[1], c[2]);
    let s = m.svd(false, false).singular_values;
    let (hi, lo) = (s[0].max(s[1]), s[0].min(s[1]));
    (1.0 - (lo / hi).powi(2)).max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CenterCalibration {
    /// `(center length, left share)` for every evaluated length, where the
    /// share is `|B_LL|² / (|B_LL|² + |B_RL|²)` and stays meaningful under leakage.
    pub scan: Vec<(f64, f64)>,
    pub center: f64,
    pub balance: f64,
    /// Length over which the centre phase advances by 2π.
    pub period: f64,
}

/// Finds a centre length giving a balanced output for a single-port input.
pub fn calibrate_center<P: LongitudinalPotential + ?Sized>(
    arm: &P,
    species: &ParticleSpecies,
    kinetic_ev: f64,
    scan_points: usize,
    opts: &WaveOptions,
    workers: Workers,
) -> Result<CenterCalibration, WaveError> {
    let qgrid = arm.grid();
    let v = arm.sample(0.0, &qgrid.xs());
    let modes = qmodes::solve_expansions(&v, &qgrid, species, opts.basis, 2, ParitySelection::Both)?;
    let gap = ev_to_joule(modes[1].energy_ev - modes[0].energy_ev);
    let period = 2.0 * PI * HBAR * speed_from_ev(kinetic_ev, species.mass) / gap;
    let p = ports(&XShaped { arm, center: 0.0 }, species, 0.0, opts)?;
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    let eval = |c: f64| -> Result<f64, WaveError> {
        let x = XShaped { arm, center: c };
        let out = run_with_ports(&x, &p, &p, [one, zero], species, kinetic_ev, opts)?.output;
        let (l, r) = (out[0].norm_sqr(), out[1].norm_sqr());
        Ok(if l + r > 0.0 { l / (l + r) } else { 0.5 })
    };
    let n = scan_points.max(4);
    let cs: Vec<f64> = (0..n).map(|i| period * i as f64 / n as f64).collect();
    let mut scan: Vec<(f64, f64)> = exec::map(workers, &cs, |&c| eval(c).map(|v| (c, v))).into_iter().collect::<Result<_, _>>()?;
    // Bisect the first bracket of the balance point.
    let bracket = scan.windows(2).find(|w| (w[0].1 - 0.5) * (w[1].1 - 0.5) <= 0.0).map(|w| (w[0], w[1]));
    let (mut best_c, mut best_v) = scan.iter().cloned().min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs())).unwrap();
    if let Some((mut lo, mut hi)) = bracket {
        for _ in 0..8 {
            if (best_v - 0.5).abs() < 2e-3 {
                break;
            }
            let c = 0.5 * (lo.0 + hi.0);
            let v = eval(c)?;
            scan.push((c, v));
            if (v - 0.5).abs() < (best_v - 0.5).abs() {
                best_c = c;
                best_v = v;
            }
            if (lo.1 - 0.5) * (v - 0.5) <= 0.0 {
                hi = (c, v);
            } else {
                lo = (c, v);
            }
        }
    }
    scan.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(CenterCalibration { scan, center: best_c, balance: best_v, period })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flat {
        grid: XGrid,
    }

    impl LongitudinalPotential for Flat {
        fn length(&self) -> f64 {
            1.0
        }
        fn grid(&self) -> XGrid {
            self.grid
        }
        fn alpha(&self) -> f64 {
            0.0
        }
        fn sample(&self, _y: f64, xs: &[f64]) -> Vec<f64> {
            vec![0.0; xs.len()]
        }
    }

    #[test]
    fn free_packet_spreads_like_a_gaussian() {
        let grid = XGrid::new(40e-6, 4096).unwrap();
        let s0 = 1e-6;
        let psi: Vec<Complex64> = grid
            .xs()
            .iter()
            .map(|&x| Complex64::new((-x * x / (4.0 * s0 * s0)).exp() / (2.0 * PI * s0 * s0).powf(0.25), 0.0))
            .collect();
        let st = WavePacketState::new(grid, psi, 0.0).unwrap();
        let e = ParticleSpecies::electron();
        let pot = Flat { grid };
        let y_end = 0.05;
        let opts = SplitStepOptions { steps: 256, ..Default::default() };
        let out = split_step_propagate(st, &pot, &e, 1.0, y_end, &opts).unwrap();
        let t = y_end / speed_from_ev(1.0, e.mass);
        let want = s0 * s0 * (1.0 + (HBAR * t / (2.0 * e.mass * s0 * s0)).powi(2));
        let got = out.state.variance_x();
        assert!((got - want).abs() < 1e-3 * want, "{got:e} vs {want:e}");
        assert!(out.total_norm_drift < 1e-10);
    }

    #[test]
    fn edge_monitor_trips() {
        let grid = XGrid::new(5e-6, 512).unwrap();
        let psi: Vec<Complex64> = grid.xs().iter().map(|&x| Complex64::new((-x * x / 1e-12).exp(), 0.0)).collect();
        let st = WavePacketState::new(grid, psi, 0.0).unwrap();
        let e = ParticleSpecies::electron();
        let err = split_step_propagate(st, &Flat { grid }, &e, 1.0, 0.2, &SplitStepOptions { steps: 512, ..Default::default() });
        assert!(matches!(err, Err(WaveError::GridTooSmall { .. })));
    }

    #[test]
    fn locus_shape() {
        let chis: Vec<f64> = (0..9).map(|i| PI * i as f64 / 8.0).collect();
        let circle: Vec<(f64, f64)> = chis.iter().map(|&c| (c, (c - PI / 4.0).cos().powi(2))).collect();
        assert!(locus_eccentricity(&circle) < 1e-6);
        // Contrast 0.6: semi-axes 0.5 and 0.3.
        let flat: Vec<(f64, f64)> = chis.iter().map(|&c| (c, 0.4 + 0.3 * (2.0 * c).sin())).collect();
        assert!((locus_eccentricity(&flat) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn matrix_conventions() {
        let c = |re: f64, im: f64| Complex64::new(re, im);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let ph = Complex64::from_polar(1.0, 0.7);
        let m = SplitterMatrix::from_columns([c(r, 0.0) * ph, c(0.0, -r) * ph], [c(0.0, -r) * ph, c(r, 0.0) * ph], 0.0);
        assert!(m.residual < 1e-12);
        assert!((m.theta - PI / 4.0).abs() < 1e-12);
        assert!(m.b[(0, 0)].im.abs() < 1e-12 && m.b[(0, 0)].re > 0.0);
        let u = m.nearest_unitary();
        assert!((u - m.b).iter().all(|z| z.norm() < 1e-12));
    }
}
