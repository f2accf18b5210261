//! Transverse quantum modes of the guide and their evolution through the splitter.
//!
//! A cross-section is solved in a standing-wave basis on a box of width `X`.
//! Along the guide the state is expanded in the instantaneous eigenbasis and
//! propagated with the exact exponential of the piecewise-constant effective
//! Hamiltonian `diag(E) - iħ⟨i|∂t j⟩`, so every elementary step is unitary.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Workers};
use crate::interp::Pchip;
use crate::pseudopot::ParticleSpecies;
use crate::simplex::{self, HistoryEntry, SimplexOptions};
use crate::units::{ev_to_joule, joule_to_ev, speed_from_ev, HBAR};

pub const DEFAULT_BASIS: usize = 500;
pub const DEFAULT_TRACKED: usize = 10;

#[derive(Debug, Error)]
pub enum QmodesError {
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("invalid potential: {0}")]
    BadPotential(String),
    #[error("initial amplitudes must have {expected} entries and unit norm")]
    BadInitial { expected: usize },
    #[error("invalid options: {0}")]
    BadOptions(String),
    #[error("deformation needs 0 or at least 2 knots, got {0}")]
    BadKnots(usize),
    #[error("potential file: {0}")]
    Format(String),
}

/// Uniform cell-centred grid on `[-X/2, X/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XGrid {
    /// `X/2`, meters.
    pub half_extent: f64,
    pub points: usize,
}

impl XGrid {
    pub fn new(half_extent: f64, points: usize) -> Result<Self, QmodesError> {
        if !(half_extent > 0.0 && half_extent.is_finite()) || points < 8 {
            return Err(QmodesError::BadGrid(format!("half extent {half_extent} m with {points} points")));
        }
        Ok(Self { half_extent, points })
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_extent
    }

    pub fn dx(&self) -> f64 {
        self.width() / self.points as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        -self.half_extent + (j as f64 + 0.5) * self.dx()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.points).map(|j| self.x(j)).collect()
    }
}

/// A transverse potential that varies along the guide.
pub trait LongitudinalPotential: Sync {
    fn length(&self) -> f64;
    /// Box and sampling used for the eigensolver.
    fn grid(&self) -> XGrid;
    /// Splitting half-angle `T/L`.
    fn alpha(&self) -> f64;
    /// Potential energy in eV at position `y` along the guide, sampled at `xs`.
    fn sample(&self, y: f64, xs: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub y: f64,
    /// eV on the potential's grid.
    pub v: Vec<f64>,
}

/// Potential sampled at discrete stations; linear in `y` between them.
#[derive(Debug, Clone, PartialEq)]
pub struct TransversePotential1D {
    grid: XGrid,
    length: f64,
    alpha: f64,
    stations: Vec<Station>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PotentialHeader {
    grid: XGrid,
    alpha: f64,
    length: f64,
}

impl TransversePotential1D {
    pub fn new(grid: XGrid, length: f64, alpha: f64, stations: Vec<Station>) -> Result<Self, QmodesError> {
        if stations.is_empty() {
            return Err(QmodesError::BadPotential("no stations".into()));
        }
        if !(length > 0.0) {
            return Err(QmodesError::BadPotential(format!("length {length}")));
        }
        if stations.windows(2).any(|w| w[1].y <= w[0].y) {
            return Err(QmodesError::BadPotential("stations must be strictly ordered in y".into()));
        }
        for s in &stations {
            if s.v.len() != grid.points {
                return Err(QmodesError::BadPotential(format!("station at y = {} has {} samples", s.y, s.v.len())));
            }
            if s.v.iter().any(|v| !v.is_finite()) {
                return Err(QmodesError::BadPotential(format!("station at y = {} is not finite", s.y)));
            }
            if !is_even(&s.v) {
                return Err(QmodesError::BadPotential(format!("station at y = {} is not even in x", s.y)));
            }
        }
        let last = stations.last().unwrap();
        let half = half_separation(&grid, &last.v);
        if (half / length - alpha).abs() > 1e-6 {
            return Err(QmodesError::BadPotential(format!(
                "alpha {alpha} does not match the last station's half separation {half} m over {length} m"
            )));
        }
        Ok(Self { grid, length, alpha, stations })
    }

    /// Samples any longitudinal potential at `count` uniformly spaced stations.
    pub fn from_profile<P: LongitudinalPotential + ?Sized>(p: &P, count: usize) -> Result<Self, QmodesError> {
        let grid = p.grid();
        let xs = grid.xs();
        let n = count.max(2);
        let stations = (0..n)
            .map(|i| {
                let y = p.length() * i as f64 / (n - 1) as f64;
                Station { y, v: p.sample(y, &xs) }
            })
            .collect();
        Self::new(grid, p.length(), p.alpha(), stations)
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    fn station_at(&self, y: f64) -> Vec<f64> {
        let s = &self.stations;
        if y <= s[0].y {
            return s[0].v.clone();
        }
        if y >= s[s.len() - 1].y {
            return s[s.len() - 1].v.clone();
        }
        let i = s.partition_point(|st| st.y <= y) - 1;
        let t = (y - s[i].y) / (s[i + 1].y - s[i].y);
        s[i].v.iter().zip(&s[i + 1].v).map(|(a, b)| a + t * (b - a)).collect()
    }

    /// CSV with a `#`-prefixed JSON header line, then one `y,v_0,...` row per station.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = PotentialHeader { grid: self.grid, alpha: self.alpha, length: self.length };
        writeln!(w, "# {}", serde_json::to_string(&header).map_err(std::io::Error::other)?)?;
        for s in &self.stations {
            let mut line = format!("{:e}", s.y);
            for v in &s.v {
                line.push_str(&format!(",{v:e}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, QmodesError> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| QmodesError::Format("empty file".into()))?
            .map_err(|e| QmodesError::Format(e.to_string()))?;
        let json = first.strip_prefix('#').ok_or_else(|| QmodesError::Format("missing JSON header line".into()))?;
        let h: PotentialHeader =
            serde_json::from_str(json.trim()).map_err(|e| QmodesError::Format(format!("header: {e}")))?;
        let mut stations = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| QmodesError::Format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| QmodesError::Format(format!("line {}: {e}", i + 2)))?;
            stations.push(Station { y: vals[0], v: vals[1..].to_vec() });
        }
        Self::new(h.grid, h.length, h.alpha, stations)
    }
}

impl LongitudinalPotential for TransversePotential1D {
    fn length(&self) -> f64 {
        self.length
    }
    fn grid(&self) -> XGrid {
        self.grid
    }
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn sample(&self, y: f64, xs: &[f64]) -> Vec<f64> {
        let v = self.station_at(y);
        if xs.len() == self.grid.points && xs.iter().enumerate().all(|(j, x)| (x - self.grid.x(j)).abs() < 1e-15) {
            return v;
        }
        let (dx, n) = (self.grid.dx(), self.grid.points);
        xs.iter()
            .map(|&x| {
                let f = ((x - self.grid.x(0)) / dx).clamp(0.0, (n - 1) as f64);
                let i = (f.floor() as usize).min(n - 2);
                let t = f - i as f64;
                v[i] + t * (v[i + 1] - v[i])
            })
            .collect()
    }
}

fn is_even(v: &[f64]) -> bool {
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let n = v.len();
    (0..n / 2).all(|j| (v[j] - v[n - 1 - j]).abs() <= 1e-9 * scale)
}

/// Position of the right-hand minimum (0 for a single well), refined by a parabola.
pub fn half_separation(grid: &XGrid, v: &[f64]) -> f64 {
    let n = v.len();
    let (j, _) = v.iter().enumerate().skip(n / 2).fold((n / 2, f64::INFINITY), |b, (j, &x)| if x < b.1 { (j, x) } else { b });
    if j + 1 >= n {
        return grid.x(j);
    }
    let (a, b, c) = (v[j - 1], v[j], v[j + 1]);
    let den = a - 2.0 * b + c;
    let shift = if den > 0.0 { 0.5 * (a - c) / den } else { 0.0 };
    (grid.x(j) + shift * grid.dx()).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

/// Which parity blocks are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParitySelection {
    #[default]
    Even,
    Odd,
    Both,
}

impl ParitySelection {
    fn includes(&self, p: Parity) -> bool {
        matches!((self, p), (Self::Both, _) | (Self::Even, Parity::Even) | (Self::Odd, Parity::Odd))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenSpectrum {
    /// eV, ascending.
    pub energies: Vec<f64>,
    pub parity: Vec<Parity>,
    pub grid: XGrid,
    /// Unit-normalized on the grid.
    pub functions: Vec<Vec<f64>>,
    pub rms_widths: Vec<f64>,
    pub box_too_small: bool,
}

/// Lowest modes in the standing-wave basis: energies in J and basis coefficients.
#[derive(Debug, Clone)]
struct ModeSet {
    energies: Vec<f64>,
    parity: Vec<Parity>,
    ks: Vec<usize>,
    /// Column `i` holds mode `i`.
    coeffs: DMatrix<f64>,
}

/// `c[m] = (1/N) Σ_j V_j cos(π m (j+½)/N)`, for `m < N`, via one complex FFT of length `2N`.
fn cosine_coefficients(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut buf: Vec<Complex64> = v.iter().chain(v.iter().rev()).map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(2 * n).process(&mut buf);
    (0..n)
        .map(|m| {
            let ph = Complex64::from_polar(1.0, -std::f64::consts::PI * m as f64 / (2 * n) as f64);
            0.5 * (ph * buf[m]).re / n as f64
        })
        .collect()
}

fn solve_block(ks: &[usize], c: &[f64], width: f64, mass: f64, keep: usize) -> (Vec<f64>, DMatrix<f64>) {
    let m = ks.len();
    let kin = HBAR * HBAR * std::f64::consts::PI.powi(2) / (2.0 * mass * width * width);
    let h = DMatrix::from_fn(m, m, |a, b| {
        let (k, l) = (ks[a], ks[b]);
        let v = c[k.abs_diff(l)] - c[k + l];
        if a == b {
            v + kin * (k * k) as f64
        } else {
            v
        }
    });
    let eig = nalgebra::SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    order.truncate(keep.min(m));
    let energies = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(m, order.len());
    for (col, &i) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        // Deterministic sign: the largest coefficient is positive.
        let big = v.iter().fold(0.0_f64, |b, x| if x.abs() > b.abs() { *x } else { b });
        let s = if big < 0.0 { -1.0 } else { 1.0 };
        vecs.set_column(col, &(v * s));
    }
    (energies, vecs)
}

fn solve_modes(
    v_ev: &[f64],
    grid: &XGrid,
    mass: f64,
    basis: usize,
    keep: usize,
    parity: ParitySelection,
    by_energy: bool,
) -> Result<ModeSet, QmodesError> {
    if v_ev.len() != grid.points {
        return Err(QmodesError::BadPotential(format!("{} samples on a {}-point grid", v_ev.len(), grid.points)));
    }
    if grid.points <= 2 * basis {
        return Err(QmodesError::BadOptions(format!(
            "grid needs more than {} points for a basis of order {basis}",
            2 * basis
        )));
    }
    if v_ev.iter().any(|v| !v.is_finite()) {
        return Err(QmodesError::BadPotential("potential is not finite".into()));
    }
    if !is_even(v_ev) {
        return Err(QmodesError::BadPotential("potential is not even in x".into()));
    }
    let v: Vec<f64> = v_ev.iter().map(|&e| ev_to_joule(e)).collect();
    let c = cosine_coefficients(&v);
    let width = grid.width();
    let mut modes: Vec<(f64, Parity, usize, DVector<f64>)> = Vec::new();
    let mut blocks = Vec::new();
    if parity.includes(Parity::Even) {
        blocks.push((Parity::Even, (1..=basis).step_by(2).collect::<Vec<_>>()));
    }
    if parity.includes(Parity::Odd) {
        blocks.push((Parity::Odd, (2..=basis).step_by(2).collect::<Vec<_>>()));
    }
    let offset = |p: Parity| if p == Parity::Even { 0 } else { 1 };
    // Tracking both parities keeps the blocks apart (even first) so that a
    // column never changes parity along the guide; even then takes the extra slot.
    let grouped = parity == ParitySelection::Both && !by_energy;
    for (p, ks) in &blocks {
        let n = match (grouped, p) {
            (true, Parity::Even) => keep.div_ceil(2),
            (true, Parity::Odd) => keep / 2,
            _ => keep,
        };
        let (e, vecs) = solve_block(ks, &c, width, mass, n);
        for (i, en) in e.into_iter().enumerate() {
            modes.push((en, *p, offset(*p), vecs.column(i).into_owned()));
        }
    }
    if !grouped {
        modes.sort_by(|a, b| a.0.total_cmp(&b.0));
        modes.truncate(keep);
    }
    // Coefficients stored on the full index set k = 1..=basis.
    let mut coeffs = DMatrix::zeros(basis, modes.len());
    for (col, (_, _, off, vec)) in modes.iter().enumerate() {
        for (r, val) in vec.iter().enumerate() {
            coeffs[(off + 2 * r, col)] = *val;
        }
    }
    Ok(ModeSet {
        energies: modes.iter().map(|m| m.0).collect(),
        parity: modes.iter().map(|m| m.1).collect(),
        ks: (1..=basis).collect(),
        coeffs,
    })
}

impl ModeSet {
    fn function(&self, col: usize, grid: &XGrid) -> Vec<f64> {
        let width = grid.width();
        let norm = (2.0 / width).sqrt();
        (0..grid.points)
            .map(|j| {
                let u = (j as f64 + 0.5) / grid.points as f64;
                self.ks
                    .iter()
                    .enumerate()
                    .filter(|(r, _)| self.coeffs[(*r, col)] != 0.0)
                    .map(|(r, &k)| self.coeffs[(r, col)] * norm * (std::f64::consts::PI * k as f64 * u).sin())
                    .sum()
            })
            .collect()
    }
}

/// One eigenmode as a standing-wave series, evaluable at any `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeExpansion {
    pub energy_ev: f64,
    pub parity: Parity,
    width: f64,
    /// `(k, coefficient)` pairs.
    terms: Vec<(usize, f64)>,
}

impl ModeExpansion {
    /// Zero outside the box.
    pub fn eval(&self, x: f64) -> f64 {
        let u = x / self.width + 0.5;
        if !(0.0..=1.0).contains(&u) {
            return 0.0;
        }
        let norm = (2.0 / self.width).sqrt();
        self.terms.iter().map(|&(k, c)| c * norm * (std::f64::consts::PI * k as f64 * u).sin()).sum()
    }
}

/// Lowest `count` modes of the requested parities, ordered by energy.
pub fn solve_expansions(
    v_ev: &[f64],
    grid: &XGrid,
    species: &ParticleSpecies,
    basis: usize,
    count: usize,
    parity: ParitySelection,
) -> Result<Vec<ModeExpansion>, QmodesError> {
    let set = solve_modes(v_ev, grid, species.mass, basis, count, parity, true)?;
    Ok((0..set.energies.len())
        .map(|col| ModeExpansion {
            energy_ev: joule_to_ev(set.energies[col]),
            parity: set.parity[col],
            width: grid.width(),
            terms: set
                .ks
                .iter()
                .enumerate()
                .filter(|(r, _)| set.coeffs[(*r, col)] != 0.0)
                .map(|(r, &k)| (k, set.coeffs[(r, col)]))
                .collect(),
        })
        .collect())
}

/// Solves one cross-section and returns its lowest `modes` states of both parities.
pub fn solve_station(
    v_ev: &[f64],
    grid: &XGrid,
    species: &ParticleSpecies,
    basis: usize,
    modes: usize,
) -> Result<EigenSpectrum, QmodesError> {
    let set = solve_modes(v_ev, grid, species.mass, basis, modes, ParitySelection::Both, true)?;
    Ok(spectrum(&set, grid))
}

fn spectrum(set: &ModeSet, grid: &XGrid) -> EigenSpectrum {
    let dx = grid.dx();
    let mut functions = Vec::new();
    let mut rms = Vec::new();
    for col in 0..set.energies.len() {
        let f = set.function(col, grid);
        let w: f64 = f.iter().enumerate().map(|(j, p)| p * p * grid.x(j).powi(2)).sum::<f64>() * dx;
        rms.push(w.sqrt());
        functions.push(f);
    }
    let widest = rms.iter().cloned().fold(0.0, f64::max);
    EigenSpectrum {
        energies: set.energies.iter().map(|&e| joule_to_ev(e)).collect(),
        parity: set.parity.clone(),
        grid: *grid,
        functions,
        rms_widths: rms,
        box_too_small: grid.width() <= 6.0 * widest,
    }
}

/// Instantaneous eigenframes along the guide in the undeformed coordinate `s`.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub s: Vec<f64>,
    /// Tracked energies per station, J.
    pub energies: Vec<Vec<f64>>,
    /// `overlaps[j][(a, b)] = ⟨a(s_j)|b(s_{j+1})⟩`, signs made continuous.
    pub overlaps: Vec<DMatrix<f64>>,
    pub parity: Vec<Parity>,
    pub min_overlap: f64,
    pub box_too_small: bool,
}

impl FrameSequence {
    /// Assembles frames from precomputed data (for example a few-level model).
    pub fn from_parts(
        s: Vec<f64>,
        energies: Vec<Vec<f64>>,
        overlaps: Vec<DMatrix<f64>>,
        parity: Vec<Parity>,
    ) -> Result<Self, QmodesError> {
        let n = parity.len();
        let ok = s.len() >= 2
            && energies.len() == s.len()
            && overlaps.len() + 1 == s.len()
            && energies.iter().all(|e| e.len() == n)
            && overlaps.iter().all(|o| o.nrows() == n && o.ncols() == n)
            && s.windows(2).all(|w| w[1] > w[0]);
        if !ok {
            return Err(QmodesError::BadOptions("inconsistent frame data".into()));
        }
        let min_overlap = min_diag(&overlaps);
        Ok(Self { s, energies, overlaps, parity, min_overlap, box_too_small: false })
    }

    pub fn tracked(&self) -> usize {
        self.parity.len()
    }
}

fn min_diag(overlaps: &[DMatrix<f64>]) -> f64 {
    overlaps.iter().flat_map(|o| (0..o.nrows()).map(move |i| o[(i, i)])).fold(1.0, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationOptions {
    pub basis: usize,
    pub tracked: usize,
    pub parity: ParitySelection,
    /// Stations of the initial uniform grid.
    pub stations: usize,
    /// Adjacent-station overlap that every tracked state must exceed.
    pub min_overlap: f64,
    /// Maximum number of bisection passes.
    pub max_refinements: usize,
}

impl Default for PropagationOptions {
    fn default() -> Self {
        Self {
            basis: DEFAULT_BASIS,
            tracked: DEFAULT_TRACKED,
            parity: ParitySelection::Even,
            stations: 201,
            min_overlap: 0.999,
            max_refinements: 6,
        }
    }
}

impl PropagationOptions {
    fn validate(&self) -> Result<(), QmodesError> {
        if self.tracked == 0 || self.basis < 2 * self.tracked || self.stations < 2 {
            return Err(QmodesError::BadOptions(format!(
                "basis {} / tracked {} / stations {}",
                self.basis, self.tracked, self.stations
            )));
        }
        if !(self.min_overlap > 0.0 && self.min_overlap < 1.0) {
            return Err(QmodesError::BadOptions(format!("min_overlap {}", self.min_overlap)));
        }
        Ok(())
    }
}

/// Solves the tracked modes along the guide, bisecting intervals whose overlap is too small.
pub fn build_frames<P: LongitudinalPotential + ?Sized>(
    potential: &P,
    species: &ParticleSpecies,
    opts: &PropagationOptions,
    workers: Workers,
) -> Result<FrameSequence, QmodesError> {
    opts.validate()?;
    let grid = potential.grid();
    let xs = grid.xs();
    let length = potential.length();
    let solve = |s: f64| {
        solve_modes(&potential.sample(s, &xs), &grid, species.mass, opts.basis, opts.tracked, opts.parity, false)
    };
    let mut s: Vec<f64> = (0..opts.stations).map(|i| length * i as f64 / (opts.stations - 1) as f64).collect();
    let mut sets: Vec<ModeSet> = exec::map(workers, &s, |&y| solve(y)).into_iter().collect::<Result<_, _>>()?;
    let mut pass = 0;
    loop {
        align_signs(&mut sets);
        let bad: Vec<usize> = (0..s.len() - 1).filter(|&j| pair_min_overlap(&sets[j], &sets[j + 1]) < opts.min_overlap).collect();
        if bad.is_empty() || pass == opts.max_refinements {
            if !bad.is_empty() {
                log::warn!("{} intervals still below overlap {} after {pass} refinements", bad.len(), opts.min_overlap);
            }
            break;
        }
        pass += 1;
        let mids: Vec<f64> = bad.iter().map(|&j| 0.5 * (s[j] + s[j + 1])).collect();
        let new: Vec<ModeSet> = exec::map(workers, &mids, |&y| solve(y)).into_iter().collect::<Result<_, _>>()?;
        let mut merged: Vec<(f64, ModeSet)> = s.drain(..).zip(sets.drain(..)).collect();
        merged.extend(mids.into_iter().zip(new));
        merged.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (y, m) in merged {
            s.push(y);
            sets.push(m);
        }
    }
    let tracked = sets.iter().map(|m| m.energies.len()).min().unwrap_or(0);
    let parity = sets[0].parity[..tracked].to_vec();
    if sets.iter().any(|m| m.parity[..tracked] != parity[..]) {
        log::warn!("tracked parity pattern changes along the guide");
    }
    let overlaps: Vec<DMatrix<f64>> = sets
        .windows(2)
        .map(|w| w[0].coeffs.columns(0, tracked).transpose() * w[1].coeffs.columns(0, tracked))
        .collect();
    let box_too_small = [0, sets.len() / 2, sets.len() - 1].iter().any(|&j| spectrum(&sets[j], &grid).box_too_small);
    if box_too_small {
        log::warn!("transverse box is narrower than six rms widths of a tracked mode");
    }
    Ok(FrameSequence {
        min_overlap: min_diag(&overlaps),
        energies: sets.iter().map(|m| m.energies[..tracked].to_vec()).collect(),
        s,
        overlaps,
        parity,
        box_too_small,
    })
}

fn align_signs(sets: &mut [ModeSet]) {
    for j in 1..sets.len() {
        let (a, b) = sets.split_at_mut(j);
        let prev = &a[j - 1];
        let cur = &mut b[0];
        let n = prev.coeffs.ncols().min(cur.coeffs.ncols());
        for i in 0..n {
            if prev.coeffs.column(i).dot(&cur.coeffs.column(i)) < 0.0 {
                cur.coeffs.column_mut(i).neg_mut();
            }
        }
    }
}

fn pair_min_overlap(a: &ModeSet, b: &ModeSet) -> f64 {
    let n = a.coeffs.ncols().min(b.coeffs.ncols());
    (0..n).map(|i| a.coeffs.column(i).dot(&b.coeffs.column(i))).fold(1.0, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTrace {
    /// Physical positions along the guide.
    pub y: Vec<f64>,
    pub t: Vec<f64>,
    pub parity: Vec<Parity>,
    pub amplitudes: Vec<Vec<Complex64>>,
    /// `|c_i|²` scaled by the estimated norm kept inside the tracked set.
    pub populations: Vec<Vec<f64>>,
    pub final_ground: f64,
    /// Largest excited population reached along the way.
    pub peak_excited: f64,
    pub min_tracked_norm: f64,
    pub truncation_warning: bool,
    pub max_step_unitarity_error: f64,
    pub min_overlap: f64,
    pub box_too_small: bool,
}

impl PopulationTrace {
    pub fn final_populations(&self) -> &[f64] {
        self.populations.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

/// Propagates amplitudes through `frames` placed at physical positions `ys` (one per frame).
pub fn evolve(frames: &FrameSequence, ys: &[f64], velocity: f64, initial: &[Complex64]) -> Result<PopulationTrace, QmodesError> {
    let n = frames.tracked();
    let norm: f64 = initial.iter().map(|c| c.norm_sqr()).sum();
    if initial.len() != n || (norm - 1.0).abs() > 1e-9 {
        return Err(QmodesError::BadInitial { expected: n });
    }
    if ys.len() != frames.s.len() || ys.windows(2).any(|w| w[1] <= w[0]) || !(velocity > 0.0) {
        return Err(QmodesError::BadOptions("positions must increase and velocity must be positive".into()));
    }
    let mut c = DVector::from_column_slice(initial);
    let mut kept = 1.0;
    let mut y0 = ys[0];
    let mut trace = PopulationTrace {
        y: vec![y0],
        t: vec![0.0],
        parity: frames.parity.clone(),
        amplitudes: vec![initial.to_vec()],
        populations: vec![initial.iter().map(|a| a.norm_sqr()).collect()],
        final_ground: 0.0,
        peak_excited: 0.0,
        min_tracked_norm: 1.0,
        truncation_warning: false,
        max_step_unitarity_error: 0.0,
        min_overlap: frames.min_overlap,
        box_too_small: frames.box_too_small,
    };
    let excited = |c: &DVector<Complex64>| c.iter().skip(1).map(|a| a.norm_sqr()).sum::<f64>();
    trace.peak_excited = excited(&c);
    for j in 0..n_steps(frames) {
        let dt = (ys[j + 1] - ys[j]) / velocity;
        let o = &frames.overlaps[j];
        let h = DMatrix::from_fn(n, n, |a, b| {
            let coupling = (o[(a, b)] - o[(b, a)]) / (2.0 * dt);
            let diag = if a == b { 0.5 * (frames.energies[j][a] + frames.energies[j + 1][a]) } else { 0.0 };
            Complex64::new(diag, -HBAR * coupling)
        });
        let u = unitary_step(h, dt);
        let err = (u.adjoint() * &u - DMatrix::<Complex64>::identity(n, n)).iter().map(|z| z.norm()).fold(0.0, f64::max);
        trace.max_step_unitarity_error = trace.max_step_unitarity_error.max(err);
        // Norm that leaves the tracked set when changing frames.
        let projected = o.map(|x| Complex64::new(x, 0.0)).transpose() * &c;
        kept *= projected.norm_squared().min(1.0);
        c = u * c;
        y0 = ys[j + 1];
        trace.y.push(y0);
        trace.t.push((y0 - ys[0]) / velocity);
        trace.amplitudes.push(c.iter().cloned().collect());
        trace.populations.push(c.iter().map(|a| kept * a.norm_sqr()).collect());
        trace.peak_excited = trace.peak_excited.max(kept * excited(&c));
        trace.min_tracked_norm = trace.min_tracked_norm.min(kept);
    }
    trace.truncation_warning = trace.min_tracked_norm < 0.99;
    if trace.truncation_warning {
        log::warn!("tracked norm fell to {:.4}", trace.min_tracked_norm);
    }
    trace.final_ground = trace.final_populations()[0];
    Ok(trace)
}

fn n_steps(frames: &FrameSequence) -> usize {
    frames.s.len() - 1
}

/// `exp(-i H dt/ħ)` for Hermitian `H`.
fn unitary_step(h: DMatrix<Complex64>, dt: f64) -> DMatrix<Complex64> {
    let eig = nalgebra::SymmetricEigen::new(h);
    let phases = DMatrix::from_diagonal(&eig.eigenvalues.map(|w| Complex64::from_polar(1.0, -w * dt / HBAR)));
    &eig.eigenvectors * phases * eig.eigenvectors.adjoint()
}

fn ground_state(n: usize) -> Vec<Complex64> {
    let mut c = vec![Complex64::new(0.0, 0.0); n];
    c[0] = Complex64::new(1.0, 0.0);
    c
}

/// Propagates through the undeformed potential; `initial` defaults to the ground state.
pub fn propagate_populations<P: LongitudinalPotential + ?Sized>(
    potential: &P,
    species: &ParticleSpecies,
    kinetic_ev: f64,
    opts: &PropagationOptions,
    initial: Option<&[Complex64]>,
    workers: Workers,
) -> Result<PopulationTrace, QmodesError> {
    if !(kinetic_ev > 0.0) {
        return Err(QmodesError::BadOptions(format!("kinetic energy {kinetic_ev} eV")));
    }
    let frames = build_frames(potential, species, opts, workers)?;
    let c0 = initial.map(|c| c.to_vec()).unwrap_or_else(|| ground_state(frames.tracked()));
    evolve(&frames, &frames.s, speed_from_ev(kinetic_ev, species.mass), &c0)
}

/// Monotone stretching `y ↦ s(y)` of the guide with `s(0) = 0`, `s(L) = L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationMap {
    pub length: f64,
    /// Interior knot values of `s`, at equally spaced `y`.
    pub knots: Vec<f64>,
}

impl DeformationMap {
    pub fn identity(length: f64) -> Self {
        Self { length, knots: Vec::new() }
    }

    pub fn from_knots(length: f64, knots: Vec<f64>) -> Result<Self, QmodesError> {
        let m = Self { length, knots };
        let s = m.knot_values();
        if s.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(QmodesError::BadOptions("deformation knots must increase strictly inside (0, L)".into()));
        }
        Ok(m)
    }

    pub fn is_identity(&self) -> bool {
        let n = self.knots.len();
        self.knots.iter().enumerate().all(|(i, &s)| (s - self.length * (i + 1) as f64 / (n + 1) as f64).abs() <= 1e-12 * self.length)
    }

    fn knot_values(&self) -> Vec<f64> {
        let mut s = vec![0.0];
        s.extend(&self.knots);
        s.push(self.length);
        s
    }

    fn spline(&self) -> Pchip {
        let n = self.knots.len() + 2;
        let ys = (0..n).map(|i| self.length * i as f64 / (n - 1) as f64).collect();
        Pchip::new(ys, self.knot_values())
    }

    pub fn s_of_y(&self, y: f64) -> f64 {
        self.spline().eval(y)
    }

    /// Physical positions of the given `s` values.
    pub fn y_of_s(&self, s: &[f64]) -> Vec<f64> {
        let p = self.spline();
        s.iter()
            .map(|&target| {
                let (mut lo, mut hi) = (0.0, self.length);
                if target <= 0.0 {
                    return 0.0;
                }
                if target >= self.length {
                    return self.length;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if p.eval(mid) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-15 * self.length {
                        break;
                    }
                }
                0.5 * (lo + hi)
            })
            .collect()
    }
}

/// A base potential seen through a deformation map.
pub struct Deformed<'a, P: ?Sized> {
    pub base: &'a P,
    pub map: DeformationMap,
}

impl<P: LongitudinalPotential + ?Sized> LongitudinalPotential for Deformed<'_, P> {
    fn length(&self) -> f64 {
        self.base.length()
    }
    fn grid(&self) -> XGrid {
        self.base.grid()
    }
    fn alpha(&self) -> f64 {
        self.base.alpha()
    }
    fn sample(&self, y: f64, xs: &[f64]) -> Vec<f64> {
        self.base.sample(self.map.s_of_y(y), xs)
    }
}

#[derive(Debug, Clone)]
pub struct DeformationResult {
    pub map: DeformationMap,
    pub identity_ground: f64,
    pub trace: PopulationTrace,
    pub history: Vec<HistoryEntry>,
    pub note: Option<String>,
}

/// Maximizes the final ground-state population over monotone stretchings with `knots` interior knots.
pub fn optimize_deformation<P: LongitudinalPotential + ?Sized>(
    potential: &P,
    species: &ParticleSpecies,
    kinetic_ev: f64,
    knots: usize,
    simplex_opts: &SimplexOptions,
    opts: &PropagationOptions,
    workers: Workers,
) -> Result<DeformationResult, QmodesError> {
    if knots == 1 {
        return Err(QmodesError::BadKnots(knots));
    }
    if !(kinetic_ev > 0.0) {
        return Err(QmodesError::BadOptions(format!("kinetic energy {kinetic_ev} eV")));
    }
    let frames = build_frames(potential, species, opts, workers)?;
    let v = speed_from_ev(kinetic_ev, species.mass);
    let l = potential.length();
    let c0 = ground_state(frames.tracked());
    let identity = evolve(&frames, &frames.s, v, &c0)?;
    if knots == 0 {
        return Ok(DeformationResult {
            map: DeformationMap::identity(l),
            identity_ground: identity.final_ground,
            trace: identity,
            history: Vec::new(),
            note: None,
        });
    }
    let run = |x: &[f64]| -> Result<PopulationTrace, String> {
        let map = DeformationMap::from_knots(l, x.iter().map(|u| u * l).collect()).map_err(|e| e.to_string())?;
        evolve(&frames, &map.y_of_s(&frames.s), v, &c0).map_err(|e| e.to_string())
    };
    let objective = |x: &[f64]| run(x).map(|t| -t.final_ground);
    let x0: Vec<f64> = (1..=knots).map(|i| i as f64 / (knots + 1) as f64).collect();
    let r = simplex::minimize(&objective, &x0, &vec![0.0; knots], &vec![1.0; knots], simplex_opts, workers);
    let best = -r.best_value;
    if !(best > identity.final_ground) {
        return Ok(DeformationResult {
            map: DeformationMap::from_knots(l, x0.iter().map(|u| u * l).collect())?,
            identity_ground: identity.final_ground,
            trace: identity,
            history: r.history,
            note: Some("no candidate improved on the unstretched guide; identity map returned".into()),
        });
    }
    let map = DeformationMap::from_knots(l, r.best.iter().map(|u| u * l).collect())?;
    let trace = run(&r.best).map_err(QmodesError::BadOptions)?;
    Ok(DeformationResult { map, identity_ground: identity.final_ground, trace, history: r.history, note: None })
}

/// Analytic double-well surrogate: one quartic well that opens into two.
///
/// `V = (Mω²/8)(x² − p)²/(|p| + b²)` with `p = h|h|` and `h(y) = −T cos(πy/L)`,
/// so the guide starts as a single well and ends with wells at `±T = ±αL`.
/// The member for drive `Ω` has `ω ∝ Ω` and transverse scale `b ∝ 1/Ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuarticFamily {
    /// Longitudinal length, m.
    pub length: f64,
    /// Drive at which the reference scales apply, rad/s.
    pub reference_drive: f64,
    /// Well frequency at the reference drive, rad/s.
    pub reference_omega: f64,
    /// Softening `b` at the reference drive, m.
    pub reference_softening: f64,
    /// Box padding beyond the outer well, in oscillator lengths.
    pub margin_lengths: f64,
    pub grid_points: usize,
}

impl Default for QuarticFamily {
    fn default() -> Self {
        let two_pi = 2.0 * std::f64::consts::PI;
        Self {
            length: 40e-3,
            reference_drive: two_pi * 8e9,
            reference_omega: two_pi * 400e6,
            reference_softening: 0.65e-6,
            margin_lengths: 12.0,
            grid_points: 4096,
        }
    }
}

impl QuarticFamily {
    pub fn member(&self, alpha: f64, drive: f64, species: &ParticleSpecies) -> Result<QuarticSplitter, QmodesError> {
        if !(alpha >= 0.0 && drive > 0.0 && self.length > 0.0) {
            return Err(QmodesError::BadOptions(format!("alpha {alpha}, drive {drive}")));
        }
        let ratio = drive / self.reference_drive;
        let omega = self.reference_omega * ratio;
        let softening = self.reference_softening / ratio;
        let half_sep = alpha * self.length;
        let ell = (HBAR / (species.mass * omega)).sqrt();
        let half_extent = 3.0 * half_sep + self.margin_lengths * ell + 2.0 * softening;
        Ok(QuarticSplitter {
            alpha,
            length: self.length,
            omega,
            softening,
            mass: species.mass,
            grid: XGrid::new(half_extent, self.grid_points)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuarticSplitter {
    pub alpha: f64,
    pub length: f64,
    pub omega: f64,
    pub softening: f64,
    pub mass: f64,
    pub grid: XGrid,
}

impl QuarticSplitter {
    /// Signed squared half separation.
    pub fn p(&self, y: f64) -> f64 {
        let u = (y / self.length).clamp(0.0, 1.0);
        let h = -self.alpha * self.length * (std::f64::consts::PI * u).cos();
        h * h.abs()
    }

    /// Potential in eV.
    pub fn value(&self, x: f64, y: f64) -> f64 {
        let p = self.p(y);
        let k = self.mass * self.omega * self.omega / 8.0;
        joule_to_ev(k * (x * x - p).powi(2) / (p.abs() + self.softening * self.softening))
    }

    /// Same potential on a different transverse grid.
    pub fn with_grid(mut self, grid: XGrid) -> Self {
        self.grid = grid;
        self
    }
}

impl LongitudinalPotential for QuarticSplitter {
    fn length(&self) -> f64 {
        self.length
    }
    fn grid(&self) -> XGrid {
        self.grid
    }
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn sample(&self, y: f64, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.value(x, y)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanCell {
    pub alpha: f64,
    pub drive: f64,
    pub final_ground: Option<f64>,
    pub peak_excited: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdiabaticityGrid {
    pub alphas: Vec<f64>,
    pub drives: Vec<f64>,
    /// Row-major: `cells[i * drives.len() + j]` is `(alphas[i], drives[j])`.
    pub cells: Vec<ScanCell>,
    /// Final population never increases with α at fixed drive.
    pub non_increasing_in_alpha: bool,
    /// Final population never decreases with drive at fixed α.
    pub non_decreasing_in_drive: bool,
}

impl AdiabaticityGrid {
    pub fn cell(&self, i: usize, j: usize) -> &ScanCell {
        &self.cells[i * self.drives.len() + j]
    }
}

pub fn adiabaticity_scan(
    family: &QuarticFamily,
    species: &ParticleSpecies,
    kinetic_ev: f64,
    alphas: &[f64],
    drives: &[f64],
    opts: &PropagationOptions,
    workers: Workers,
) -> AdiabaticityGrid {
    let pairs: Vec<(f64, f64)> = alphas.iter().flat_map(|&a| drives.iter().map(move |&d| (a, d))).collect();
    let cells = exec::map(workers, &pairs, |&(alpha, drive)| {
        let r = family
            .member(alpha, drive, species)
            .and_then(|m| propagate_populations(&m, species, kinetic_ev, opts, None, Workers::SEQUENTIAL));
        match r {
            Ok(t) => ScanCell { alpha, drive, final_ground: Some(t.final_ground), peak_excited: Some(t.peak_excited), error: None },
            Err(e) => ScanCell { alpha, drive, final_ground: None, peak_excited: None, error: Some(e.to_string()) },
        }
    });
    let nd = drives.len();
    let pop = |i: usize, j: usize| cells[i * nd + j].final_ground;
    let sorted = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
    let trend = |outer: usize, inner: usize, get: &dyn Fn(usize, usize) -> Option<f64>, rising: bool| {
        (0..outer).all(|o| {
            let v: Vec<f64> = (0..inner).filter_map(|i| get(o, i)).collect();
            v.windows(2).all(|w| if rising { w[1] >= w[0] - 1e-9 } else { w[1] <= w[0] + 1e-9 })
        })
    };
    let non_increasing_in_alpha = sorted(alphas) && trend(nd, alphas.len(), &|j, i| pop(i, j), false);
    let non_decreasing_in_drive = sorted(drives) && trend(alphas.len(), nd, &|i, j| pop(i, j), true);
    AdiabaticityGrid {
        alphas: alphas.to_vec(),
        drives: drives.to_vec(),
        cells,
        non_increasing_in_alpha,
        non_decreasing_in_drive,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{ELECTRON_MASS, ELEMENTARY_CHARGE};

    fn electron() -> ParticleSpecies {
        ParticleSpecies::electron()
    }

    #[test]
    fn cosine_coefficients_match_direct_sum() {
        let v: Vec<f64> = (0..64).map(|j| ((j as f64) * 0.37).sin() + 0.1 * j as f64).collect();
        let c = cosine_coefficients(&v);
        for m in [0, 1, 7, 40, 63] {
            let d: f64 = v
                .iter()
                .enumerate()
                .map(|(j, x)| x * (std::f64::consts::PI * m as f64 * (j as f64 + 0.5) / 64.0).cos())
                .sum::<f64>()
                / 64.0;
            assert!((c[m] - d).abs() < 1e-12, "{m}: {} vs {d}", c[m]);
        }
    }

    #[test]
    fn empty_box_is_exact() {
        let grid = XGrid::new(5e-6, 2048).unwrap();
        let s = solve_station(&vec![0.0; 2048], &grid, &electron(), 200, 8).unwrap();
        let w = grid.width();
        for (i, e) in s.energies.iter().enumerate() {
            let k = (i + 1) as f64;
            let exact = HBAR * HBAR * std::f64::consts::PI.powi(2) * k * k / (2.0 * ELECTRON_MASS * w * w) / ELEMENTARY_CHARGE;
            assert!((e - exact).abs() <= 1e-12 * exact, "{i}: {e} vs {exact}");
            assert_eq!(s.parity[i], if i % 2 == 0 { Parity::Even } else { Parity::Odd });
        }
    }

    #[test]
    fn eigenfunctions_are_orthonormal() {
        let grid = XGrid::new(4e-6, 2048).unwrap();
        let v: Vec<f64> = grid.xs().iter().map(|x| 1e-3 * (x / 1e-6).powi(2) + 2e-4 * (x / 0.5e-6).powi(2).cos()).collect();
        let s = solve_station(&v, &grid, &electron(), 300, 10).unwrap();
        let dx = grid.dx();
        for i in 0..10 {
            for j in 0..10 {
                let d: f64 = s.functions[i].iter().zip(&s.functions[j]).map(|(a, b)| a * b).sum::<f64>() * dx;
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-8, "({i},{j}) {d}");
            }
        }
        assert!(s.energies.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn odd_potential_is_rejected() {
        let grid = XGrid::new(4e-6, 1024).unwrap();
        let v: Vec<f64> = grid.xs().iter().map(|x| x * 1e3).collect();
        assert!(solve_station(&v, &grid, &electron(), 100, 4).is_err());
    }

    #[test]
    fn deformation_map_round_trips() {
        let m = DeformationMap::from_knots(1.0, vec![0.1, 0.3, 0.5, 0.8]).unwrap();
        let ss: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let ys = m.y_of_s(&ss);
        for (s, y) in ss.iter().zip(&ys) {
            assert!((m.s_of_y(*y) - s).abs() < 1e-12);
        }
        assert!(DeformationMap::from_knots(1.0, vec![0.5, 0.4]).is_err());
        assert!(DeformationMap::from_knots(1.0, vec![0.25, 0.5, 0.75]).unwrap().is_identity());
    }

    #[test]
    fn potential_csv_round_trips() {
        let fam = QuarticFamily { grid_points: 64, ..Default::default() };
        let m = fam.member(0.1e-3, 2.0 * std::f64::consts::PI * 8e9, &electron()).unwrap();
        let p = TransversePotential1D::from_profile(&m, 5).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let q = TransversePotential1D::read_csv(buf.as_slice()).unwrap();
        assert_eq!(p.stations().len(), q.stations().len());
        for (a, b) in p.stations().iter().zip(q.stations()) {
            assert!(a.v.iter().zip(&b.v).all(|(x, y)| (x - y).abs() <= 1e-14 * x.abs().max(1e-30)));
        }
    }

    #[test]
    fn static_potential_keeps_populations() {
        let grid = XGrid::new(3e-6, 1024).unwrap();
        let v: Vec<f64> = grid.xs().iter().map(|x| 1e-3 * (x / 0.3e-6).powi(2)).collect();
        let p = TransversePotential1D::new(grid, 1e-3, 0.0, vec![Station { y: 0.0, v: v.clone() }, Station { y: 1e-3, v }]).unwrap();
        let opts = PropagationOptions { basis: 200, tracked: 4, stations: 11, ..Default::default() };
        let amp = Complex64::new(0.5, 0.0);
        let c0 = vec![amp; 4];
        let t = propagate_populations(&p, &electron(), 1.0, &opts, Some(&c0), Workers::SEQUENTIAL).unwrap();
        for pops in &t.populations {
            for q in pops {
                assert!((q - 0.25).abs() < 1e-10);
            }
        }
    }
}
