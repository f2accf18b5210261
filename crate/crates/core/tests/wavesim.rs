use eguide::exec::Workers;
use eguide::pseudopot::ParticleSpecies;
use eguide::qmodes::{self, LongitudinalPotential, ParitySelection, QuarticFamily, XGrid};
use eguide::units::{speed_from_ev, ELECTRON_MASS, ELEMENTARY_CHARGE, HBAR};
use eguide::wavesim::*;
use num_complex::Complex64;
use std::f64::consts::PI;

const OMEGA: f64 = 2.0 * PI * 400e6;

/// Potential that does not change along the guide.
struct Static<F> {
    f: F,
    grid: XGrid,
    length: f64,
}

impl<F: Fn(f64) -> f64 + Sync> LongitudinalPotential for Static<F> {
    fn length(&self) -> f64 {
        self.length
    }
    fn grid(&self) -> XGrid {
        self.grid
    }
    fn alpha(&self) -> f64 {
        0.0
    }
    fn sample(&self, _y: f64, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| (self.f)(x)).collect()
    }
}

fn ell() -> f64 {
    (HBAR / (ELECTRON_MASS * OMEGA)).sqrt()
}

fn harmonic() -> Static<impl Fn(f64) -> f64 + Sync> {
    Static {
        f: |x: f64| 0.5 * ELECTRON_MASS * OMEGA * OMEGA * x * x / ELEMENTARY_CHARGE,
        grid: XGrid::new(12.0 * ell(), 2048).unwrap(),
        length: 1.0,
    }
}

fn coherent(grid: &XGrid, centre: f64, momentum: f64) -> Vec<Complex64> {
    let l = ell();
    let norm = (PI * l * l).powf(-0.25);
    grid.xs()
        .iter()
        .map(|&x| Complex64::from_polar(norm * (-(x - centre).powi(2) / (2.0 * l * l)).exp(), momentum * (x - centre) / HBAR))
        .collect()
}

/// Length travelled in `periods` oscillation periods at 1 eV.
fn travel(periods: f64) -> f64 {
    speed_from_ev(1.0, ELECTRON_MASS) * periods * 2.0 * PI / OMEGA
}

fn wave_grid() -> XGrid {
    XGrid::new(12.0 * ell(), 1024).unwrap()
}

#[test]
fn ground_state_is_stationary() {
    let e = ParticleSpecies::electron();
    let pot = harmonic();
    let modes = qmodes::solve_expansions(&pot.sample(0.0, &pot.grid.xs()), &pot.grid, &e, 300, 1, ParitySelection::Even).unwrap();
    let grid = wave_grid();
    let g: Vec<f64> = grid.xs().iter().map(|&x| modes[0].eval(x)).collect();
    let psi = g.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let st = WavePacketState::new(grid, psi, 0.0).unwrap();
    let opts = SplitStepOptions { steps: 2048, snapshot_stride: 256, ..Default::default() };
    let out = split_step_propagate(st, &pot, &e, 1.0, travel(5.0), &opts).unwrap();
    let pop = out.state.project(&g).norm_sqr();
    assert!(pop >= 1.0 - 1e-6, "{pop}");
    let rho0 = &out.snapshots[0].1;
    for (_, rho) in &out.snapshots {
        let dev = rho.iter().zip(rho0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-4 * rho0.iter().cloned().fold(0.0, f64::max), "{dev:e}");
    }
}

#[test]
fn displaced_packet_follows_ehrenfest() {
    let e = ParticleSpecies::electron();
    let pot = harmonic();
    let grid = wave_grid();
    let d = 2.0 * ell();
    let st = WavePacketState::new(grid, coherent(&grid, d, 0.0), 0.0).unwrap();
    let steps = 4096;
    let stride = 16;
    let opts = SplitStepOptions { steps, snapshot_stride: stride, ..Default::default() };
    let y_end = travel(3.0);
    let out = split_step_propagate(st, &pot, &e, 1.0, y_end, &opts).unwrap();
    let v = speed_from_ev(1.0, ELECTRON_MASS);
    for (y, rho) in &out.snapshots {
        let t = y / v;
        let mean: f64 = rho.iter().enumerate().map(|(j, p)| p * grid.x(j)).sum::<f64>() / rho.iter().sum::<f64>();
        assert!((mean - d * (OMEGA * t).cos()).abs() < 5e-3 * d, "t = {t:e}: {mean:e}");
    }
}

#[test]
fn strang_splitting_is_second_order() {
    let e = ParticleSpecies::electron();
    let pot = harmonic();
    let grid = wave_grid();
    let d = 2.0 * ell();
    let y_end = travel(1.3);
    let t_end = y_end / speed_from_ev(1.0, ELECTRON_MASS);
    let exact = coherent(&grid, d * (OMEGA * t_end).cos(), -ELECTRON_MASS * OMEGA * d * (OMEGA * t_end).sin());
    let err = |steps: usize| {
        let st = WavePacketState::new(grid, coherent(&grid, d, 0.0), 0.0).unwrap();
        let out = split_step_propagate(st, &pot, &e, 1.0, y_end, &SplitStepOptions { steps, ..Default::default() }).unwrap();
        let overlap: Complex64 =
            out.state.psi.iter().zip(&exact).map(|(a, b)| b.conj() * a).sum::<Complex64>() * grid.dx();
        (2.0 - 2.0 * overlap.norm()).max(0.0).sqrt()
    };
    let (e1, e2) = (err(48), err(96));
    let factor = e1 / e2;
    assert!((3.0..=5.0).contains(&factor), "factor {factor} ({e1:e}, {e2:e})");
}

#[test]
fn decoupled_wells_give_identity() {
    let e = ParticleSpecies::electron();
    let a = 2e-6;
    let k = ELECTRON_MASS * OMEGA * OMEGA / (8.0 * a * a);
    let pot = Static {
        f: move |x: f64| k * (x * x - a * a).powi(2) / ELEMENTARY_CHARGE,
        grid: XGrid::new(3.0 * a + 12.0 * ell(), 4096).unwrap(),
        length: 5e-3,
    };
    let x = XShaped { arm: &pot, center: 0.0 };
    let opts = WaveOptions { split_step: SplitStepOptions { steps: 4096, ..Default::default() }, ..Default::default() };
    let b = extract_matrix(&x, &e, 1.0, &opts, Workers::SEQUENTIAL).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((b.b[(i, j)] - want).norm() < 1e-6, "B[{i}{j}] = {}", b.b[(i, j)]);
        }
    }
    assert!(b.theta < 1e-6);
}

#[test]
fn splitter_symmetries_and_norm() {
    let e = ParticleSpecies::electron();
    let fam = QuarticFamily { length: 10e-3, ..Default::default() };
    let arm = fam.member(0.2e-3, 2.0 * PI * 10e9, &e).unwrap();
    let x = XShaped { arm: &arm, center: 0.2e-3 };
    let opts = WaveOptions { split_step: SplitStepOptions { steps: 1 << 13, ..Default::default() }, ..Default::default() };
    let (l, r) = (Complex64::new(0.6, 0.0), Complex64::new(0.0, 0.8));
    let a = run_splitter(&x, [l, r], &e, 1.0, &opts).unwrap();
    let b = run_splitter(&x, [r, l], &e, 1.0, &opts).unwrap();
    assert!((a.output[0] - b.output[1]).norm() < 1e-9 && (a.output[1] - b.output[0]).norm() < 1e-9);
    assert!(a.propagation.total_norm_drift < 1e-7);
    assert!(a.propagation.max_step_norm_drift < 1e-10);
    let m = extract_matrix(&x, &e, 1.0, &opts, Workers::default()).unwrap();
    assert!((m.b[(0, 0)].norm() - m.b[(1, 1)].norm()).abs() < 1e-3);
    assert!((m.b[(0, 1)].norm() - m.b[(1, 0)].norm()).abs() < 1e-3);
    assert!(m.det_abs <= 1.0 + 1e-9);
    assert!((0.0..=PI / 2.0).contains(&m.theta));
    // Linearity: any input is B applied to it.
    let p = m.apply([l, r]);
    let ph = a.output[0] / p[0];
    assert!((a.output[1] - ph * p[1]).norm() < 1e-9);
}

#[test]
fn port_states_are_orthonormal() {
    let e = ParticleSpecies::electron();
    let arm = QuarticFamily::default().member(0.08e-3, 2.0 * PI * 10e9, &e).unwrap();
    let p = ports(&arm, &e, arm.length, &WaveOptions::default()).unwrap();
    let dx = p.grid.dx();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * dx;
    assert!(dot(&p.left, &p.right).abs() < 1e-8);
    assert!((dot(&p.left, &p.left) - 1.0).abs() < 1e-10);
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    for j in 0..p.grid.points {
        assert!((p.left[j] - r2 * (p.symmetric[j] + p.antisymmetric[j])).abs() < 1e-10);
    }
    // The left mode lives at negative x.
    let mean: f64 = p.left.iter().enumerate().map(|(j, v)| v * v * p.grid.x(j)).sum::<f64>() * dx;
    assert!(mean < 0.0);
    assert!(p.width / dx >= 16.0);
}
