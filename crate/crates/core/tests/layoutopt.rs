use eguide::chip::reconstructed_layout;
use eguide::electrostatics::{rectangle, Electrode, ElectrodeLayout};
use eguide::exec::Workers;
use eguide::layoutopt::*;
use eguide::pseudopot::{find_transverse_minimum, DriveParams, MinimumOptions, ParticleSpecies};
use eguide::simplex::SimplexOptions;

fn five_wire(a: f64, b: f64, half_len: f64) -> ElectrodeLayout {
    ElectrodeLayout::new(
        vec![
            Electrode::signal(rectangle(-0.5 * a - b, -0.5 * a, -half_len, half_len)),
            Electrode::signal(rectangle(0.5 * a, 0.5 * a + b, -half_len, half_len)),
        ],
        true,
    )
    .unwrap()
}

/// One control point: the near-end corner of the right rail's inner edge
/// (and its mirror image) slides along x, narrowing or widening the centre.
fn toy() -> (LayoutParametrization, MeritSpec) {
    let layout = five_wire(600e-6, 400e-6, 10e-3);
    let c = ControlPoint { electrode: 1, vertex: 0, direction: [1.0, 0.0], lower: -200e-6, upper: 200e-6 };
    let param = LayoutParametrization::new(layout.clone(), vec![c]).unwrap();
    let (d, e) = (DriveParams::experiment(), ParticleSpecies::electron());
    let m = find_transverse_minimum(&layout, &d, &e, 0.0, (0.0, 400e-6), &MinimumOptions::default()).unwrap();
    let wz = m.omegas(&e).1;
    let spec = MeritSpec {
        stations: vec![-2e-3, 0.0, 2e-3],
        target_omega_z: 1.08 * wz,
        weight_gradient: 1.0,
        weight_omega: 1.0,
        reference_height: Some(0.95 * m.z),
        height_guess: m.z,
    };
    (param, spec)
}

#[test]
fn one_parameter_toy_matches_scan() {
    let (param, spec) = toy();
    let (d, e) = (DriveParams::experiment(), ParticleSpecies::electron());
    let eval = |t: f64| merit(&param.apply(&[t]).unwrap(), &d, &e, &spec).value;
    // Coarse scan, then a fine scan around the coarse optimum.
    let coarse: Vec<(f64, f64)> = (0..=80).map(|i| -200e-6 + 5e-6 * i as f64).map(|t| (t, eval(t))).collect();
    let c = coarse.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    let fine: Vec<(f64, f64)> = (0..=100).map(|i| c - 5e-6 + 0.1e-6 * i as f64).map(|t| (t, eval(t))).collect();
    let (t_scan, m_scan) = *fine.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert!(t_scan > -195e-6 && t_scan < 195e-6, "optimum should be interior, got {t_scan}");

    let r = optimize_layout(&param, &[0.0], &d, &e, &spec, &SimplexOptions::default(), Workers::default()).unwrap();
    assert!(r.converged);
    assert!((r.best_merit - m_scan).abs() <= 0.01 * m_scan, "{} vs {}", r.best_merit, m_scan);
    assert!((r.best_params[0] - t_scan).abs() <= 0.01 * 400e-6);
    assert!(r.history.windows(2).all(|w| w[1].best <= w[0].best));

    // Restarting from the optimum is a fixed point.
    let again =
        optimize_layout(&param, &r.best_params, &d, &e, &spec, &SimplexOptions::default(), Workers::default()).unwrap();
    assert!((again.best_merit - r.best_merit).abs() <= 1e-4 * r.best_merit);
}

#[test]
fn zero_dof_returns_base_layout() {
    let layout = five_wire(600e-6, 400e-6, 10e-3);
    let param = LayoutParametrization::new(layout.clone(), vec![]).unwrap();
    let (_, spec) = toy();
    let (d, e) = (DriveParams::experiment(), ParticleSpecies::electron());
    let r = optimize_layout(&param, &[], &d, &e, &spec, &SimplexOptions::default(), Workers::SEQUENTIAL).unwrap();
    assert_eq!(r.history.len(), 1);
    assert_eq!(r.best_layout.electrodes(), layout.electrodes());
}

#[test]
fn far_vertex_perturbation_is_negligible() {
    let base = reconstructed_layout();
    let (d, e) = (DriveParams::experiment(), ParticleSpecies::electron());
    let spec = MeritSpec::spanning(4e-3, 8e-3, 3, 2.0 * std::f64::consts::PI * 50e6, 470e-6);
    // Outer rail corner at the far end of the chip.
    let (ei, vi) = base
        .electrodes()
        .iter()
        .enumerate()
        .flat_map(|(i, el)| el.polygon.iter().enumerate().map(move |(j, p)| (i, j, *p)))
        .filter(|(_, _, p)| p.x > 0.0)
        .max_by(|a, b| (a.2.y + a.2.x).total_cmp(&(b.2.y + b.2.x)))
        .map(|(i, j, _)| (i, j))
        .unwrap();
    let c = ControlPoint { electrode: ei, vertex: vi, direction: [1.0, 0.0], lower: -1e-6, upper: 1e-6 };
    let param = LayoutParametrization::new(base, vec![c]).unwrap();
    let m0 = merit(&param.apply(&[0.0]).unwrap(), &d, &e, &spec);
    let m1 = merit(&param.apply(&[1e-9]).unwrap(), &d, &e, &spec);
    assert!(!m0.is_penalty());
    assert!((m1.value - m0.value).abs() < 1e-6 * m0.value, "{} vs {}", m0.value, m1.value);
}

#[test]
fn invalid_candidates_are_penalized_not_fatal() {
    // Bounds allow the rail corner to cross into its mirror image.
    let layout = five_wire(100e-6, 400e-6, 10e-3);
    let c = ControlPoint { electrode: 1, vertex: 0, direction: [-1.0, 0.0], lower: 0.0, upper: 300e-6 };
    let param = LayoutParametrization::new(layout, vec![c]).unwrap();
    assert!(param.apply(&[200e-6]).is_err());
    let (_, spec) = toy();
    let (d, e) = (DriveParams::experiment(), ParticleSpecies::electron());
    let opts = SimplexOptions { max_evaluations: 40, ..Default::default() };
    let r = optimize_layout(&param, &[40e-6], &d, &e, &spec, &opts, Workers::SEQUENTIAL).unwrap();
    assert!(!r.penalized.is_empty());
    assert!(r.best_merit < MERIT_PENALTY);
    assert!(r.best_layout.mirror_symmetric_x());
}
