//! Sequential against pooled execution for the three data-parallel hot spots.
//! Build with `--no-default-features` to compare against the rayon-free fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eguide::chip::SplitterProfile;
use eguide::exec::Workers;
use eguide::pseudopot::{pseudo_map_xz, DriveParams, ParticleSpecies};
use eguide::qmodes::{propagate_populations, PropagationOptions, QuarticFamily};
use eguide::tracker::{run_ensemble, DetectorPlane, Domain, FieldModel, SourceSpec, TrackOptions};
use eguide::units::speed_from_ev;
use std::f64::consts::PI;

fn modes() -> [(&'static str, Workers); 2] {
    [("sequential", Workers::SEQUENTIAL), ("pool", Workers::default())]
}

fn field_map(c: &mut Criterion) {
    let layout = SplitterProfile::straight_quadrupole(20e-3).build().unwrap();
    let (d, e) = (DriveParams::experiment(), ParticleSpecies::electron());
    let mut g = c.benchmark_group("pseudo_map_31x31");
    for (name, w) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &w, |b, &w| {
            b.iter(|| pseudo_map_xz(&layout, &d, &e, 10e-3, (-600e-6, 600e-6), (150e-6, 900e-6), 31, 31, w).unwrap())
        });
    }
    g.finish();
}

fn ensemble(c: &mut Criterion) {
    let layout = SplitterProfile::straight_quadrupole(20e-3).build().unwrap();
    let (d, e) = (DriveParams::experiment(), ParticleSpecies::electron());
    let domain = Domain::for_chip(20e-3, 2e-3);
    let det = DetectorPlane::at(22e-3);
    let mut src = SourceSpec::standard([0.0, 0.0, 478e-6], 1.5, 1);
    src.rays = 8;
    src.phases = 1;
    let o = TrackOptions::new(3.0 * domain.y_max / speed_from_ev(1.5, e.mass));
    let model = FieldModel::direct(&layout);
    let mut g = c.benchmark_group("ensemble_8");
    g.sample_size(10);
    for (name, w) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &w, |b, &w| {
            b.iter(|| run_ensemble(&model, &d, &e, &src, &domain, &det, &o, w).unwrap())
        });
    }
    g.finish();
}

fn frames(c: &mut Criterion) {
    let e = ParticleSpecies::electron();
    let m = QuarticFamily::default().member(0.1e-3, 2.0 * PI * 8e9, &e).unwrap();
    let opts = PropagationOptions { stations: 41, max_refinements: 0, ..Default::default() };
    let mut g = c.benchmark_group("frames_41");
    g.sample_size(10);
    for (name, w) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &w, |b, &w| {
            b.iter(|| propagate_populations(&m, &e, 1.0, &opts, None, w).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, field_map, ensemble, frames);
criterion_main!(benches);
