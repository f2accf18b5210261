use std::f64::consts::PI;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use eguide::chip::{self, SplitterProfile};
use eguide::electrostatics::ElectrodeLayout;
use eguide::exec::Workers;
use eguide::io::{self, Csv, LayoutFile};
use eguide::layoutopt::{self, ControlPoint, LayoutParametrization, MeritSpec};
use eguide::pseudopot::{self, CharacterizeOptions, DriveParams, MinimumOptions, ParticleSpecies, SearchWindow};
use eguide::qmodes::{
    self, DeformationMap, Deformed, LongitudinalPotential, Parity, PopulationTrace, TransversePotential1D, XGrid,
};
use eguide::tracker::{self, DetectorPlane, Domain, FieldCache, FieldModel, SourceSpec, TrackOptions};
use eguide::units::speed_from_ev;
use eguide::wavesim::{self, WaveOptions, XShaped};
use num_complex::Complex64;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{PotentialConfig, QuantumConfig, RunConfig, WaveConfig};

/// Straight quadrupole test guide length shipped as `builtin:quadrupole`.
pub const QUADRUPOLE_LENGTH: f64 = 20e-3;

pub enum Failure {
    /// Bad input discovered while preparing the run (exit 2).
    Config(String),
    /// A module failed during the run (exit 1).
    Runtime { module: &'static str, message: String },
}

fn rt(module: &'static str) -> impl Fn(String) -> Failure {
    move |message| Failure::Runtime { module, message }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::Runtime { module: "io", message: e.to_string() }
}

pub struct Context {
    pub cfg: RunConfig,
    pub base_dir: PathBuf,
    pub out: PathBuf,
    pub workers: Workers,
    pub drive: DriveParams,
    pub species: ParticleSpecies,
    pub written: Vec<String>,
}

impl Context {
    pub fn new(cfg: RunConfig, base_dir: PathBuf, out: PathBuf, workers: Workers) -> Result<Self, Failure> {
        let d = cfg.drive;
        let drive = DriveParams::new(2.0 * PI * d.frequency_ghz * 1e9, d.amplitude_v, d.phase_rad)
            .map_err(|e| Failure::Config(format!("drive: {e}")))?;
        let species = ParticleSpecies::new(cfg.species.charge_c, cfg.species.mass_kg)
            .map_err(|e| Failure::Config(format!("species: {e}")))?;
        Ok(Self { cfg, base_dir, out, workers, drive, species, written: Vec::new() })
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn csv(&mut self, name: &str, csv: &Csv) -> Result<(), Failure> {
        csv.write(&self.out.join(name)).map_err(io_failure)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime { module: "io", message: e.to_string() })?;
        std::fs::write(self.out.join(name), text + "\n").map_err(io_failure)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn layout(&self) -> Result<ElectrodeLayout, Failure> {
        match self.cfg.layout.as_deref() {
            None | Some("builtin:reconstructed") => Ok(chip::reconstructed_layout()),
            Some("builtin:quadrupole") => quadrupole_layout().map_err(Failure::Config),
            Some(p) => io::read_layout(&self.path(Path::new(p))).map_err(|e| Failure::Config(format!("layout: {e}"))),
        }
    }
}

pub fn quadrupole_layout() -> Result<ElectrodeLayout, String> {
    SplitterProfile::straight_quadrupole(QUADRUPOLE_LENGTH).build().map_err(|e| e.to_string())
}

/// Longitudinal extent of the electrode pattern.
fn chip_length(layout: &ElectrodeLayout) -> f64 {
    layout.electrodes().iter().flat_map(|e| e.polygon.iter().map(|p| p.y)).fold(0.0, f64::max)
}

pub fn run(ctx: &mut Context, subcommand: &str) -> Result<Value, Failure> {
    match subcommand {
        "field-map" => field_map(ctx),
        "characterize" => characterize(ctx),
        "optimize-layout" => optimize_layout(ctx),
        "track" => track(ctx),
        "displaced-scan" => displaced_scan(ctx),
        "eigen" => eigen(ctx),
        "adiabatic" => adiabatic(ctx),
        "optimize-deformation" => optimize_deformation(ctx),
        "adiabaticity-scan" => adiabaticity_scan(ctx),
        "wavepacket" => wavepacket(ctx),
        "splitter-matrix" => splitter_matrix(ctx),
        "intensity-locus" => intensity_locus(ctx),
        "calibrate-center" => calibrate(ctx),
        other => Err(Failure::Config(format!("unknown subcommand `{other}`"))),
    }
}

fn field_map(ctx: &mut Context) -> Result<Value, Failure> {
    let f = ctx.cfg.field_map.unwrap_or_default();
    let layout = ctx.layout()?;
    let y = f.y_mm * 1e-3;
    let map = pseudopot::pseudo_map_xz(
        &layout,
        &ctx.drive,
        &ctx.species,
        y,
        (-f.x_half_width_um * 1e-6, f.x_half_width_um * 1e-6),
        (f.z_min_um * 1e-6, f.z_max_um * 1e-6),
        f.nx,
        f.nz,
        ctx.workers,
    )
    .map_err(|e| rt("pseudopot")(e.to_string()))?;
    let mut csv = Csv::new(&["x_um", "z_um", "psi_ev"]);
    for (ix, &x) in map.xs.iter().enumerate() {
        for (iz, &z) in map.zs.iter().enumerate() {
            csv.row(&[x * 1e6, z * 1e6, map.value(ix, iz)]);
        }
    }
    ctx.csv("pseudo_map.csv", &csv)?;
    let (gx, gz, gv) = map.grid_minimum();
    let m = pseudopot::find_transverse_minimum(&layout, &ctx.drive, &ctx.species, y, (gx, gz), &MinimumOptions::default())
        .map_err(|e| rt("pseudopot")(e.to_string()))?;
    let (wx, wz) = m.omegas(&ctx.species);
    let mut min = Csv::new(&["source", "x_um", "z_um", "psi_ev"]);
    min.labeled_row(&["grid"], &[gx * 1e6, gz * 1e6, gv]);
    min.labeled_row(&["refined"], &[m.x * 1e6, m.z * 1e6, m.psi]);
    ctx.csv("minimum.csv", &min)?;
    Ok(json!({
        "grid_minimum_um": [gx * 1e6, gz * 1e6],
        "minimum_um": [m.x * 1e6, m.z * 1e6],
        "minimum_psi_ev": m.psi,
        "f_x_mhz": wx / (2.0 * PI * 1e6),
        "f_z_mhz": wz / (2.0 * PI * 1e6),
    }))
}

fn characterize(ctx: &mut Context) -> Result<Value, Failure> {
    let c = ctx.cfg.characterize.unwrap_or_default();
    let layout = ctx.layout()?;
    let w = c.window;
    let opts = CharacterizeOptions {
        window: SearchWindow { x_half_width: w.x_half_width_um * 1e-6, z_min: w.z_min_um * 1e-6, z_max: w.z_max_um * 1e-6, nx: w.nx, nz: w.nz },
        height_guess: c.height_guess_um * 1e-6,
        compute_depth: c.compute_depth,
        workers: ctx.workers,
    };
    let g = pseudopot::characterize_guide(
        &layout,
        &ctx.drive,
        &ctx.species,
        c.y_start_mm * 1e-3,
        c.y_end_mm * 1e-3,
        c.step_mm * 1e-3,
        layout.mirror_symmetric_x(),
        &opts,
    );
    let mut csv = Csv::new(&[
        "y_mm", "wells", "x_um", "z_um", "psi_mev", "f_x_mhz", "f_z_mhz", "q", "depth_mev", "separation_um", "barrier_mev",
    ]);
    for s in &g.stations {
        let m = s.primary();
        csv.row(&[
            s.y * 1e3,
            s.minima.len() as f64,
            m.x * 1e6,
            m.z * 1e6,
            m.psi * 1e3,
            s.omega_x / (2.0 * PI * 1e6),
            s.omega_z / (2.0 * PI * 1e6),
            s.q_param,
            s.depth.map_or(f64::NAN, |d| d * 1e3),
            s.well_separation * 1e6,
            s.barrier_height * 1e3,
        ]);
    }
    ctx.csv("stations.csv", &csv)?;
    ctx.json("guide.json", &g)?;
    Ok(json!({ "stations": g.stations.len(), "eta": g.eta, "u": g.u, "truncated": g.truncated }))
}

fn optimize_layout(ctx: &mut Context) -> Result<Value, Failure> {
    let o = ctx.cfg.optimize_layout.clone().unwrap_or_default();
    if o.controls.is_empty() {
        return Err(Failure::Config("optimize_layout.controls: at least one control point is required".into()));
    }
    let base = ctx.layout()?;
    let controls: Vec<ControlPoint> = o
        .controls
        .iter()
        .map(|c| ControlPoint { electrode: c.electrode, vertex: c.vertex, direction: c.direction, lower: c.lower_um * 1e-6, upper: c.upper_um * 1e-6 })
        .collect();
    let param = LayoutParametrization::new(base, controls).map_err(|e| Failure::Config(format!("optimize_layout: {e}")))?;
    let initial: Vec<f64> = o.controls.iter().map(|c| c.initial_um * 1e-6).collect();
    let spec = MeritSpec {
        stations: o.stations_mm.iter().map(|y| y * 1e-3).collect(),
        target_omega_z: 2.0 * PI * o.target_f_z_mhz * 1e6,
        weight_gradient: o.weight_gradient,
        weight_omega: o.weight_omega,
        reference_height: o.reference_height_um.map(|h| h * 1e-6),
        height_guess: o.height_guess_um * 1e-6,
    };
    let start = layoutopt::merit(&param.apply(&initial).map_err(|e| Failure::Config(e.to_string()))?, &ctx.drive, &ctx.species, &spec);
    let r = layoutopt::optimize_layout(&param, &initial, &ctx.drive, &ctx.species, &spec, &o.simplex, ctx.workers)
        .map_err(|e| rt("layoutopt")(e.to_string()))?;
    let mut hist = Csv::new(&["evaluation", "value", "best"]);
    for h in &r.history {
        hist.row(&[h.evaluation as f64, h.value, h.best]);
    }
    ctx.csv("history.csv", &hist)?;
    ctx.json("layout.json", &LayoutFile::from_layout("optimized", &r.best_layout))?;
    let best = layoutopt::merit(&r.best_layout, &ctx.drive, &ctx.species, &spec);
    let summary = json!({
        "initial_merit": start.value,
        "best_merit": r.best_merit,
        "best_params_um": r.best_params.iter().map(|p| p * 1e6).collect::<Vec<_>>(),
        "converged": r.converged,
        "evaluations": r.history.len(),
        "penalized": r.penalized.len(),
        "stations": best.stations,
    });
    ctx.json("result.json", &summary)?;
    Ok(summary)
}

struct TrackSetup {
    layout: ElectrodeLayout,
    domain: Domain,
    detector: DetectorPlane,
    options: TrackOptions,
    source: SourceSpec,
    cache_spacing: f64,
}

fn track_setup(ctx: &Context) -> Result<TrackSetup, Failure> {
    let t = ctx.cfg.track.unwrap_or_default();
    let layout = ctx.layout()?;
    let length = chip_length(&layout);
    let domain = Domain::for_chip(length, t.drift_mm * 1e-3);
    let detector = DetectorPlane { spot_gate: t.spot_gate_mm * 1e-3, bin_size: t.bin_um * 1e-6, ..DetectorPlane::at(domain.y_max) };
    let s = t.source;
    let source = SourceSpec {
        center: [s.center_um[0] * 1e-6, s.center_um[1] * 1e-6, s.center_um[2] * 1e-6],
        diameter: s.diameter_um * 1e-6,
        rays: s.rays,
        phases: s.phases,
        energy_ev: s.energy_ev,
        half_angle: s.half_angle_mrad * 1e-3,
        seed: ctx.cfg.seed,
    };
    source.validate().map_err(|e| Failure::Config(format!("track.source: {e}")))?;
    let v = speed_from_ev(s.energy_ev, ctx.species.mass);
    let mut options = TrackOptions::new(t.time_factor * domain.y_max / v);
    options.rtol = t.rtol;
    options.atol = t.atol_um * 1e-6;
    options.record_energy = t.record_energy;
    options.frozen_drive = t.frozen_drive;
    Ok(TrackSetup { layout, domain, detector, options, source, cache_spacing: t.cache_spacing_um * 1e-6 })
}

fn track(ctx: &mut Context) -> Result<Value, Failure> {
    let s = track_setup(ctx)?;
    let cache = (s.cache_spacing > 0.0).then(|| FieldCache::new(&s.layout, &s.domain, s.cache_spacing, s.layout.mirror_symmetric_x()));
    let model = match &cache {
        Some(c) => FieldModel::cached(c),
        None => FieldModel::direct(&s.layout),
    };
    let res = tracker::run_ensemble(&model, &ctx.drive, &ctx.species, &s.source, &s.domain, &s.detector, &s.options, ctx.workers)
        .map_err(|e| rt("tracker")(e.to_string()))?;
    let mut csv = Csv::new(&["outcome", "x0_um", "z0_um", "release_phase", "exit_x_mm", "exit_y_mm", "exit_z_mm", "energy_drift"]);
    for t in &res.trajectories {
        let [x0, _, z0] = t.initial.position;
        let [ex, ey, ez] = t.exit.position;
        csv.labeled_row(
            &[t.outcome.label()],
            &[x0 * 1e6, z0 * 1e6, t.release_phase, ex * 1e3, ey * 1e3, ez * 1e3, t.energy_drift.unwrap_or(f64::NAN)],
        );
    }
    ctx.csv("trajectories.csv", &csv)?;
    ctx.csv("detector.csv", &detector_csv(&res.image))?;
    let tot = &res.image.totals;
    let summary = json!({
        "totals": tot,
        "guided_fraction": tot.guided_fraction(),
        "loss_fraction": tot.loss_fraction(),
        "asymmetry": tot.asymmetry(),
        "spot_separation_mm": res.image.spot_separation().map(|d| d * 1e3),
        "spot_left": res.image.spot(-1.0),
        "spot_right": res.image.spot(1.0),
        "port_prediction": res.port_prediction(10e-6),
        "near_axis_loss_share": res.near_axis_loss_share(s.source.center[0]),
        "guided_fraction_by_phase": res.guided_fraction_by_phase(),
    });
    ctx.json("summary.json", &summary)?;
    Ok(summary)
}

fn detector_csv(image: &tracker::DetectorImage) -> Csv {
    let mut csv = Csv::new(&["x_mm", "z_mm", "count"]);
    for ix in 0..image.nx {
        for iz in 0..image.nz {
            let c = image.counts[ix * image.nz + iz];
            if c > 0 {
                csv.row(&[image.bin_center_x(ix) * 1e3, image.bin_center_z(iz) * 1e3, c as f64]);
            }
        }
    }
    csv
}

fn displaced_scan(ctx: &mut Context) -> Result<Value, Failure> {
    let s = track_setup(ctx)?;
    let offsets: Vec<f64> = ctx.cfg.displaced_scan.clone().unwrap_or_default().offsets_um.iter().map(|o| o * 1e-6).collect();
    let cache = (s.cache_spacing > 0.0).then(|| FieldCache::new(&s.layout, &s.domain, s.cache_spacing, s.layout.mirror_symmetric_x()));
    let model = match &cache {
        Some(c) => FieldModel::cached(c),
        None => FieldModel::direct(&s.layout),
    };
    let scan = tracker::displaced_source_scan(&model, &ctx.drive, &ctx.species, &s.source, &offsets, &s.domain, &s.detector, &s.options, ctx.workers)
        .map_err(|e| rt("tracker")(e.to_string()))?;
    let mut csv = Csv::new(&["offset_um", "guided_left", "guided_right", "lost_detected", "lost_in_flight", "asymmetry", "guided_fraction"]);
    for r in &scan.runs {
        let t = &r.image.totals;
        csv.row(&[
            r.offset * 1e6,
            t.guided_left as f64,
            t.guided_right as f64,
            t.lost_detected as f64,
            t.lost_in_flight as f64,
            r.asymmetry,
            t.guided_fraction(),
        ]);
    }
    ctx.csv("scan.csv", &csv)?;
    let summary = json!({ "monotone_trend": scan.monotone_trend, "runs": scan.runs.len() });
    ctx.json("summary.json", &summary)?;
    Ok(summary)
}

/// Undeformed potential selected by the `quantum` block.
enum BasePotential {
    Quartic(qmodes::QuarticSplitter),
    Sampled(TransversePotential1D),
}

impl LongitudinalPotential for BasePotential {
    fn length(&self) -> f64 {
        match self {
            Self::Quartic(p) => p.length(),
            Self::Sampled(p) => p.length(),
        }
    }
    fn grid(&self) -> XGrid {
        match self {
            Self::Quartic(p) => p.grid(),
            Self::Sampled(p) => p.grid(),
        }
    }
    fn alpha(&self) -> f64 {
        match self {
            Self::Quartic(p) => p.alpha(),
            Self::Sampled(p) => p.alpha(),
        }
    }
    fn sample(&self, y: f64, xs: &[f64]) -> Vec<f64> {
        match self {
            Self::Quartic(p) => p.sample(y, xs),
            Self::Sampled(p) => p.sample(y, xs),
        }
    }
}

fn quantum(ctx: &Context) -> QuantumConfig {
    ctx.cfg.quantum.clone().unwrap_or_default()
}

fn base_potential(ctx: &Context, q: &QuantumConfig) -> Result<BasePotential, Failure> {
    match &q.potential {
        PotentialConfig::Quartic { alpha_mrad, drive_ghz, family } => family
            .to_family()
            .member(alpha_mrad * 1e-3, 2.0 * PI * drive_ghz * 1e9, &ctx.species)
            .map(BasePotential::Quartic)
            .map_err(|e| Failure::Config(format!("quantum.potential: {e}"))),
        PotentialConfig::Sampled { path } => {
            let p = ctx.path(path);
            let f = std::fs::File::open(&p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            TransversePotential1D::read_csv(BufReader::new(f))
                .map(BasePotential::Sampled)
                .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn deformation(q: &QuantumConfig, length: f64) -> Result<DeformationMap, Failure> {
    match &q.deformation_knots {
        None => Ok(DeformationMap::identity(length)),
        Some(k) => DeformationMap::from_knots(length, k.iter().map(|u| u * length).collect())
            .map_err(|e| Failure::Config(format!("quantum.deformation_knots: {e}"))),
    }
}

fn parity_label(p: Parity) -> &'static str {
    match p {
        Parity::Even => "even",
        Parity::Odd => "odd",
    }
}

fn eigen(ctx: &mut Context) -> Result<Value, Failure> {
    let q = quantum(ctx);
    let e = ctx.cfg.eigen.unwrap_or_default();
    let base = base_potential(ctx, &q)?;
    let pot = Deformed { base: &base, map: deformation(&q, base.length())? };
    let grid = pot.grid();
    let xs = grid.xs();
    let s = qmodes::solve_station(&pot.sample(e.y_mm * 1e-3, &xs), &grid, &ctx.species, e.basis, e.modes)
        .map_err(|err| rt("qmodes")(err.to_string()))?;
    let mut spec = Csv::new(&["parity", "index", "energy_ev", "rms_width_um"]);
    for (i, (en, (p, w))) in s.energies.iter().zip(s.parity.iter().zip(&s.rms_widths)).enumerate() {
        spec.labeled_row(&[parity_label(*p)], &[i as f64, *en, w * 1e6]);
    }
    ctx.csv("spectrum.csv", &spec)?;
    let names: Vec<String> = std::iter::once("x_um".to_string()).chain((0..s.functions.len()).map(|i| format!("psi_{i}"))).collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let mut modes = Csv::new(&refs);
    for (j, x) in xs.iter().enumerate() {
        let row: Vec<f64> = std::iter::once(x * 1e6).chain(s.functions.iter().map(|f| f[j])).collect();
        modes.row(&row);
    }
    ctx.csv("modes.csv", &modes)?;
    let summary = json!({
        "energies_ev": s.energies,
        "box_too_small": s.box_too_small,
        "grid": { "half_extent_um": grid.half_extent * 1e6, "points": grid.points },
    });
    ctx.json("spectrum.json", &summary)?;
    Ok(summary)
}

fn trace_outputs(ctx: &mut Context, t: &PopulationTrace) -> Result<Value, Failure> {
    let n = t.parity.len();
    let mut names = vec!["y_mm".to_string(), "t_ns".to_string()];
    names.extend((0..n).map(|i| format!("p_{i}_{}", parity_label(t.parity[i]))));
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::new(&refs);
    for (k, p) in t.populations.iter().enumerate() {
        let row: Vec<f64> = [t.y[k] * 1e3, t.t[k] * 1e9].into_iter().chain(p.iter().cloned()).collect();
        csv.row(&row);
    }
    ctx.csv("populations.csv", &csv)?;
    let summary = json!({
        "final_ground": t.final_ground,
        "peak_excited": t.peak_excited,
        "final_populations": t.final_populations(),
        "min_tracked_norm": t.min_tracked_norm,
        "truncation_warning": t.truncation_warning,
        "max_step_unitarity_error": t.max_step_unitarity_error,
        "min_overlap": t.min_overlap,
        "box_too_small": t.box_too_small,
        "stations": t.y.len(),
    });
    ctx.json("trace.json", &summary)?;
    Ok(summary)
}

fn adiabatic(ctx: &mut Context) -> Result<Value, Failure> {
    let q = quantum(ctx);
    let base = base_potential(ctx, &q)?;
    let pot = Deformed { base: &base, map: deformation(&q, base.length())? };
    let t = qmodes::propagate_populations(&pot, &ctx.species, q.kinetic_ev, &q.propagation, None, ctx.workers)
        .map_err(|e| rt("qmodes")(e.to_string()))?;
    trace_outputs(ctx, &t)
}

fn optimize_deformation(ctx: &mut Context) -> Result<Value, Failure> {
    let q = quantum(ctx);
    let o = ctx.cfg.optimize_deformation.unwrap_or_default();
    let base = base_potential(ctx, &q)?;
    let r = qmodes::optimize_deformation(&base, &ctx.species, q.kinetic_ev, o.knots, &o.simplex, &q.propagation, ctx.workers)
        .map_err(|e| rt("qmodes")(e.to_string()))?;
    let mut hist = Csv::new(&["evaluation", "value", "best"]);
    for h in &r.history {
        hist.row(&[h.evaluation as f64, -h.value, -h.best]);
    }
    ctx.csv("history.csv", &hist)?;
    let trace = trace_outputs(ctx, &r.trace)?;
    let l = base.length();
    let summary = json!({
        "length_mm": l * 1e3,
        "knots": r.map.knots.iter().map(|k| k / l).collect::<Vec<_>>(),
        "identity_ground": r.identity_ground,
        "final_ground": r.trace.final_ground,
        "peak_excited": r.trace.peak_excited,
        "evaluations": r.history.len(),
        "note": r.note,
        "trace": trace,
    });
    ctx.json("map.json", &summary)?;
    Ok(summary)
}

fn adiabaticity_scan(ctx: &mut Context) -> Result<Value, Failure> {
    let q = quantum(ctx);
    let s = ctx.cfg.adiabaticity_scan.clone().unwrap_or_default();
    let alphas: Vec<f64> = s.alphas_mrad.iter().map(|a| a * 1e-3).collect();
    let drives: Vec<f64> = s.drives_ghz.iter().map(|d| 2.0 * PI * d * 1e9).collect();
    let g = qmodes::adiabaticity_scan(&s.family.to_family(), &ctx.species, q.kinetic_ev, &alphas, &drives, &q.propagation, ctx.workers);
    let mut csv = Csv::new(&["alpha_mrad", "drive_ghz", "final_ground", "peak_excited"]);
    for c in &g.cells {
        csv.row(&[c.alpha * 1e3, c.drive / (2.0 * PI * 1e9), c.final_ground.unwrap_or(f64::NAN), c.peak_excited.unwrap_or(f64::NAN)]);
    }
    ctx.csv("grid.csv", &csv)?;
    let errors: Vec<&String> = g.cells.iter().filter_map(|c| c.error.as_ref()).collect();
    let summary = json!({
        "non_increasing_in_alpha": g.non_increasing_in_alpha,
        "non_decreasing_in_drive": g.non_decreasing_in_drive,
        "failed_cells": errors,
    });
    ctx.json("grid.json", &summary)?;
    Ok(summary)
}

fn wave_options(w: &WaveConfig) -> WaveOptions {
    WaveOptions { box_factor: w.box_factor, min_points: w.min_points, points_per_width: w.points_per_width, basis: w.basis, split_step: w.split_step }
}

/// Runs `f` on the X-shaped splitter built from the quantum block, calibrating
/// the centre section first when no length is configured.
fn with_splitter<R>(
    ctx: &mut Context,
    f: impl FnOnce(&mut Context, &dyn LongitudinalPotential, &WaveOptions) -> Result<R, Failure>,
) -> Result<(R, f64, Option<wavesim::CenterCalibration>), Failure> {
    let q = quantum(ctx);
    let w = ctx.cfg.wave.unwrap_or_default();
    let opts = wave_options(&w);
    let base = base_potential(ctx, &q)?;
    let arm = Deformed { base: &base, map: deformation(&q, base.length())? };
    let (center, cal) = match w.center_mm {
        Some(c) if c >= 0.0 => (c * 1e-3, None),
        Some(c) => return Err(Failure::Config(format!("wave.center_mm: must not be negative (got {c})"))),
        None => {
            let cal = wavesim::calibrate_center(&arm, &ctx.species, q.kinetic_ev, w.calibration_points, &opts, ctx.workers)
                .map_err(|e| rt("wavesim")(e.to_string()))?;
            (cal.center, Some(cal))
        }
    };
    let x = XShaped { arm: &arm, center };
    let r = f(ctx, &x, &opts)?;
    Ok((r, center, cal))
}

fn calibration_json(cal: &Option<wavesim::CenterCalibration>) -> Value {
    match cal {
        None => Value::Null,
        Some(c) => json!({ "center_mm": c.center * 1e3, "balance": c.balance, "period_mm": c.period * 1e3 }),
    }
}

fn wavepacket(ctx: &mut Context) -> Result<Value, Failure> {
    let wp = ctx.cfg.wavepacket.unwrap_or_default();
    let kinetic = quantum(ctx).kinetic_ev;
    let input = [Complex64::new(wp.left[0], wp.left[1]), Complex64::new(wp.right[0], wp.right[1])];
    let ((run, grid), center, cal) = with_splitter(ctx, |ctx, x, opts| {
        let mut o = *opts;
        o.split_step.snapshot_stride = wp.snapshot_stride;
        let run = wavesim::run_splitter(x, input, &ctx.species, kinetic, &o).map_err(|e| rt("wavesim")(e.to_string()))?;
        let grid = run.propagation.state.grid;
        Ok((run, grid))
    })?;
    let mut csv = Csv::new(&["y_mm", "x_um", "density"]);
    let stride = wp.x_stride.max(1);
    for (y, rho) in &run.propagation.snapshots {
        for j in (0..grid.points).step_by(stride) {
            csv.row(&[y * 1e3, grid.x(j) * 1e6, rho[j] * 1e-6]);
        }
    }
    ctx.csv("density.csv", &csv)?;
    let summary = json!({
        "center_mm": center * 1e3,
        "calibration": calibration_json(&cal),
        "output": [[run.output[0].re, run.output[0].im], [run.output[1].re, run.output[1].im]],
        "intensities": [run.output[0].norm_sqr(), run.output[1].norm_sqr()],
        "leakage": run.leakage,
        "non_adiabatic_failure": run.non_adiabatic_failure,
        "total_norm_drift": run.propagation.total_norm_drift,
        "max_step_norm_drift": run.propagation.max_step_norm_drift,
        "max_edge_density": run.propagation.max_edge_density,
        "grid": { "half_extent_um": grid.half_extent * 1e6, "points": grid.points },
    });
    ctx.json("summary.json", &summary)?;
    Ok(summary)
}

fn splitter_matrix(ctx: &mut Context) -> Result<Value, Failure> {
    let kinetic = quantum(ctx).kinetic_ev;
    let (m, center, cal) = with_splitter(ctx, |ctx, x, opts| {
        wavesim::extract_matrix(x, &ctx.species, kinetic, opts, ctx.workers).map_err(|e| rt("wavesim")(e.to_string()))
    })?;
    let summary = json!({
        "matrix": m.to_json(),
        "det_abs": m.det_abs,
        "non_unitary_regime": m.non_unitary_regime,
        "center_mm": center * 1e3,
        "calibration": calibration_json(&cal),
    });
    ctx.json("matrix.json", &summary)?;
    Ok(summary)
}

fn intensity_locus(ctx: &mut Context) -> Result<Value, Failure> {
    let kinetic = quantum(ctx).kinetic_ev;
    let l = ctx.cfg.intensity_locus.unwrap_or_default();
    let angles: Vec<f64> = (0..l.angles).map(|i| PI * i as f64 / (l.angles - 1) as f64).collect();
    let (locus, center, cal) = with_splitter(ctx, |ctx, x, opts| {
        wavesim::intensity_locus(x, &ctx.species, kinetic, &angles, l.phase_rad, opts, ctx.workers)
            .map_err(|e| rt("wavesim")(e.to_string()))
    })?;
    let mut csv = Csv::new(&["angle", "intensity_l", "intensity_r", "matrix_l", "matrix_r", "rotation_l", "rotation_r"]);
    for p in &locus.points {
        csv.row(&[p.angle, p.intensity_l, p.intensity_r, p.matrix_l, p.matrix_r, p.rotation_l, p.rotation_r]);
    }
    ctx.csv("locus.csv", &csv)?;
    let summary = json!({
        "eccentricity": locus.eccentricity,
        "max_rotation_deviation": locus.max_rotation_deviation,
        "max_matrix_deviation": locus.max_matrix_deviation,
        "matrix": locus.matrix.to_json(),
        "center_mm": center * 1e3,
        "calibration": calibration_json(&cal),
    });
    ctx.json("locus.json", &summary)?;
    Ok(summary)
}

fn calibrate(ctx: &mut Context) -> Result<Value, Failure> {
    let q = quantum(ctx);
    let w = ctx.cfg.wave.unwrap_or_default();
    let base = base_potential(ctx, &q)?;
    let arm = Deformed { base: &base, map: deformation(&q, base.length())? };
    let cal = wavesim::calibrate_center(&arm, &ctx.species, q.kinetic_ev, w.calibration_points, &wave_options(&w), ctx.workers)
        .map_err(|e| rt("wavesim")(e.to_string()))?;
    let mut csv = Csv::new(&["center_mm", "p_left"]);
    for (c, v) in &cal.scan {
        csv.row(&[c * 1e3, *v]);
    }
    ctx.csv("calibration.csv", &csv)?;
    let summary = calibration_json(&Some(cal));
    ctx.json("calibration.json", &summary)?;
    Ok(summary)
}
