//! Run configuration in laboratory units (µm, mm, GHz, MHz, eV). Every block
//! rejects unknown keys; missing blocks take their defaults.

use std::f64::consts::PI;
use std::path::PathBuf;

use eguide::qmodes::{PropagationOptions, QuarticFamily};
use eguide::simplex::SimplexOptions;
use eguide::units::{ELECTRON_MASS, ELEMENTARY_CHARGE};
use eguide::wavesim::SplitStepOptions;
use serde::{Deserialize, Serialize};

pub const SUBCOMMANDS: [&str; 13] = [
    "field-map",
    "characterize",
    "optimize-layout",
    "track",
    "displaced-scan",
    "eigen",
    "adiabatic",
    "optimize-deformation",
    "adiabaticity-scan",
    "wavepacket",
    "splitter-matrix",
    "intensity-locus",
    "calibrate-center",
];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subcommand: Option<String>,
    /// Layout JSON path, or `builtin:reconstructed` / `builtin:quadrupole`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
    #[serde(default)]
    pub drive: DriveConfig,
    #[serde(default)]
    pub species: SpeciesConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_map: Option<FieldMapConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub characterize: Option<CharacterizeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimize_layout: Option<OptimizeLayoutConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track: Option<TrackConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub displaced_scan: Option<DisplacedScanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantum: Option<QuantumConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigen: Option<EigenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimize_deformation: Option<OptimizeDeformationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adiabaticity_scan: Option<AdiabaticityScanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wave: Option<WaveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavepacket: Option<WavepacketConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity_locus: Option<LocusConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrate_center: Option<CalibrateConfig>,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveConfig {
    pub frequency_ghz: f64,
    pub amplitude_v: f64,
    pub phase_rad: f64,
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self { frequency_ghz: 0.99, amplitude_v: 16.0, phase_rad: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeciesConfig {
    pub charge_c: f64,
    pub mass_kg: f64,
}

impl Default for SpeciesConfig {
    fn default() -> Self {
        Self { charge_c: -ELEMENTARY_CHARGE, mass_kg: ELECTRON_MASS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldMapConfig {
    pub y_mm: f64,
    pub x_half_width_um: f64,
    pub z_min_um: f64,
    pub z_max_um: f64,
    pub nx: usize,
    pub nz: usize,
}

impl Default for FieldMapConfig {
    fn default() -> Self {
        Self { y_mm: 2.0, x_half_width_um: 600.0, z_min_um: 150.0, z_max_um: 900.0, nx: 61, nz: 61 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub x_half_width_um: f64,
    pub z_min_um: f64,
    pub z_max_um: f64,
    pub nx: usize,
    pub nz: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { x_half_width_um: 2500.0, z_min_um: 60.0, z_max_um: 1200.0, nx: 41, nz: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CharacterizeConfig {
    pub y_start_mm: f64,
    pub y_end_mm: f64,
    pub step_mm: f64,
    pub height_guess_um: f64,
    pub compute_depth: bool,
    pub window: WindowConfig,
}

impl Default for CharacterizeConfig {
    fn default() -> Self {
        Self { y_start_mm: 0.0, y_end_mm: 40.0, step_mm: 1.0, height_guess_um: 480.0, compute_depth: true, window: WindowConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub electrode: usize,
    pub vertex: usize,
    pub direction: [f64; 2],
    pub lower_um: f64,
    pub upper_um: f64,
    #[serde(default)]
    pub initial_um: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeLayoutConfig {
    pub controls: Vec<ControlConfig>,
    pub stations_mm: Vec<f64>,
    pub target_f_z_mhz: f64,
    pub weight_gradient: f64,
    pub weight_omega: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_height_um: Option<f64>,
    pub height_guess_um: f64,
    pub simplex: SimplexOptions,
}

impl Default for OptimizeLayoutConfig {
    fn default() -> Self {
        Self {
            controls: Vec::new(),
            stations_mm: vec![2.0, 4.0, 6.0, 8.0],
            target_f_z_mhz: 50.0,
            weight_gradient: 1.0,
            weight_omega: 1.0,
            reference_height_um: None,
            height_guess_um: 480.0,
            simplex: SimplexOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub center_um: [f64; 3],
    pub diameter_um: f64,
    pub rays: usize,
    pub phases: usize,
    pub energy_ev: f64,
    pub half_angle_mrad: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self { center_um: [0.0, 0.0, 478.0], diameter_um: 100.0, rays: 100, phases: 10, energy_ev: 1.5, half_angle_mrad: 7.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    pub source: SourceConfig,
    /// Field-free drift from the chip edge to the detector.
    pub drift_mm: f64,
    /// Spacing of the cached field grid; 0 evaluates the field directly.
    pub cache_spacing_um: f64,
    pub rtol: f64,
    pub atol_um: f64,
    /// Time limit in units of the straight transit time of the domain.
    pub time_factor: f64,
    pub record_energy: bool,
    pub frozen_drive: bool,
    pub spot_gate_mm: f64,
    pub bin_um: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            source: SourceConfig::default(),
            drift_mm: 10.0,
            cache_spacing_um: 50.0,
            rtol: 1e-9,
            atol_um: 1e-6,
            time_factor: 3.0,
            record_energy: false,
            frozen_drive: false,
            spot_gate_mm: 1.5,
            bin_um: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisplacedScanConfig {
    pub offsets_um: Vec<f64>,
}

impl Default for DisplacedScanConfig {
    fn default() -> Self {
        Self { offsets_um: vec![-125.0, 0.0, 125.0] }
    }
}

/// Surrogate family parameters in laboratory units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyConfig {
    pub length_mm: f64,
    pub reference_drive_ghz: f64,
    pub reference_omega_mhz: f64,
    pub reference_softening_um: f64,
    pub margin_lengths: f64,
    pub grid_points: usize,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        let f = QuarticFamily::default();
        Self {
            length_mm: f.length * 1e3,
            reference_drive_ghz: f.reference_drive / (2.0 * PI * 1e9),
            reference_omega_mhz: f.reference_omega / (2.0 * PI * 1e6),
            reference_softening_um: f.reference_softening * 1e6,
            margin_lengths: f.margin_lengths,
            grid_points: f.grid_points,
        }
    }
}

impl FamilyConfig {
    pub fn to_family(&self) -> QuarticFamily {
        QuarticFamily {
            length: self.length_mm * 1e-3,
            reference_drive: 2.0 * PI * self.reference_drive_ghz * 1e9,
            reference_omega: 2.0 * PI * self.reference_omega_mhz * 1e6,
            reference_softening: self.reference_softening_um * 1e-6,
            margin_lengths: self.margin_lengths,
            grid_points: self.grid_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum PotentialConfig {
    Quartic {
        alpha_mrad: f64,
        drive_ghz: f64,
        #[serde(default)]
        family: FamilyConfig,
    },
    /// Station CSV as written by `TransversePotential1D::write_csv`.
    Sampled { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantumConfig {
    pub potential: PotentialConfig,
    /// Interior knots of the longitudinal stretching as fractions of the length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deformation_knots: Option<Vec<f64>>,
    pub kinetic_ev: f64,
    pub propagation: PropagationOptions,
}

impl Default for QuantumConfig {
    fn default() -> Self {
        Self {
            potential: PotentialConfig::Quartic { alpha_mrad: 0.1, drive_ghz: 8.0, family: FamilyConfig::default() },
            deformation_knots: None,
            kinetic_ev: 1.0,
            propagation: PropagationOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigenConfig {
    pub y_mm: f64,
    pub modes: usize,
    pub basis: usize,
}

impl Default for EigenConfig {
    fn default() -> Self {
        Self { y_mm: 0.0, modes: 10, basis: eguide::qmodes::DEFAULT_BASIS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeDeformationConfig {
    pub knots: usize,
    pub simplex: SimplexOptions,
}

impl Default for OptimizeDeformationConfig {
    fn default() -> Self {
        Self { knots: 8, simplex: SimplexOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdiabaticityScanConfig {
    pub alphas_mrad: Vec<f64>,
    pub drives_ghz: Vec<f64>,
    pub family: FamilyConfig,
}

impl Default for AdiabaticityScanConfig {
    fn default() -> Self {
        Self { alphas_mrad: vec![0.05, 0.08, 0.1, 0.13], drives_ghz: vec![7.0, 8.0, 10.0], family: FamilyConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveConfig {
    /// Length of the single-well centre section; `None` calibrates it for a balanced output.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_mm: Option<f64>,
    pub calibration_points: usize,
    pub box_factor: f64,
    pub min_points: usize,
    pub points_per_width: f64,
    pub basis: usize,
    pub split_step: SplitStepOptions,
}

impl Default for WaveConfig {
    fn default() -> Self {
        let w = eguide::wavesim::WaveOptions::default();
        Self {
            center_mm: None,
            calibration_points: 6,
            box_factor: w.box_factor,
            min_points: w.min_points,
            points_per_width: w.points_per_width,
            basis: w.basis,
            split_step: w.split_step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WavepacketConfig {
    /// Input amplitudes `[re, im]` on the left and right ports.
    pub left: [f64; 2],
    pub right: [f64; 2],
    pub snapshot_stride: usize,
    /// Keep every this many grid points in the density output.
    pub x_stride: usize,
}

impl Default for WavepacketConfig {
    fn default() -> Self {
        Self { left: [1.0, 0.0], right: [0.0, 0.0], snapshot_stride: 1024, x_stride: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocusConfig {
    /// Mixing angles equally spaced over `[0, π]`.
    pub angles: usize,
    pub phase_rad: f64,
}

impl Default for LocusConfig {
    fn default() -> Self {
        Self { angles: 9, phase_rad: PI / 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {}

/// A configuration problem, reported with exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError(format!("{name}: must be positive (got {v})")))
    }
}

impl RunConfig {
    /// Parses JSON text; errors carry the line and column of the offending field.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))
    }

    /// Fills in the block used by `subcommand` so the metadata records every value.
    pub fn resolved(&self, subcommand: &str) -> Self {
        let mut c = self.clone();
        c.subcommand = Some(subcommand.to_string());
        match subcommand {
            "field-map" => {
                c.field_map.get_or_insert_with(Default::default);
            }
            "characterize" => {
                c.characterize.get_or_insert_with(Default::default);
            }
            "optimize-layout" => {
                c.optimize_layout.get_or_insert_with(Default::default);
            }
            "track" => {
                c.track.get_or_insert_with(Default::default);
            }
            "displaced-scan" => {
                c.track.get_or_insert_with(Default::default);
                c.displaced_scan.get_or_insert_with(Default::default);
            }
            "eigen" => {
                c.quantum.get_or_insert_with(Default::default);
                c.eigen.get_or_insert_with(Default::default);
            }
            "adiabatic" => {
                c.quantum.get_or_insert_with(Default::default);
            }
            "optimize-deformation" => {
                c.quantum.get_or_insert_with(Default::default);
                c.optimize_deformation.get_or_insert_with(Default::default);
            }
            "adiabaticity-scan" => {
                c.quantum.get_or_insert_with(Default::default);
                c.adiabaticity_scan.get_or_insert_with(Default::default);
            }
            "wavepacket" => {
                c.quantum.get_or_insert_with(Default::default);
                c.wave.get_or_insert_with(Default::default);
                c.wavepacket.get_or_insert_with(Default::default);
            }
            "splitter-matrix" => {
                c.quantum.get_or_insert_with(Default::default);
                c.wave.get_or_insert_with(Default::default);
            }
            "intensity-locus" => {
                c.quantum.get_or_insert_with(Default::default);
                c.wave.get_or_insert_with(Default::default);
                c.intensity_locus.get_or_insert_with(Default::default);
            }
            "calibrate-center" => {
                c.quantum.get_or_insert_with(Default::default);
                c.wave.get_or_insert_with(Default::default);
                c.calibrate_center.get_or_insert_with(Default::default);
            }
            _ => {}
        }
        c
    }

    /// Physical sanity checks on a resolved configuration.
    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("drive.frequency_ghz", self.drive.frequency_ghz)?;
        positive("drive.amplitude_v", self.drive.amplitude_v)?;
        positive("species.mass_kg", self.species.mass_kg)?;
        if self.species.charge_c == 0.0 || !self.species.charge_c.is_finite() {
            return Err(ConfigError("species.charge_c: must be nonzero".into()));
        }
        if let Some(f) = &self.field_map {
            positive("field_map.x_half_width_um", f.x_half_width_um)?;
            positive("field_map.z_min_um", f.z_min_um)?;
            if !(f.z_max_um > f.z_min_um) || f.nx < 2 || f.nz < 2 {
                return Err(ConfigError("field_map: need z_max_um > z_min_um and at least 2 points per axis".into()));
            }
        }
        if let Some(c) = &self.characterize {
            positive("characterize.step_mm", c.step_mm)?;
            positive("characterize.height_guess_um", c.height_guess_um)?;
            if c.y_end_mm < c.y_start_mm {
                return Err(ConfigError("characterize: y_end_mm must not precede y_start_mm".into()));
            }
        }
        if let Some(o) = &self.optimize_layout {
            positive("optimize_layout.target_f_z_mhz", o.target_f_z_mhz)?;
            positive("optimize_layout.height_guess_um", o.height_guess_um)?;
            if o.stations_mm.is_empty() {
                return Err(ConfigError("optimize_layout.stations_mm: at least one station".into()));
            }
        }
        if let Some(t) = &self.track {
            positive("track.source.energy_ev", t.source.energy_ev)?;
            positive("track.drift_mm", t.drift_mm)?;
            positive("track.rtol", t.rtol)?;
            positive("track.atol_um", t.atol_um)?;
            positive("track.time_factor", t.time_factor)?;
            positive("track.bin_um", t.bin_um)?;
            if t.cache_spacing_um < 0.0 {
                return Err(ConfigError("track.cache_spacing_um: must not be negative".into()));
            }
        }
        if let Some(q) = &self.quantum {
            positive("quantum.kinetic_ev", q.kinetic_ev)?;
            if let PotentialConfig::Quartic { alpha_mrad, drive_ghz, family } = &q.potential {
                positive("quantum.potential.quartic.drive_ghz", *drive_ghz)?;
                positive("quantum.potential.quartic.family.length_mm", family.length_mm)?;
                if *alpha_mrad < 0.0 {
                    return Err(ConfigError("quantum.potential.quartic.alpha_mrad: must not be negative".into()));
                }
            }
            if let Some(k) = &q.deformation_knots {
                if k.windows(2).any(|w| w[1] <= w[0]) || k.iter().any(|u| !(*u > 0.0 && *u < 1.0)) {
                    return Err(ConfigError("quantum.deformation_knots: strictly increasing values inside (0, 1)".into()));
                }
            }
        }
        if let Some(s) = &self.adiabaticity_scan {
            if s.alphas_mrad.is_empty() || s.drives_ghz.is_empty() {
                return Err(ConfigError("adiabaticity_scan: need at least one alpha and one drive".into()));
            }
            for d in &s.drives_ghz {
                positive("adiabaticity_scan.drives_ghz", *d)?;
            }
        }
        if let Some(l) = &self.intensity_locus {
            if l.angles < 2 {
                return Err(ConfigError("intensity_locus.angles: at least 2".into()));
            }
        }
        Ok(())
    }
}
