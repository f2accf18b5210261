//! Physical constants and the handful of unit conversions used at the I/O boundary.
//!
//! Everything inside the crate is strict SI; these helpers exist so that
//! configuration files can speak in µm, eV and GHz.

use std::f64::consts::PI;

/// Elementary charge, C (exact).
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Electron rest mass, kg.
pub const ELECTRON_MASS: f64 = 9.109_383_701_5e-31;
/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;

pub const MICROMETER: f64 = 1e-6;
pub const MILLIMETER: f64 = 1e-3;

#[inline]
pub fn ev_to_joule(ev: f64) -> f64 {
    ev * ELEMENTARY_CHARGE
}

#[inline]
pub fn joule_to_ev(j: f64) -> f64 {
    j / ELEMENTARY_CHARGE
}

#[inline]
pub fn um_to_m(um: f64) -> f64 {
    um * MICROMETER
}

#[inline]
pub fn m_to_um(m: f64) -> f64 {
    m / MICROMETER
}

#[inline]
pub fn mm_to_m(mm: f64) -> f64 {
    mm * MILLIMETER
}

/// Cyclic frequency in GHz to angular frequency in rad/s.
#[inline]
pub fn ghz_to_angular(ghz: f64) -> f64 {
    2.0 * PI * ghz * 1e9
}

#[inline]
pub fn angular_to_ghz(omega: f64) -> f64 {
    omega / (2.0 * PI * 1e9)
}

/// Speed of a non-relativistic particle of mass `mass` with kinetic energy `ev`.
#[inline]
pub fn speed_from_ev(ev: f64, mass: f64) -> f64 {
    (2.0 * ev_to_joule(ev) / mass).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        for v in [1e-3, 0.75, 1.5, 16.0, 990.0] {
            assert!((joule_to_ev(ev_to_joule(v)) - v).abs() <= 1e-15 * v);
            assert!((m_to_um(um_to_m(v)) - v).abs() <= 1e-14 * v);
            assert!((angular_to_ghz(ghz_to_angular(v)) - v).abs() <= 1e-14 * v);
        }
    }

    #[test]
    fn electron_speed_at_one_and_a_half_ev() {
        let v = speed_from_ev(1.5, ELECTRON_MASS);
        assert!((v - 7.2636e5).abs() < 1e2, "{v}");
    }
}
