//! Simulation toolkit for electrons guided above planar surface-electrode chips
//! by a microwave pseudopotential: electrostatics of the electrode plane,
//! guide characterization, layout optimization, classical tracking, and
//! quantum transverse-mode and wave-packet models of the beam splitter.

pub mod chip;
pub mod electrostatics;
pub mod exec;
pub mod geometry;
pub mod interp;
pub mod io;
pub mod layoutopt;
pub mod pseudopot;
pub mod qmodes;
pub mod simplex;
pub mod tracker;
pub mod units;
pub mod wavesim;
