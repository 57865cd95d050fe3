//! Binary vulnerability signatures built from source patches.
//!
//! A (vulnerable, patched) build pair plus the two source versions go in;
//! [`siggen`] locates the patched code in the binaries and keeps the
//! surrounding control flow as signatures, [`matcher`] scores stripped
//! functions against them and [`evalharness`] turns scores into metrics and
//! readable side-by-side reports. [`synth`] generates deterministic pairs for
//! tests and examples.

pub mod align;
pub mod binmodel;
pub mod cli;
pub mod diffcore;
pub mod evalharness;
pub mod matcher;
pub mod sigdb;
pub mod siggen;
pub mod source_prep;
pub mod synth;
