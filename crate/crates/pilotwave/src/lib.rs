//! A simulation laboratory for de Broglie-Bohm pilot-wave dynamics.
//!
//! The library evaluates pilot waves exactly from analytic eigenbasis sums
//! (particle in a box, particle on a ring, harmonic oscillator), integrates
//! trajectories under de Broglie's first-order guidance law and Bohm's
//! second-order rewriting, and runs the statistical experiments that
//! distinguish quantum equilibrium from nonequilibrium:
//!
//! - quantum relaxation toward the Born rule, quantified by the
//!   coarse-grained H-function and its approximately exponential decay
//!   ([`ensemble`]);
//! - the pointer model of quantum "measurement", including the cases where
//!   the procedure fails to measure anything, and subquantum measurements
//!   with nonequilibrium pointers ([`measure`]);
//! - equilibrium no-signalling versus nonequilibrium signalling through
//!   entangled pairs ([`nonlocal`]);
//! - the instability of Bohm's phase-space dynamics ([`integrate`]);
//! - retarded relaxation of a field mode on expanding space ([`cosmo`]).
//!
//! Everything is deterministic: a 64-bit seed plus a configuration fixes
//! every output byte, independent of the number of worker threads.
//!
//! See the `book/` directory for a guided tour with runnable examples, and
//! [`scenario`] for the batch interface used by the `pilotwave` binary.

pub mod config;
pub mod cosmo;
pub mod ensemble;
pub mod grid;
pub mod integrate;
pub mod measure;
pub mod nonlocal;
pub mod output;
pub mod quadrature;
pub mod rng;
pub mod scenario;
pub mod spectral;
pub mod stats;

pub use num_complex::Complex64;

/// Book chapters double as documentation tests so the guide can never go
/// stale relative to the API.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }

    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(WavesAndTrajectories, "../../../book/src/waves-and-trajectories.md");
    chapter!(Relaxation, "../../../book/src/relaxation.md");
    chapter!(Measurement, "../../../book/src/measurement.md");
    chapter!(Nonlocality, "../../../book/src/nonlocality.md");
    chapter!(Cosmology, "../../../book/src/cosmology.md");
    chapter!(Determinism, "../../../book/src/determinism.md");
    chapter!(CliReference, "../../../book/src/cli.md");
}
