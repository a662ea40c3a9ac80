//! Variational Monte Carlo for bulk helium-4 with a symmetric-kernel
//! shadow wave function.
//!
//! The trial function couples every atom to every auxiliary ("shadow")
//! variable through a product of sums of Gaussians, which keeps the
//! amplitude symmetric under atom exchange. The crate provides:
//!
//! * the trial-function amplitudes and analytic local energy
//!   ([`wavefunction`]),
//! * smart Metropolis sampling with pseudoforce drift ([`sampler`]),
//! * estimators for the energy, pair distributions, the one-body density
//!   matrix by two routes, and the condensate fraction ([`estimators`]),
//! * equation-of-state fits and the double-tangent construction for the
//!   freezing and melting densities ([`analysis`]),
//! * run orchestration, manifests, and checkpointing behind the `sskmc`
//!   command-line tool ([`runner`]).
//!
//! The narrative guide lives in `book/`; its code snippets compile as
//! doc-tests of this crate.

pub mod analysis;
pub mod error;
pub mod estimators;
pub mod geometry;
pub mod physics;
pub mod runner;
pub mod sampler;
pub mod wavefunction;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(unused)]
            mod $name {}
        };
    }
    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(trial_function, "../../../book/src/trial-function.md");
    chapter!(sampling, "../../../book/src/sampling.md");
    chapter!(estimators, "../../../book/src/estimators.md");
    chapter!(equation_of_state, "../../../book/src/equation-of-state.md");
    chapter!(running, "../../../book/src/running.md");
}
