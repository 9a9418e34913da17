//! Elliptic lower-dimensional invariant tori of symplectic twist maps and
//! symplectic difference schemes: map evaluation, the KAM iteration at fixed
//! parameter, small-divisor screening and measure estimates, and dynamical
//! verification of the resulting tori.

pub mod error;
pub mod fourier;
pub mod genfun;
pub mod homological;
pub mod jet;
pub mod kamflow;
pub mod model;
pub mod resonance;
pub mod sympmap;
pub mod verify;

pub use error::{Error, Result};
pub use fourier::{FourierField, Mode, WeightedNorms};
pub use model::{standard_test_model, EllipticNormalData, FrequencyMap, GeneratingHamiltonian, SchemeModel, TestModel};
