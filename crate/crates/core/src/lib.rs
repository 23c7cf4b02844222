pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod quadrature;
pub mod shps;
pub mod sphere_sh;
pub mod volume;

pub use error::{Error, Result};
