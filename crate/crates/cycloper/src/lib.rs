pub mod cli;
pub mod conemap;
pub mod error;
pub mod odeint;
pub mod ndiff;
pub mod quad;
pub mod stokesgeo;
pub mod wkb;

pub use error::{Error, Result};
pub use ndiff::{NDifferential, PlanePath, SheetAssignment};
pub use num_complex::Complex64 as C64;
