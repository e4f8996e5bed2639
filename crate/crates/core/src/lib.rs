//! Policy-gradient optimization of static output feedback gains for
//! discrete-time linear systems with quadratic cost, with the landscape
//! constants, bound certificates, and a zeroth-order (model-free) variant.

pub mod error;
pub mod gradient;
pub mod landscape;
pub mod linalg;
pub mod lyapunov;
pub mod model;
pub mod modelfree;
pub mod optimize;
pub mod systems;

pub use error::{Result, SofError};
pub use model::{Gain, LtiSystem};
