//! Bundled benchmark systems and their reference gains.

use crate::linalg::Mat;
use crate::model::{Gain, LtiSystem};

pub const EXAMPLE_ONE_JSON: &str = include_str!("../examples/example1.json");
pub const EXAMPLE_TWO_JSON: &str = include_str!("../examples/example2.json");

/// Open-loop unstable two-state plant with a single summed output.
pub fn example_one() -> LtiSystem {
    LtiSystem::from_json_str(EXAMPLE_ONE_JSON).expect("bundled example1.json is valid")
}

/// Example one with the full state measured (`C = I2`).
pub fn example_one_full_state() -> LtiSystem {
    example_one()
        .with_c(Mat::identity(2, 2))
        .expect("identity output map has matching dimensions")
}

/// Four-state open-loop stable circuit model with two outputs.
pub fn example_two() -> LtiSystem {
    LtiSystem::from_json_str(EXAMPLE_TWO_JSON).expect("bundled example2.json is valid")
}

pub fn example_one_k0() -> Gain {
    Gain::scalar(9.0).unwrap()
}

/// Reported optimum, rounded to four decimals.
pub fn example_one_kstar() -> Gain {
    Gain::scalar(4.0637).unwrap()
}

/// Open stabilizing interval of scalar gains for example one.
pub const EXAMPLE_ONE_STABILIZING: (f64, f64) = (2.1, 22.05);

pub fn example_two_k0() -> Gain {
    Gain::from_row_slice(2, 2, &[0.0, -1.0, 0.0, -2.0]).unwrap()
}

/// Reported optimum, rounded to four decimals.
pub fn example_two_kstar() -> Gain {
    Gain::from_row_slice(2, 2, &[2.9738, -7.2907, 2.1067, -12.5384]).unwrap()
}
