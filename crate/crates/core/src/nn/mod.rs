// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode differentiation, parameter storage and the timing model.

pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
