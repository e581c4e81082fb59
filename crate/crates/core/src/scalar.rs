//! Scalar abstraction shared by register scaling and the plant model.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};
use rust_decimal::Decimal;

/// A number register words can be scaled into.
///
/// Implemented for `f32`, `f64` and exact [`Decimal`]; the decimal
/// implementation carries the multiplier at full precision.
pub trait Scalar: Num + Copy + PartialOrd + Debug + FromPrimitive + ToPrimitive {
    fn from_decimal(value: Decimal) -> Self;
    fn to_decimal(self) -> Decimal;
}

impl Scalar for f64 {
    fn from_decimal(value: Decimal) -> Self {
        value.to_f64().unwrap_or(f64::NAN)
    }

    fn to_decimal(self) -> Decimal {
        Decimal::from_f64(self).unwrap_or_default()
    }
}

impl Scalar for f32 {
    fn from_decimal(value: Decimal) -> Self {
        value.to_f32().unwrap_or(f32::NAN)
    }

    fn to_decimal(self) -> Decimal {
        Decimal::from_f32(self).unwrap_or_default()
    }
}

impl Scalar for Decimal {
    fn from_decimal(value: Decimal) -> Self {
        value
    }

    fn to_decimal(self) -> Decimal {
        self
    }
}

/// Floating-point scalar for continuous simulation: `f32` or `f64`.
pub trait Real: Scalar + Float {
    fn lit(value: f64) -> Self {
        <Self as FromPrimitive>::from_f64(value).expect("finite literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}
