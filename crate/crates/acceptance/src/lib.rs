//! Acceptance criteria of the flowgate workspace as library functions, so
//! the `acceptance` test target can run each one and report pass or fail.

pub mod gates;
pub mod rig;
pub mod scaling;
pub mod sorting;
pub mod wire;

/// A passing criterion's measurements, or why it failed.
pub type Outcome = Result<String, String>;

/// Fails the enclosing criterion with a formatted reason.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+).into());
        }
    };
}
