/// Floating-point element type for every numeric structure in the crate.
///
/// `f32` is the training default; `f64` exists so that gradient checks and
/// geometry oracles can run the identical code path in double precision,
/// where central differences are actually meaningful.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Copy
    + Send
    + Sync
    + 'static
{
    /// Narrowing (or identity) conversion from `f64`.
    fn from_f64(v: f64) -> Self;

    /// Widening (or identity) conversion to `f64`.
    fn to_f64(self) -> f64;

    /// Conversion to `f32`, the on-disk precision of checkpoints.
    fn to_f32(self) -> f32;

    /// Conversion from `f32`, the on-disk precision of checkpoints.
    fn from_f32(v: f32) -> Self;

    /// Conversion from a count; exact for every count that fits in the
    /// mantissa, which covers all tensor sizes used here.
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
}
