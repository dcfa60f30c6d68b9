use num_traits::Float;

/// Floating-point element type for the compute engine. Training runs use
/// `f32`; gradient checks and tests use `f64` for headroom.
pub trait Scalar:
    Float
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
    /// Dtype tag written into checkpoints.
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    const DTYPE: &'static str = "f64";
}
