use nalgebra::RealField;

/// Floating point scalar used by the renderer, losses and the transformer.
///
/// Training runs on `f32`; the `f64` instantiation exists for gradient checks.
pub trait Real: RealField + Copy + Default + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}
