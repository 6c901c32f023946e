use std::fmt::Debug;

/// Element type stored in tensors and parameters.
///
/// Kernels read elements through [`Real::to_f64`] and accumulate in 64-bit,
/// so `f32` training and `f64` gradient checks share one code path.
pub trait Real: Copy + Default + Debug + PartialOrd + Send + Sync + 'static {
    const ZERO: Self;
    const BITS: u32;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const BITS: u32 = 32;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const BITS: u32 = 64;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}
