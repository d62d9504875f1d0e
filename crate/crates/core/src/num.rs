//! Scalar abstraction and the signed logarithmic compression used for
//! network targets.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numeric core is generic over.
///
/// Implemented for `f32` and `f64`. The training path instantiates `f32`;
/// oracles and gradient checks instantiate `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + core::ops::AddAssign
    + core::ops::SubAssign
    + core::ops::MulAssign
    + core::iter::Sum
    + core::fmt::Debug
    + core::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Conversion from an `f64` constant. Total for `f32`/`f64`.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Real")
    }

    /// Widening conversion to `f64`. Total for `f32`/`f64`.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Signed logarithmic compression: `sign(x) * ln(1 + |x|)`.
///
/// Bijective on the reals, identity-like near zero, and compresses large
/// magnitudes so network heads can regress quantities spanning several
/// orders of magnitude.
pub fn symlog<F: Real>(x: F) -> F {
    // signum(0.0) is 1.0 but the ln factor vanishes, so symlog(+-0) == +-0.
    x.signum() * (F::one() + x.abs()).ln()
}

/// Inverse of [`symlog`]: `sign(y) * (exp(|y|) - 1)`.
pub fn symexp<F: Real>(y: F) -> F {
    y.signum() * (y.abs().exp() - F::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symlog_fixed_points() {
        assert_eq!(symlog(0.0f64), 0.0);
        assert!((symlog(1.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((symlog(-1.0f64) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn symlog_is_odd_and_monotone() {
        let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.37).collect();
        for w in xs.windows(2) {
            assert!(
                symlog(w[0]) < symlog(w[1]),
                "symlog must be strictly increasing: {} vs {}",
                w[0],
                w[1]
            );
        }
        for &x in &xs {
            assert!(
                (symlog(-x) + symlog(x)).abs() < 1e-12,
                "symlog must be odd at x={x}"
            );
        }
    }

    #[test]
    fn symexp_inverts_symlog_over_wide_range() {
        // Relative round-trip error stays under 1e-6 across +-1e4.
        let mut x = -1e4f64;
        while x <= 1e4 {
            let rt = symexp(symlog(x));
            let denom = x.abs().max(1.0);
            assert!(
                ((rt - x) / denom).abs() < 1e-6,
                "round trip failed at x={x}: got {rt}"
            );
            x += 73.3;
        }
        // Same property at f32, looser because of the narrower mantissa.
        let mut x = -1e4f32;
        while x <= 1e4 {
            let rt = symexp(symlog(x));
            let denom = x.abs().max(1.0);
            assert!(
                ((rt - x) / denom).abs() < 1e-3,
                "f32 round trip failed at x={x}: got {rt}"
            );
            x += 211.7;
        }
    }
}
