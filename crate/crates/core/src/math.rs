//! Scalar functions. Backed by `libm` so the crate builds without `std`;
//! the `std` feature switches to the platform implementations, which are
//! faster but not bit-identical across targets.

macro_rules! unary {
    ($name:ident, $libm:ident, $std:ident) => {
        #[inline]
        pub fn $name(x: f64) -> f64 {
            #[cfg(feature = "std")]
            {
                x.$std()
            }
            #[cfg(not(feature = "std"))]
            {
                libm::$libm(x)
            }
        }
    };
}

unary!(exp, exp, exp);
unary!(expm1, expm1, exp_m1);
unary!(ln, log, ln);
unary!(ln1p, log1p, ln_1p);
unary!(sqrt, sqrt, sqrt);
unary!(tanh, tanh, tanh);
unary!(sin, sin, sin);
unary!(cos, cos, cos);

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    #[cfg(feature = "std")]
    {
        x.powi(n)
    }
    #[cfg(not(feature = "std"))]
    {
        libm::pow(x, n as f64)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Above this input softplus returns its argument unchanged.
pub const SOFTPLUS_LINEAR_THRESHOLD: f64 = 30.0;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_LINEAR_THRESHOLD {
        x
    } else {
        ln1p(exp(x))
    }
}

/// Inverse of [`softplus`] for positive `y`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > SOFTPLUS_LINEAR_THRESHOLD {
        y
    } else {
        // ln(e^y - 1)
        y + ln(-expm1(-y))
    }
}
