//! Transcendentals built only from IEEE-754 add/mul/div so that every value
//! feeding the entropy coder is bit-identical on every platform.
//!
//! Platform `libm` implementations of `exp`/`tanh` are allowed to differ in
//! the last ulp; anything that can influence a probability table goes through
//! this module instead.

const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-01;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
const INV_LN2: f64 = 1.442_695_040_888_963_387_00e+00;

/// `e^x`, accurate to a few ulp. Saturates to `0` below -745 and to `f64::MAX` above 709.
pub fn exp(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    if x > 709.0 {
        return f64::MAX;
    }
    if x < -745.0 {
        return 0.0;
    }
    // x = k ln2 + r, |r| <= ln2 / 2
    let kf = round_half_even(x * INV_LN2);
    let k = kf as i64;
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    // Taylor series to degree 13 is below 1 ulp on |r| < 0.35.
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..=13 {
        term = term * r / i as f64;
        sum += term;
    }
    scale_pow2(sum, k)
}

fn round_half_even(v: f64) -> f64 {
    let f = v.floor();
    let d = v - f;
    if d > 0.5 || (d == 0.5 && (f as i64) % 2 != 0) {
        f + 1.0
    } else {
        f
    }
}

fn scale_pow2(mut v: f64, mut k: i64) -> f64 {
    // Split large exponents so the intermediate factors stay normal.
    while k > 1000 {
        v *= f64::from_bits((2046u64) << 52);
        k -= 1023;
    }
    while k < -1000 {
        v *= f64::from_bits(1u64 << 52); // 2^-1022
        k += 1022;
    }
    v * f64::from_bits(((k + 1023) as u64) << 52)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let t = if a > 20.0 {
        1.0
    } else {
        let e = exp(-2.0 * a);
        (1.0 - e) / (1.0 + e)
    };
    if x < 0.0 {
        -t
    } else {
        t
    }
}

const ERF_P: f64 = 0.327_591_1;
const ERF_A: [f64; 5] = [0.254_829_592, -0.284_496_736, 1.421_413_741, -1.453_152_027, 1.061_405_429];

/// Beyond this magnitude the approximation rounds to exactly +-1.
const ERF_SATURATION: f64 = 6.0;

fn erf_poly(t: f64) -> f64 {
    ((((ERF_A[4] * t + ERF_A[3]) * t + ERF_A[2]) * t + ERF_A[1]) * t + ERF_A[0]) * t
}

fn erf_poly_deriv(t: f64) -> f64 {
    (((5.0 * ERF_A[4] * t + 4.0 * ERF_A[3]) * t + 3.0 * ERF_A[2]) * t + 2.0 * ERF_A[1]) * t + ERF_A[0]
}

/// `1 - erf(a)` for `a >= 0`, evaluated without cancellation.
pub fn erfc_pos(a: f64) -> f64 {
    let t = 1.0 / (1.0 + ERF_P * a);
    erf_poly(t) * exp(-a * a)
}

/// Exact derivative of [`erfc_pos`].
pub fn erfc_pos_deriv(a: f64) -> f64 {
    let t = 1.0 / (1.0 + ERF_P * a);
    let dt = -ERF_P * t * t;
    exp(-a * a) * (erf_poly_deriv(t) * dt - 2.0 * a * erf_poly(t))
}

/// Rational error-function approximation (max abs error < 1.5e-7).
/// Odd by construction: `erf(-x) == -erf(x)` exactly.
pub fn erf(x: f64) -> f64 {
    let a = x.abs();
    let y = if a >= ERF_SATURATION { 1.0 } else { 1.0 - erfc_pos(a) };
    if x.is_sign_negative() {
        -y
    } else {
        y
    }
}

/// Exact derivative of [`erf`] (not of the true error function).
pub fn erf_deriv(x: f64) -> f64 {
    let a = x.abs();
    if a >= ERF_SATURATION {
        return 0.0;
    }
    let t = 1.0 / (1.0 + ERF_P * a);
    let dt = -ERF_P * t * t;
    let e = exp(-a * a);
    e * (2.0 * a * erf_poly(t) - erf_poly_deriv(t) * dt)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    exp(-0.5 * x * x) * 0.398_942_280_401_432_7
}
