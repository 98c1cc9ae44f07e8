//! Double-double scalar (about 106 significand bits) implementing
//! [`Real`], so any model code can be evaluated far below `f64` rounding.
//!
//! Finite differences at step `1e-5` on an `O(1)` loss carry roughly
//! `1e-11` of rounding noise in `f64`, which swamps attention-weight
//! gradients of order `1e-9`. Running the probes in [`Extended`] removes
//! that floor while leaving the step and the error formula untouched.

use core::cmp::Ordering;
use core::fmt;
use core::iter::Sum;
use core::num::FpCategory;
use core::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Float, FloatConst, Num, NumCast, One, ToPrimitive, Zero};
use twofloat::TwoFloat;

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, Default)]
pub struct Extended(pub TwoFloat);

impl Extended {
    pub fn from_f64(v: f64) -> Self {
        Self(tf(v))
    }
}

fn tf(v: f64) -> TwoFloat {
    <TwoFloat as From<f64>>::from(v)
}

const SQUARINGS: i32 = 10;
const TAYLOR_TERMS: u32 = 12;

/// `exp(r) - 1` for `|r| <= ln 2 / 2`: Taylor series on `r / 2^s`,
/// then `s` doublings `m ← 2m + m²`, which keep the relative error flat.
fn expm1_reduced(r: TwoFloat) -> TwoFloat {
    let scaled = r * libm::ldexp(1.0, -SQUARINGS);
    let mut term = scaled;
    let mut m = scaled;
    for n in 2..=TAYLOR_TERMS {
        term = div(term * scaled, tf(n as f64));
        m += term;
    }
    for _ in 0..SQUARINGS {
        m = m * 2.0 + m * m;
    }
    m
}

/// `(k, r)` with `x = k ln 2 + r`, `|r| <= ln 2 / 2`.
fn reduce(x: TwoFloat) -> (i32, TwoFloat) {
    let ln2 = <TwoFloat as FloatConst>::LN_2();
    let k = libm::round(x.hi() / core::f64::consts::LN_2);
    (k as i32, x - ln2 * k)
}

fn scale2(v: TwoFloat, k: i32) -> TwoFloat {
    // Two steps keep each factor representable.
    let (a, b) = (k / 2, k - k / 2);
    v * libm::ldexp(1.0, a) * libm::ldexp(1.0, b)
}

fn exp(x: TwoFloat) -> TwoFloat {
    if x.hi().is_nan() {
        return x;
    }
    if x.hi() > 709.0 {
        return tf(f64::INFINITY);
    }
    if x.hi() < -745.0 {
        return tf(0.0);
    }
    let (k, r) = reduce(x);
    scale2(expm1_reduced(r) + 1.0, k)
}

fn exp_m1(x: TwoFloat) -> TwoFloat {
    if x.hi().abs() <= 0.5 * core::f64::consts::LN_2 {
        expm1_reduced(x)
    } else {
        exp(x) - 1.0
    }
}

/// Two Newton steps on `exp(y) = x` from the `f64` logarithm.
fn ln(x: TwoFloat) -> TwoFloat {
    if !(x.hi() > 0.0) || x.hi().is_infinite() {
        return tf(libm::log(x.hi()));
    }
    let mut y = tf(libm::log(x.hi()));
    for _ in 0..2 {
        y += x * exp(-y) - 1.0;
    }
    y
}

fn tanh(x: TwoFloat) -> TwoFloat {
    if x.hi().abs() > 40.0 {
        return tf(x.hi().signum());
    }
    let e = exp_m1(x * 2.0);
    div(e, e + 2.0)
}

impl PartialEq for Extended {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl PartialOrd for Extended {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.0.partial_cmp(&other.0)
    }
}

impl fmt::Display for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $atr:ident, $am:ident) => {
        impl $tr for Extended {
            type Output = Self;
            #[inline]
            fn $m(self, rhs: Self) -> Self {
                Self($tr::$m(self.0, rhs.0))
            }
        }
        impl $atr for Extended {
            #[inline]
            fn $am(&mut self, rhs: Self) {
                $atr::$am(&mut self.0, rhs.0)
            }
        }
    };
}

binop!(Add, add, AddAssign, add_assign);
binop!(Sub, sub, SubAssign, sub_assign);
binop!(Mul, mul, MulAssign, mul_assign);

/// Long division to double-double accuracy; the upstream quotient is only
/// `f64`-accurate.
fn div(a: TwoFloat, b: TwoFloat) -> TwoFloat {
    let q1 = a.hi() / b.hi();
    if !q1.is_finite() || q1 == 0.0 {
        return tf(q1);
    }
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    TwoFloat::new_add(q1, q2) + q3
}

impl Div for Extended {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        Self(div(self.0, rhs.0))
    }
}

impl DivAssign for Extended {
    #[inline]
    fn div_assign(&mut self, rhs: Self) {
        self.0 = div(self.0, rhs.0);
    }
}

impl Rem for Extended {
    type Output = Self;
    fn rem(self, rhs: Self) -> Self {
        Self(self.0 % rhs.0)
    }
}

impl Neg for Extended {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self(-self.0)
    }
}

impl Sum for Extended {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl Zero for Extended {
    fn zero() -> Self {
        Self(TwoFloat::zero())
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl One for Extended {
    fn one() -> Self {
        Self(TwoFloat::one())
    }
}

impl Num for Extended {
    type FromStrRadixErr = <TwoFloat as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        TwoFloat::from_str_radix(s, radix).map(Self)
    }
}

impl ToPrimitive for Extended {
    fn to_i64(&self) -> Option<i64> {
        self.0.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        self.0.to_f64()
    }
}

impl NumCast for Extended {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        <TwoFloat as NumCast>::from(n).map(Self)
    }
}

macro_rules! delegate {
    (const $($m:ident),*) => { $(#[inline] fn $m() -> Self { Self(<TwoFloat as Float>::$m()) })* };
    (pred $($m:ident),*) => { $(#[inline] fn $m(self) -> bool { Float::$m(self.0) })* };
    (unary $($m:ident),*) => { $(#[inline] fn $m(self) -> Self { Self(Float::$m(self.0)) })* };
    (binary $($m:ident),*) => { $(#[inline] fn $m(self, o: Self) -> Self { Self(Float::$m(self.0, o.0)) })* };
}

impl Float for Extended {
    delegate!(const nan, infinity, neg_infinity, neg_zero, min_value, min_positive_value, max_value, epsilon);
    delegate!(pred is_nan, is_infinite, is_finite, is_normal, is_sign_positive, is_sign_negative);
    delegate!(unary floor, ceil, round, trunc, fract, abs, signum, sqrt, exp2, log2, log10,
        cbrt, sin, cos, tan, asin, acos, atan, ln_1p, sinh, cosh, asinh, acosh, atanh);
    delegate!(binary max, min, powf, log, hypot, atan2);

    fn recip(self) -> Self {
        Self(div(tf(1.0), self.0))
    }
    fn exp(self) -> Self {
        Self(exp(self.0))
    }
    fn exp_m1(self) -> Self {
        Self(exp_m1(self.0))
    }
    fn ln(self) -> Self {
        Self(ln(self.0))
    }
    fn tanh(self) -> Self {
        Self(tanh(self.0))
    }

    fn classify(self) -> FpCategory {
        self.0.classify()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn powi(self, n: i32) -> Self {
        Self(self.0.powi(n))
    }
    #[allow(deprecated)]
    fn abs_sub(self, o: Self) -> Self {
        Self(Float::abs_sub(self.0, o.0))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        Float::integer_decode(self.0)
    }
}

impl Real for Extended {
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v)
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self.0.hi() + self.0.lo()
    }
}
