//! Binary fixed-point numbers of arbitrary precision.
//!
//! Inclusion–exclusion sums over silent-detector subsets alternate in sign
//! with coefficients as large as `C(128, 64) ≈ 2.4e37`, far beyond what `f64`
//! can cancel. Evaluating them on a `raw / 2^prec` grid with a few hundred
//! fractional bits keeps the absolute error below `2^-(prec - D)`.

use std::ops::{Add, Mul, Neg, Sub};

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{One, Signed, ToPrimitive, Zero};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fixed {
    raw: BigInt,
    prec: u32,
}

const GUARD_BITS: u32 = 64;
const EXP_HALVINGS: u32 = 24;

impl Fixed {
    pub fn zero(prec: u32) -> Self {
        Fixed {
            raw: BigInt::zero(),
            prec,
        }
    }

    pub fn one(prec: u32) -> Self {
        Fixed {
            raw: BigInt::one() << prec,
            prec,
        }
    }

    pub fn from_int(value: i64, prec: u32) -> Self {
        Fixed {
            raw: BigInt::from(value) << prec,
            prec,
        }
    }

    pub fn from_biguint(value: &BigUint, prec: u32) -> Self {
        Fixed {
            raw: BigInt::from_biguint(Sign::Plus, value.clone()) << prec,
            prec,
        }
    }

    /// Exact conversion (up to truncation below `2^-prec`).
    pub fn from_f64(value: f64, prec: u32) -> Self {
        assert!(value.is_finite(), "cannot represent {value} in fixed point");
        if value == 0.0 {
            return Self::zero(prec);
        }
        let bits = value.to_bits();
        let sign = if bits >> 63 == 0 { 1i64 } else { -1 };
        let exponent = ((bits >> 52) & 0x7ff) as i64;
        let mantissa = if exponent == 0 {
            (bits & 0xf_ffff_ffff_ffff) << 1
        } else {
            (bits & 0xf_ffff_ffff_ffff) | 0x10_0000_0000_0000
        };
        // value = mantissa * 2^(exponent - 1075)
        let shift = exponent - 1075 + prec as i64;
        let mut raw = BigInt::from(mantissa);
        if shift >= 0 {
            raw <<= shift as u64;
        } else {
            raw >>= (-shift) as u64;
        }
        Fixed {
            raw: raw * sign,
            prec,
        }
    }

    pub fn precision(&self) -> u32 {
        self.prec
    }

    pub fn is_negative(&self) -> bool {
        self.raw.is_negative()
    }

    pub fn with_precision(&self, prec: u32) -> Self {
        let raw = if prec >= self.prec {
            &self.raw << (prec - self.prec)
        } else {
            &self.raw >> (self.prec - prec)
        };
        Fixed { raw, prec }
    }

    pub fn to_f64(&self) -> f64 {
        if self.raw.is_zero() {
            return 0.0;
        }
        let bits = self.raw.bits();
        let shift = bits.saturating_sub(64);
        let top = (&self.raw >> shift).to_f64().expect("64-bit value fits f64");
        let exponent = shift as i64 - self.prec as i64;
        scale_by_pow2(top, exponent)
    }

    pub fn mul_uint(&self, factor: &BigUint) -> Self {
        Fixed {
            raw: &self.raw * BigInt::from_biguint(Sign::Plus, factor.clone()),
            prec: self.prec,
        }
    }

    pub fn div_int(&self, divisor: i64) -> Self {
        assert!(divisor != 0, "division by zero");
        Fixed {
            raw: &self.raw / divisor,
            prec: self.prec,
        }
    }

    pub fn div(&self, other: &Fixed) -> Self {
        assert_eq!(self.prec, other.prec);
        assert!(!other.raw.is_zero(), "division by zero");
        Fixed {
            raw: (&self.raw << self.prec) / &other.raw,
            prec: self.prec,
        }
    }

    pub fn powi(&self, mut exp: u64) -> Self {
        let mut base = self.clone();
        let mut acc = Fixed::one(self.prec);
        while exp > 0 {
            if exp & 1 == 1 {
                acc = &acc * &base;
            }
            exp >>= 1;
            if exp > 0 {
                base = &base * &base;
            }
        }
        acc
    }

    /// Natural logarithm of a strictly positive value.
    pub fn ln(&self) -> Self {
        assert!(self.raw.is_positive(), "logarithm of a non-positive value");
        let work = self.prec + GUARD_BITS;
        let x = self.with_precision(work);
        // x = 2^k * y with y in [1, 2)
        let k = x.raw.bits() as i64 - 1 - work as i64;
        let y = Fixed {
            raw: if k >= 0 {
                &x.raw >> (k as u64)
            } else {
                &x.raw << ((-k) as u64)
            },
            prec: work,
        };
        let one = Fixed::one(work);
        let t = (&y - &one).div(&(&y + &one));
        let ln_y = atanh_series(&t).scale_int(2);
        let ln2 = ln2(work);
        (ln_y + ln2.scale_int(k)).with_precision(self.prec)
    }

    pub fn exp(&self) -> Self {
        let work = self.prec + GUARD_BITS + EXP_HALVINGS;
        let z = self.with_precision(work);
        let ln2 = ln2(work);
        // z = k ln2 + r, 0 <= r < ln2
        let mut k = (&z.raw / &ln2.raw).to_i64().expect("exponent fits i64");
        let mut r = &z - &ln2.scale_int(k);
        if r.is_negative() {
            k -= 1;
            r = &r + &ln2;
        }
        let reduced = Fixed {
            raw: r.raw >> EXP_HALVINGS,
            prec: work,
        };
        let mut value = taylor_exp(&reduced);
        for _ in 0..EXP_HALVINGS {
            value = &value * &value;
        }
        let raw = if k >= 0 {
            value.raw << (k as u64)
        } else {
            value.raw >> ((-k) as u64)
        };
        Fixed { raw, prec: work }.with_precision(self.prec)
    }

    /// `self^exponent` for a positive base and real exponent.
    pub fn powf(&self, exponent: &Fixed) -> Self {
        (&self.ln() * exponent).exp()
    }

    fn scale_int(&self, factor: i64) -> Self {
        Fixed {
            raw: &self.raw * factor,
            prec: self.prec,
        }
    }
}

fn scale_by_pow2(value: f64, exponent: i64) -> f64 {
    // Split so that intermediate powers of two stay representable.
    let mut v = value;
    let mut e = exponent;
    while e > 1000 {
        v *= 2f64.powi(1000);
        e -= 1000;
    }
    while e < -1000 {
        v *= 2f64.powi(-1000);
        e += 1000;
        if v == 0.0 {
            return 0.0;
        }
    }
    v * 2f64.powi(e as i32)
}

/// atanh(t) = t + t^3/3 + t^5/5 + ... for |t| <= 1/3.
fn atanh_series(t: &Fixed) -> Fixed {
    let t2 = t * t;
    let mut power = t.clone();
    let mut sum = t.clone();
    let mut denom = 1i64;
    loop {
        power = &power * &t2;
        denom += 2;
        let term = power.div_int(denom);
        if term.raw.is_zero() {
            break;
        }
        sum = &sum + &term;
    }
    sum
}

fn taylor_exp(r: &Fixed) -> Fixed {
    let mut term = Fixed::one(r.prec);
    let mut sum = term.clone();
    let mut i = 1i64;
    loop {
        term = (&term * r).div_int(i);
        if term.raw.is_zero() {
            break;
        }
        sum = &sum + &term;
        i += 1;
    }
    sum
}

fn ln2(prec: u32) -> Fixed {
    // ln 2 = 2 atanh(1/3)
    let third = Fixed::one(prec).div_int(3);
    atanh_series(&third).scale_int(2)
}

impl Add for &Fixed {
    type Output = Fixed;
    fn add(self, rhs: &Fixed) -> Fixed {
        assert_eq!(self.prec, rhs.prec);
        Fixed {
            raw: &self.raw + &rhs.raw,
            prec: self.prec,
        }
    }
}

impl Add for Fixed {
    type Output = Fixed;
    fn add(self, rhs: Fixed) -> Fixed {
        &self + &rhs
    }
}

impl Sub for &Fixed {
    type Output = Fixed;
    fn sub(self, rhs: &Fixed) -> Fixed {
        assert_eq!(self.prec, rhs.prec);
        Fixed {
            raw: &self.raw - &rhs.raw,
            prec: self.prec,
        }
    }
}

impl Mul for &Fixed {
    type Output = Fixed;
    fn mul(self, rhs: &Fixed) -> Fixed {
        assert_eq!(self.prec, rhs.prec);
        Fixed {
            raw: (&self.raw * &rhs.raw) >> self.prec,
            prec: self.prec,
        }
    }
}

impl Neg for Fixed {
    type Output = Fixed;
    fn neg(self) -> Fixed {
        Fixed {
            raw: -self.raw,
            prec: self.prec,
        }
    }
}
