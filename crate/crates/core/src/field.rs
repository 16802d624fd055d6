//! Prime-field arithmetic and the fixed-point codec that carries real-valued
//! observations into the field and aggregates back out of it.
//!
//! All arithmetic is arbitrary precision. Field elements carry a handle to
//! their modulus so that mixing elements of different fields is an error
//! rather than a silent wrong answer.

use std::fmt;
use std::sync::Arc;

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{FromPrimitive, One, ToPrimitive, Zero};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("field elements belong to different moduli ({left} vs {right})")]
    ModulusMismatch { left: BigUint, right: BigUint },
    #[error("value {value} is outside the data bound [-{bound}, {bound}]")]
    BoundViolation { value: f64, bound: f64 },
    #[error("modulus {0} is not prime")]
    NotPrime(BigUint),
    #[error("modulus {modulus} does not exceed the aggregate bound {bound}")]
    ModulusTooSmall { modulus: BigUint, bound: BigUint },
    #[error("invalid codec parameter: {0}")]
    InvalidParameter(String),
}

/// A prime modulus `p`. Cheap to clone; elements share it by reference.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct FieldModulus(Arc<BigUint>);

impl FieldModulus {
    /// Wraps `p` after checking that it is prime.
    pub fn new(p: BigUint) -> Result<Self, FieldError> {
        if !is_prime(&p) {
            return Err(FieldError::NotPrime(p));
        }
        Ok(FieldModulus(Arc::new(p)))
    }

    pub fn from_u64(p: u64) -> Result<Self, FieldError> {
        Self::new(BigUint::from(p))
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn zero(&self) -> FieldElement {
        FieldElement {
            value: BigUint::zero(),
            modulus: self.clone(),
        }
    }

    /// Reduces a nonnegative integer into the field.
    pub fn element(&self, v: impl Into<BigUint>) -> FieldElement {
        FieldElement {
            value: v.into() % self.value(),
            modulus: self.clone(),
        }
    }

    /// Reduces a signed integer into `[0, p)`.
    pub fn element_from_int(&self, v: &BigInt) -> FieldElement {
        let p = BigInt::from_biguint(Sign::Plus, self.value().clone());
        let r = v.mod_floor(&p);
        FieldElement {
            value: r.to_biguint().expect("mod_floor by a positive modulus is nonnegative"),
            modulus: self.clone(),
        }
    }

    /// Centered representative of `e`: `v` if `v <= (p-1)/2`, otherwise `v - p`.
    pub fn lift(&self, e: &FieldElement) -> BigInt {
        let half = (self.value() - 1u32) >> 1;
        if e.value <= half {
            BigInt::from_biguint(Sign::Plus, e.value.clone())
        } else {
            BigInt::from_biguint(Sign::Plus, e.value.clone())
                - BigInt::from_biguint(Sign::Plus, self.value().clone())
        }
    }
}

impl fmt::Debug for FieldModulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FieldModulus({})", self.0)
    }
}

impl fmt::Display for FieldModulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// An integer in `[0, p)`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct FieldElement {
    value: BigUint,
    modulus: FieldModulus,
}

impl FieldElement {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn modulus(&self) -> &FieldModulus {
        &self.modulus
    }

    pub fn is_zero(&self) -> bool {
        self.value.is_zero()
    }

    fn check(&self, other: &FieldElement) -> Result<(), FieldError> {
        if self.modulus != other.modulus {
            return Err(FieldError::ModulusMismatch {
                left: self.modulus.value().clone(),
                right: other.modulus.value().clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &FieldElement) -> Result<FieldElement, FieldError> {
        self.check(other)?;
        let mut v = &self.value + &other.value;
        if &v >= self.modulus.value() {
            v -= self.modulus.value();
        }
        Ok(FieldElement {
            value: v,
            modulus: self.modulus.clone(),
        })
    }

    pub fn sub(&self, other: &FieldElement) -> Result<FieldElement, FieldError> {
        self.check(other)?;
        let v = if self.value >= other.value {
            &self.value - &other.value
        } else {
            self.modulus.value() - &other.value + &self.value
        };
        Ok(FieldElement {
            value: v,
            modulus: self.modulus.clone(),
        })
    }

    pub fn neg(&self) -> FieldElement {
        self.modulus.zero().sub(self).expect("same modulus")
    }

    /// Multiplies by an integer scalar, reducing mod `p`.
    pub fn scale(&self, m: &BigInt) -> FieldElement {
        let prod = BigInt::from_biguint(Sign::Plus, self.value.clone()) * m;
        self.modulus.element_from_int(&prod)
    }

    /// Sum of a nonempty sequence of elements sharing one modulus.
    pub fn sum<'a, I>(modulus: &FieldModulus, items: I) -> Result<FieldElement, FieldError>
    where
        I: IntoIterator<Item = &'a FieldElement>,
    {
        items
            .into_iter()
            .try_fold(modulus.zero(), |acc, e| acc.add(e))
    }
}

impl fmt::Debug for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (mod {})", self.value, self.modulus)
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.value.fmt(f)
    }
}

/// Miller-Rabin with the first thirteen prime bases, which is deterministic
/// for every `n < 3.3 * 10^24`.
pub fn is_prime(n: &BigUint) -> bool {
    const SMALL: [u32; 13] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41];
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &q in &SMALL {
        let q = BigUint::from(q);
        if n == &q {
            return true;
        }
        if (n % &q).is_zero() {
            return false;
        }
    }
    let n_minus_one = n - 1u32;
    let shift = n_minus_one
        .trailing_zeros()
        .expect("n - 1 is nonzero for n > 41");
    let odd = &n_minus_one >> shift;
    'witness: for &a in &SMALL {
        let mut x = BigUint::from(a).modpow(&odd, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..shift {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// `2 * n * ceil(x_max * scale) + 1`, the value every admissible modulus must exceed.
pub fn modulus_bound(n: usize, x_max: f64, scale: u64) -> BigUint {
    let units = BigUint::from_f64((x_max * scale as f64).ceil()).unwrap_or_default();
    BigUint::from(2u32) * BigUint::from(n) * units + 1u32
}

/// Smallest prime strictly above [`modulus_bound`].
pub fn choose_modulus(n: usize, x_max: f64, scale: u64) -> FieldModulus {
    let mut candidate = modulus_bound(n, x_max, scale) + 1u32;
    while !is_prime(&candidate) {
        candidate += 1u32;
    }
    FieldModulus(Arc::new(candidate))
}

/// Fixed-point map between bounded reals and field elements: `x` becomes
/// `round(x * scale) mod p`, and aggregates come back through the centered
/// lift divided by `scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointCodec {
    scale: u64,
    x_max: f64,
    n: usize,
    modulus: FieldModulus,
}

impl FixedPointCodec {
    /// Builds a codec for `n` nodes with the smallest admissible modulus.
    pub fn new(n: usize, x_max: f64, scale: u64) -> Result<Self, FieldError> {
        Self::validate(n, x_max, scale)?;
        Ok(FixedPointCodec {
            scale,
            x_max,
            n,
            modulus: choose_modulus(n, x_max, scale),
        })
    }

    /// Builds a codec over a caller-chosen modulus, which must still clear the aggregate bound.
    pub fn with_modulus(
        n: usize,
        x_max: f64,
        scale: u64,
        modulus: FieldModulus,
    ) -> Result<Self, FieldError> {
        Self::validate(n, x_max, scale)?;
        let bound = modulus_bound(n, x_max, scale);
        if modulus.value() <= &bound {
            return Err(FieldError::ModulusTooSmall {
                modulus: modulus.value().clone(),
                bound,
            });
        }
        Ok(FixedPointCodec {
            scale,
            x_max,
            n,
            modulus,
        })
    }

    fn validate(n: usize, x_max: f64, scale: u64) -> Result<(), FieldError> {
        if n == 0 {
            return Err(FieldError::InvalidParameter("network size must be at least 1".into()));
        }
        if !(x_max.is_finite() && x_max > 0.0) {
            return Err(FieldError::InvalidParameter(format!(
                "data bound must be positive and finite, got {x_max}"
            )));
        }
        if scale == 0 {
            return Err(FieldError::InvalidParameter("scale must be at least 1".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> u64 {
        self.scale
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn modulus(&self) -> &FieldModulus {
        &self.modulus
    }

    /// `round(x * scale)` with ties away from zero, after the bound check.
    pub fn quantize(&self, x: f64) -> Result<BigInt, FieldError> {
        if !x.is_finite() || x.abs() > self.x_max {
            return Err(FieldError::BoundViolation {
                value: x,
                bound: self.x_max,
            });
        }
        Ok(BigInt::from_f64((x * self.scale as f64).round()).expect("finite"))
    }

    pub fn encode(&self, x: f64) -> Result<FieldElement, FieldError> {
        Ok(self.modulus.element_from_int(&self.quantize(x)?))
    }

    /// Centered lift in field units, without the division by `scale`.
    pub fn lift(&self, v: &FieldElement) -> BigInt {
        self.modulus.lift(v)
    }

    pub fn decode_sum(&self, v: &FieldElement) -> f64 {
        units_to_f64(&self.lift(v)) / self.scale as f64
    }

    /// Quantization error allowed for a sum of `terms` encoded values.
    pub fn sum_tolerance(&self, terms: usize) -> f64 {
        terms as f64 / (2.0 * self.scale as f64)
    }
}

pub(crate) fn units_to_f64(v: &BigInt) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}
