//! Exact significance of a chunk-match count.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

pub fn choose(n: u64, r: u64) -> BigInt {
    let mut acc = BigInt::one();
    for i in 0..r {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// `P(Bin(m, 2^-k) ≥ m - s)`, exactly.
pub fn tail(s: u64, m: u64, k: u32) -> BigRational {
    let q = BigRational::new(BigInt::one(), BigInt::one() << k);
    let not_q = BigRational::one() - &q;
    let mut total = BigRational::zero();
    for j in (m - s)..=m {
        let term = q.clone().pow(j as i32) * not_q.clone().pow((m - j) as i32);
        total += BigRational::from_integer(choose(m, j)) * term;
    }
    total
}

/// `1 - (1 - tail)^n`: the chance that the best of `n` unrelated identifiers
/// agrees on at least `m - s` chunks.
pub fn pvalue(s: u64, m: u64, k: u32, n: u64) -> BigRational {
    let miss = BigRational::one() - tail(s, m, k);
    BigRational::one() - miss.pow(n as i32)
}

/// `log10` of a positive rational, accurate to double precision even when
/// the value is astronomically small or within a hair of one.
pub fn log10(r: &BigRational) -> f64 {
    assert!(r > &BigRational::zero(), "log of a non-positive number");
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    if r >= &half {
        let gap = (BigRational::one() - r).to_f64().expect("gap fits a double");
        return (-gap).ln_1p() / std::f64::consts::LN_10;
    }
    let (num, den) = (r.numer(), r.denom());
    let shift = num.bits() as i64 - den.bits() as i64;
    let scaled = if shift >= 0 {
        BigRational::new(num.clone(), den.clone() << shift as usize)
    } else {
        BigRational::new(num.clone() << (-shift) as usize, den.clone())
    };
    scaled.to_f64().expect("scaled ratio lies in [1/2, 2]").log10() + shift as f64 * std::f64::consts::LOG10_2
}
