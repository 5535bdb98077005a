use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUPPORTED_BITS: [u32; 5] = [1, 2, 4, 8, 16];

/// Symmetric quantization table `{0, ±α, …, ±α(2^{n−1}−1)}`; for one bit
/// the table is `{−α, +α}`. Codes are the signed integer multipliers of `α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantTable {
    bits: u32,
    alpha: f64,
}

pub fn check_bits(bits: u32) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::UnsupportedBits(bits))
    }
}

/// Largest code magnitude for a bit-width.
pub fn max_code(bits: u32) -> i32 {
    if bits == 1 {
        1
    } else {
        (1i32 << (bits - 1)) - 1
    }
}

impl QuantTable {
    pub fn new(bits: u32, alpha: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("scale {alpha} must be positive")));
        }
        Ok(QuantTable { bits, alpha })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn max_code(&self) -> i32 {
        max_code(self.bits)
    }

    pub fn contains_code(&self, code: i32) -> bool {
        if self.bits == 1 {
            code == 1 || code == -1
        } else {
            code.abs() <= self.max_code()
        }
    }

    /// All valid codes in ascending order.
    pub fn codes(&self) -> Vec<i32> {
        if self.bits == 1 {
            vec![-1, 1]
        } else {
            let m = self.max_code();
            (-m..=m).collect()
        }
    }

    /// Level set, sorted ascending.
    pub fn levels(&self) -> Vec<f64> {
        self.codes().into_iter().map(|c| self.value(c)).collect()
    }

    #[inline]
    pub fn value(&self, code: i32) -> f64 {
        self.alpha * code as f64
    }

    /// Nearest code to `theta`. Ties go to the smaller magnitude, and between
    /// `±c` to `+c`.
    #[inline]
    pub fn nearest_code(&self, theta: f64) -> i32 {
        if self.bits == 1 {
            return if theta >= 0.0 { 1 } else { -1 };
        }
        let m = self.max_code();
        let base = (theta / self.alpha).floor().clamp(-(m as f64), m as f64) as i32;
        let mut best = base;
        let mut best_err = (theta - self.value(base)).abs();
        for c in [base - 1, base + 1, base + 2] {
            if c.abs() > m {
                continue;
            }
            let err = (theta - self.value(c)).abs();
            if better(err, c, best_err, best) {
                best = c;
                best_err = err;
            }
        }
        best
    }

    /// `(level, code)` nearest to `theta`.
    pub fn quantize(&self, theta: f64) -> Result<(f64, i32)> {
        if !theta.is_finite() {
            return Err(Error::Numeric("quantizer input".into()));
        }
        let c = self.nearest_code(theta);
        Ok((self.value(c), c))
    }

    pub fn quantize_slice(&self, theta: &[f64]) -> Vec<i32> {
        theta.iter().map(|&t| self.nearest_code(t)).collect()
    }

    /// `Σ (θ − α·c)²`.
    pub fn sq_error(&self, theta: &[f64], codes: &[i32]) -> f64 {
        theta
            .iter()
            .zip(codes)
            .map(|(&t, &c)| {
                let d = t - self.value(c);
                d * d
            })
            .sum()
    }
}

/// Tie-breaking order shared with the brute-force oracle in tests.
#[inline]
pub(crate) fn better(err: f64, code: i32, best_err: f64, best: i32) -> bool {
    err < best_err || (err == best_err && (code.abs() < best.abs() || (code.abs() == best.abs() && code > best)))
}
