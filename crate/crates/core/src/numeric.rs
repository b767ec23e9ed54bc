//! Fixed-point number system shared by every protocol.
//!
//! Values are carried in `f64`. A value is *on the grid* when it is an integer
//! multiple of `2^-frac_bits`; every share is snapped to the grid right before
//! it leaves a party, and nowhere else.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Carrier type for fixed-point quantities.
pub type Fx = f64;

/// Mantissa bits of the carrier.
pub const CARRIER_BITS: u32 = f64::MANTISSA_DIGITS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    /// Bits on the integer place (`l_I`).
    pub int_bits: u32,
    /// Bits on the fractional place (`l_D`).
    pub frac_bits: u32,
    /// Lower share-range exponent (`delta`).
    pub delta: i32,
    /// Upper share-range exponent (`epsilon`).
    pub epsilon: i32,
    /// Comparison leakage window ratio.
    pub eta: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            int_bits: 12,
            frac_bits: 16,
            delta: 8,
            epsilon: 24,
            eta: 1.0 / 256.0,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        let ld = self.frac_bits as i32;
        let li = self.int_bits as i32;
        if 2 * self.delta < ld {
            return Err(Error::Config(format!(
                "delta {} must be at least frac_bits/2",
                self.delta
            )));
        }
        // products of two in-range shares must stay below 2^(l_I/2 + l_D)
        if 4 * (self.epsilon - ld) > li + 2 * ld {
            return Err(Error::Config(format!(
                "epsilon {}: share products exceed 2^(int_bits/2 + frac_bits)",
                self.epsilon
            )));
        }
        if self.delta >= self.epsilon {
            return Err(Error::Config("delta must be below epsilon".into()));
        }
        if self.int_bits + 2 * self.frac_bits + 8 > CARRIER_BITS {
            return Err(Error::Config(format!(
                "int_bits + 2*frac_bits + 8 exceeds the {CARRIER_BITS}-bit carrier"
            )));
        }
        if !(self.eta > 0.0 && self.eta < 1.0 / 16.0) {
            return Err(Error::Config(format!("eta {} outside (0, 1/16)", self.eta)));
        }
        Ok(())
    }

    /// One unit in the last fractional place, `2^-l_D`.
    pub fn ulp(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    /// Lower bound of the admissible share magnitude, `2^(delta - l_D)`.
    pub fn share_lower(&self) -> f64 {
        ((self.delta - self.frac_bits as i32) as f64).exp2()
    }

    /// Upper bound of the admissible share magnitude, `2^(epsilon - l_D)`.
    pub fn share_upper(&self) -> f64 {
        ((self.epsilon - self.frac_bits as i32) as f64).exp2()
    }

    /// Largest secret magnitude accepted by `split`.
    pub fn secret_bound(&self) -> f64 {
        self.share_upper() / 2.0
    }
}

/// Snap `x` to the `l_D`-bit grid.
///
/// Rounds the scaled integer to nearest, ties to even. When each party rounds
/// its own share this way and the secret itself lies on the grid, the rounded
/// shares still sum to the secret exactly.
pub fn truncate(x: Fx, cfg: &FixedPointConfig) -> Fx {
    let scale = (cfg.frac_bits as f64).exp2();
    (x * scale).round_ties_even() / scale
}

pub fn truncate_slice(xs: &mut [Fx], cfg: &FixedPointConfig) {
    let scale = (cfg.frac_bits as f64).exp2();
    for x in xs {
        *x = (*x * scale).round_ties_even() / scale;
    }
}

/// Membership in `F_s = (2^(delta-l_D), 2^(epsilon-l_D)) ∪ {0}`.
pub fn in_share_range(x: Fx, cfg: &FixedPointConfig) -> bool {
    let a = x.abs();
    x == 0.0 || (a > cfg.share_lower() && a < cfg.share_upper())
}
