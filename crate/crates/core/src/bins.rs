//! The log-frequency pitch lattice and cents/Hz/bin conversions.
//!
//! Bin `i` has center `fmin * 2^(i * cents_per_bin / 1200)`, so bins are
//! equally spaced in cents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CENTS_PER_OCTAVE: f64 = 1200.0;

/// Pitch quantization lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    num_bins: usize,
    fmin: f64,
    cents_per_bin: f64,
}

impl BinGrid {
    pub fn new(num_bins: usize, fmin: f64, cents_per_bin: f64) -> Result<Self> {
        if num_bins < 2 {
            return Err(Error::invalid(format!("grid needs at least 2 bins, got {num_bins}")));
        }
        if !(fmin > 0.0 && fmin.is_finite()) {
            return Err(Error::invalid(format!("fmin must be positive, got {fmin}")));
        }
        if !(cents_per_bin > 0.0 && cents_per_bin.is_finite()) {
            return Err(Error::invalid(format!(
                "cents_per_bin must be positive, got {cents_per_bin}"
            )));
        }
        Ok(Self {
            num_bins,
            fmin,
            cents_per_bin,
        })
    }

    /// 1440 bins of 5 cents from 31 Hz (about 31-1984 Hz). The default grid.
    pub fn fine() -> Self {
        Self {
            num_bins: 1440,
            fmin: 31.0,
            cents_per_bin: 5.0,
        }
    }

    /// 360 bins of 20 cents from 31 Hz.
    pub fn crepe() -> Self {
        Self {
            num_bins: 360,
            fmin: 31.0,
            cents_per_bin: 20.0,
        }
    }

    /// 486 bins of 12.5 cents from 30 Hz (about 30-1000 Hz).
    pub fn fcnf0() -> Self {
        Self {
            num_bins: 486,
            fmin: 30.0,
            cents_per_bin: 12.5,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn fmin(&self) -> f64 {
        self.fmin
    }

    pub fn fmax(&self) -> f64 {
        self.center_unchecked(self.num_bins - 1)
    }

    pub fn cents_per_bin(&self) -> f64 {
        self.cents_per_bin
    }

    pub fn center(&self, i: usize) -> Result<f64> {
        if i >= self.num_bins {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.num_bins,
            });
        }
        Ok(self.center_unchecked(i))
    }

    pub(crate) fn center_unchecked(&self, i: usize) -> f64 {
        self.fractional_to_hz(i as f64)
    }

    /// Position of `f0` on the lattice in (fractional) bins, unclamped.
    pub fn hz_to_fractional(&self, f0: f64) -> f64 {
        CENTS_PER_OCTAVE * (f0 / self.fmin).log2() / self.cents_per_bin
    }

    pub fn fractional_to_hz(&self, bin: f64) -> f64 {
        self.fmin * (bin * self.cents_per_bin / CENTS_PER_OCTAVE).exp2()
    }

    /// Nearest bin to `f0`. Exact ties go to the lower bin; out-of-range
    /// frequencies clamp to the first or last bin.
    pub fn quantize(&self, f0: f64) -> Result<usize> {
        if !(f0 > 0.0 && f0.is_finite()) {
            return Err(Error::invalid(format!("frequency must be positive, got {f0}")));
        }
        Ok(self.nearest_bin(self.hz_to_fractional(f0)))
    }

    /// Nearest bin to a fractional lattice position, ties rounding down.
    pub(crate) fn nearest_bin(&self, pos: f64) -> usize {
        if pos <= 0.0 {
            return 0;
        }
        let last = (self.num_bins - 1) as f64;
        if pos >= last {
            return self.num_bins - 1;
        }
        let lower = pos.floor();
        let bin = if pos - lower > 0.5 { lower + 1.0 } else { lower };
        bin as usize
    }

    pub fn contains(&self, f0: f64) -> bool {
        f0 >= self.fmin && f0 <= self.fmax()
    }
}

impl Default for BinGrid {
    fn default() -> Self {
        Self::fine()
    }
}

/// Absolute pitch distance in cents, `|1200 log2(y / y_hat)|`.
pub fn cents_between(y: f64, y_hat: f64) -> Result<f64> {
    if !(y > 0.0 && y_hat > 0.0) {
        return Err(Error::invalid(format!(
            "cents distance needs positive frequencies, got {y} and {y_hat}"
        )));
    }
    Ok(signed_cents(y, y_hat).abs())
}

/// `1200 log2(y_hat / y)`; positive when `y_hat` is sharp of `y`.
pub(crate) fn signed_cents(y: f64, y_hat: f64) -> f64 {
    CENTS_PER_OCTAVE * (y_hat / y).log2()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crepe_centers() {
        let g = BinGrid::crepe();
        assert_eq!(g.center(0).unwrap(), 31.0);
        assert!((g.center(60).unwrap() - 62.0).abs() < 1e-9);
    }

    #[test]
    fn fcnf0_top_bin_near_1000hz() {
        let g = BinGrid::fcnf0();
        let top = g.center(485).unwrap();
        assert!((top - 1000.0).abs() < 10.0, "top bin {top}");
    }

    #[test]
    fn center_out_of_range() {
        let g = BinGrid::fine();
        assert!(matches!(
            g.center(1440),
            Err(Error::IndexOutOfRange { index: 1440, len: 1440 })
        ));
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(BinGrid::new(1, 31.0, 5.0).is_err());
        assert!(BinGrid::new(10, 0.0, 5.0).is_err());
        assert!(BinGrid::new(10, 31.0, -1.0).is_err());
    }

    #[test]
    fn quantize_roundtrips_every_center() {
        for g in [BinGrid::fine(), BinGrid::crepe(), BinGrid::fcnf0()] {
            for k in 0..g.num_bins() {
                assert_eq!(g.quantize(g.center(k).unwrap()).unwrap(), k);
            }
        }
    }

    #[test]
    fn quantize_tie_goes_down() {
        let g = BinGrid::new(8, 100.0, 100.0).unwrap();
        // Geometric mean of neighbouring centers: k or k+1, floating point decides.
        for k in 0..7 {
            let mid = (g.center(k).unwrap() * g.center(k + 1).unwrap()).sqrt();
            let q = g.quantize(mid).unwrap();
            assert!(q == k || q == k + 1);
        }
        assert_eq!(g.nearest_bin(1.5), 1);
        assert_eq!(g.nearest_bin(1.5000001), 2);
        assert_eq!(g.nearest_bin(6.5), 6);
    }

    #[test]
    fn quantize_clamps() {
        let g = BinGrid::fine();
        assert_eq!(g.quantize(20.0).unwrap(), 0);
        assert_eq!(g.quantize(20_000.0).unwrap(), 1439);
        assert!(g.quantize(0.0).is_err());
        assert!(g.quantize(-3.0).is_err());
    }

    #[test]
    fn cents_examples() {
        assert!((cents_between(440.0, 880.0).unwrap() - 1200.0).abs() < 1e-9);
        assert_eq!(cents_between(317.0, 317.0).unwrap(), 0.0);
        // 1200 * ln(1.03) / ln(2), evaluated independently.
        let expected = 1200.0 * (1.03f64).ln() / std::f64::consts::LN_2;
        assert!((expected - 51.17).abs() < 0.005);
        assert!((cents_between(100.0, 103.0).unwrap() - expected).abs() < 1e-9);
        assert!(cents_between(0.0, 100.0).is_err());
    }

    #[test]
    fn mean_quantization_error_is_quarter_bin() {
        let g = BinGrid::fine();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let top = g.hz_to_fractional(g.fmax()) * g.cents_per_bin();
        let n = 100_000;
        let mut total = 0.0;
        for _ in 0..n {
            let cents: f64 = rng.gen_range(0.0..top);
            let f0 = g.fmin() * (cents / 1200.0).exp2();
            let q = g.center(g.quantize(f0).unwrap()).unwrap();
            total += cents_between(f0, q).unwrap();
        }
        let mean = total / n as f64;
        assert!((mean - 1.25).abs() < 0.0625, "mean error {mean}");
    }

    proptest! {
        #[test]
        fn quantization_error_within_half_bin(cents in 0.0f64..7195.0) {
            let g = BinGrid::fine();
            let f0 = g.fmin() * (cents / 1200.0).exp2();
            let q = g.center(g.quantize(f0).unwrap()).unwrap();
            prop_assert!(cents_between(f0, q).unwrap() <= g.cents_per_bin() / 2.0 + 1e-9);
        }

        #[test]
        fn cents_symmetric_and_triangle(a in 20.0f64..4000.0, b in 20.0f64..4000.0, c in 20.0f64..4000.0) {
            let ab = cents_between(a, b).unwrap();
            prop_assert!((ab - cents_between(b, a).unwrap()).abs() < 1e-9);
            let bc = cents_between(b, c).unwrap();
            let ac = cents_between(a, c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }
    }
}
