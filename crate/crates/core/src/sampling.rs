//! Deterministic randomness, Cartesian undersampling masks and k-space noise.
//!
//! Every random decision in the crate is drawn from [`SplitMix64`]. Masks are
//! bit-exact for a given `(width, R, cf, seed)`; evaluation seeds come from
//! an FNV-1a hash of a canonical `a=<R>|p=<patient>|z=<slice>` string.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{ComplexVolume, Domain};

/// SplitMix64 stream. Doubles use the top 53 bits and lie in `[0, 1)`.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn next_range(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo + 1;
        lo + ((self.next_f64() * span as f64) as u64).min(span - 1)
    }

    /// Uniform double in `[lo, hi)`.
    pub fn next_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Two independent standard normals (Box-Muller).
    pub fn next_gaussian_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * PI * u2;
        (r * theta.cos(), r * theta.sin())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Canonical seed string for an evaluation mask.
pub fn seed_key(acceleration: u32, patient_index: usize, patch_z: usize) -> String {
    let mut s = String::new();
    let _ = write!(s, "a={acceleration}|p={patient_index}|z={patch_z}");
    s
}

/// Evaluation mask seed from acceleration, patient and patch start slice.
pub fn derive_seed(acceleration: u32, patient_index: usize, patch_z: usize) -> u64 {
    debug_assert!(acceleration >= 1);
    fnv1a64(seed_key(acceleration, patient_index, patch_z).as_bytes())
}

/// Evaluation noise seed; same hashing scheme as masks, keyed on SNR.
pub fn derive_noise_seed(snr_db: i32, patient_index: usize) -> u64 {
    fnv1a64(format!("snr={snr_db}|p={patient_index}").as_bytes())
}

/// Round half to even.
pub fn round_half_even(x: f64) -> i64 {
    x.round_ties_even() as i64
}

/// Number of always-kept center columns.
pub fn center_columns(width: usize, center_fraction: f64) -> usize {
    round_half_even(center_fraction * width as f64).clamp(0, width as i64) as usize
}

/// Phase-encode column mask shared across all slices of a patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    pub width: usize,
    pub keep: Vec<bool>,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub seed: u64,
}

impl SamplingMask {
    pub fn full(width: usize) -> Self {
        Self {
            width,
            keep: vec![true; width],
            acceleration: 1.0,
            center_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept() as f64 / self.width as f64
    }

    /// Column range of the guaranteed center block.
    pub fn center_range(&self) -> std::ops::Range<usize> {
        center_block(self.width, center_columns(self.width, self.center_fraction))
    }

    /// One CSV row of 0/1 per column.
    pub fn to_csv_row(&self) -> String {
        let cells: Vec<&str> = self.keep.iter().map(|&k| if k { "1" } else { "0" }).collect();
        cells.join(",")
    }
}

fn center_block(width: usize, n_low: usize) -> std::ops::Range<usize> {
    let pad = (width - n_low).div_ceil(2);
    pad..pad + n_low
}

/// Random Cartesian mask: the `round(cf * width)` central columns are kept,
/// every other column independently with probability
/// `(width / R - n_low) / (width - n_low)` clamped to `[0, 1]`.
pub fn random_mask(width: usize, acceleration: f64, center_fraction: f64, seed: u64) -> SamplingMask {
    assert!(width >= 1 && acceleration >= 1.0 && (0.0..=1.0).contains(&center_fraction));
    let n_low = center_columns(width, center_fraction);
    let center = center_block(width, n_low);
    let prob = if width == n_low {
        1.0
    } else {
        ((width as f64 / acceleration - n_low as f64) / (width - n_low) as f64).clamp(0.0, 1.0)
    };
    let mut rng = SplitMix64::new(seed);
    let keep = (0..width)
        .map(|c| center.contains(&c) || rng.next_f64() < prob)
        .collect();
    SamplingMask {
        width,
        keep,
        acceleration,
        center_fraction,
        seed,
    }
}

/// Ordered `(R, cf)` evaluation schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccelSchedule {
    pub entries: Vec<(u32, f64)>,
}

impl AccelSchedule {
    /// The undersampling grid used for every evaluation: 1x (fully sampled)
    /// through 48x.
    pub fn standard() -> Self {
        Self {
            entries: vec![
                (1, 0.0),
                (2, 0.04),
                (4, 0.08),
                (6, 0.05),
                (8, 0.04),
                (10, 0.03),
                (12, 0.02),
                (16, 0.015),
                (24, 0.008),
                (32, 0.004),
                (48, 0.002),
            ],
        }
    }

    pub fn center_fraction(&self, acceleration: u32) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == acceleration).map(|e| e.1)
    }

    pub fn accelerations(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.0)
    }
}

impl Default for AccelSchedule {
    fn default() -> Self {
        Self::standard()
    }
}

/// Zero the dropped columns of every slice.
pub fn apply_mask(k: &ComplexVolume, mask: &SamplingMask) -> Result<ComplexVolume> {
    k.expect_domain(Domain::KSpace)?;
    let (_, _, w) = k.shape();
    if mask.width != w {
        return Err(Error::shape(format!(
            "mask width {} does not match k-space width {w}",
            mask.width
        )));
    }
    let mut out = k.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        for (v, &keep) in row.iter_mut().zip(&mask.keep) {
            if !keep {
                *v = Complex32::new(0.0, 0.0);
            }
        }
    }
    Ok(out)
}

/// Add circular complex Gaussian noise at the requested SNR, where signal
/// power is the mean `|k|^2` of the input.
pub fn add_noise(k: &ComplexVolume, snr_db: f64, seed: u64) -> Result<ComplexVolume> {
    k.expect_domain(Domain::KSpace)?;
    let power = k.mean_power();
    if power <= 0.0 {
        return Err(Error::Degenerate("cannot add SNR-calibrated noise to zero-energy k-space".into()));
    }
    let sigma2 = power / 10f64.powf(snr_db / 10.0);
    let std = (sigma2 / 2.0).sqrt();
    let mut rng = SplitMix64::new(seed);
    let mut out = k.clone();
    for v in out.data_mut() {
        let (a, b) = rng.next_gaussian_pair();
        *v += Complex32::new((a * std) as f32, (b * std) as f32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_words() {
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        let mut a = SplitMix64::new(99);
        let mut b = SplitMix64::new(99);
        for _ in 0..1000 {
            let x = a.next_f64();
            assert_eq!(x, b.next_f64());
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn fnv1a_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn derive_seed_hashes_canonical_string() {
        assert_eq!(seed_key(4, 0, 0), "a=4|p=0|z=0");
        assert_eq!(derive_seed(4, 0, 0), fnv1a64(b"a=4|p=0|z=0"));
        assert_eq!(derive_seed(16, 3, 32), derive_seed(16, 3, 32));
    }

    #[test]
    fn derive_seed_distinct_over_grid() {
        let mut seen = std::collections::HashSet::new();
        for (r, _) in AccelSchedule::standard().entries {
            for p in 0..100 {
                for z in (0..=160).step_by(16) {
                    assert!(seen.insert(derive_seed(r, p, z)), "collision at {r} {p} {z}");
                }
            }
        }
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even(25.6), 26);
        assert_eq!(round_half_even(2.5), 2);
        assert_eq!(round_half_even(3.5), 4);
        assert_eq!(round_half_even(12.8), 13);
        assert_eq!(round_half_even(0.64), 1);
        assert_eq!(round_half_even(0.5), 0);
    }

    #[test]
    fn full_sampling_at_r1() {
        let m = random_mask(320, 1.0, 0.0, 5);
        assert_eq!(m.kept(), 320);
    }

    #[test]
    fn center_block_for_cf_008() {
        let m = random_mask(320, 4.0, 0.08, 11);
        let c = m.center_range();
        assert_eq!(c.len(), 26);
        assert!(c.contains(&160));
        assert!(c.clone().all(|i| m.keep[i]));
    }

    #[test]
    fn over_constrained_mask_clamps() {
        // cf alone exceeds 1/R: probability clamps to zero, only center kept.
        let m = random_mask(64, 8.0, 0.5, 1);
        assert_eq!(m.kept(), 32);
    }

    #[test]
    fn mask_csv_row() {
        let m = SamplingMask {
            width: 3,
            keep: vec![true, false, true],
            acceleration: 2.0,
            center_fraction: 0.0,
            seed: 0,
        };
        assert_eq!(m.to_csv_row(), "1,0,1");
    }

    #[test]
    fn apply_mask_zeroes_columns() {
        let k = ComplexVolume::from_fn((2, 2, 4), Domain::KSpace, |_, _, _| Complex32::new(1.0, 2.0));
        let mut mask = SamplingMask::full(4);
        assert_eq!(apply_mask(&k, &mask).unwrap(), k);
        mask.keep[1] = false;
        let m = apply_mask(&k, &mask).unwrap();
        assert_eq!(m.get(1, 1, 1), Complex32::new(0.0, 0.0));
        assert_eq!(m.get(1, 1, 2), k.get(1, 1, 2));
        assert!(m.energy() <= k.energy());
        assert!(apply_mask(&k, &SamplingMask::full(3)).is_err());
    }

    #[test]
    fn noise_needs_signal() {
        let k = ComplexVolume::zeros((1, 4, 4), Domain::KSpace);
        assert!(matches!(add_noise(&k, 0.0, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn vanishing_noise_at_high_snr() {
        let mut rng = SplitMix64::new(3);
        let k = ComplexVolume::from_fn((2, 16, 16), Domain::KSpace, |_, _, _| {
            Complex32::new(rng.next_f64() as f32, rng.next_f64() as f32)
        });
        let n = add_noise(&k, 60.0, 9).unwrap();
        let err: f64 = k
            .data()
            .iter()
            .zip(n.data())
            .map(|(a, b)| (a - b).norm_sqr() as f64)
            .sum();
        assert!((err / k.energy()).sqrt() < 2e-3);
    }
}
