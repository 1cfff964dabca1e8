use num_complex::Complex32;
use proptest::prelude::*;

use kseg::kspace::{ComplexVolume, Domain};
use kseg::sampling::{add_noise, apply_mask, center_columns, derive_noise_seed, derive_seed, random_mask, SplitMix64};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn masks_are_deterministic(width in 1usize..400, r in 1.0f64..64.0, cf in 0.0f64..0.5, seed in any::<u64>()) {
        prop_assert_eq!(random_mask(width, r, cf, seed), random_mask(width, r, cf, seed));
    }

    #[test]
    fn center_block_always_kept(width in 1usize..400, r in 1.0f64..64.0, cf in 0.0f64..1.0, seed in any::<u64>()) {
        let m = random_mask(width, r, cf, seed);
        prop_assert_eq!(m.keep.len(), width);
        prop_assert_eq!(m.center_range().len(), center_columns(width, cf));
        prop_assert!(m.keep[m.center_range()].iter().all(|&k| k));
        prop_assert!(m.kept() >= center_columns(width, cf));
    }

    #[test]
    fn masking_zeroes_exactly_the_dropped_columns(r in 2u32..16, seed in any::<u64>()) {
        let (d, h, w) = (2, 6, 40);
        let k = ComplexVolume::from_fn((d, h, w), Domain::KSpace, |z, y, x| Complex32::new(1.0 + (z + y + x) as f32, 0.5));
        let m = random_mask(w, r as f64, 0.08, seed);
        let out = apply_mask(&k, &m).unwrap();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let expect = if m.keep[x] { k.get(z, y, x) } else { Complex32::new(0.0, 0.0) };
                    prop_assert_eq!(out.get(z, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn seeds_depend_on_every_component(r in 1u32..64, p in 0usize..100, z in 0usize..100) {
        let s = derive_seed(r, p, z);
        prop_assert_eq!(s, derive_seed(r, p, z));
        prop_assert_ne!(s, derive_seed(r + 1, p, z));
        prop_assert_ne!(s, derive_seed(r, p + 1, z));
        prop_assert_ne!(s, derive_seed(r, p, z + 1));
    }
}

#[test]
fn noise_is_zero_mean_and_balanced() {
    let mut rng = SplitMix64::new(3);
    let k = ComplexVolume::from_fn((4, 128, 128), Domain::KSpace, |_, _, _| {
        Complex32::new(rng.next_uniform(-1.0, 1.0) as f32, rng.next_uniform(-1.0, 1.0) as f32)
    });
    for snr in [10.0, -5.0, -20.0] {
        let noise = add_noise(&k, snr, derive_noise_seed(snr as i32, 0)).unwrap().sub(&k).unwrap();
        let n = noise.len() as f64;
        let (mut re, mut im, mut re2, mut im2) = (0.0, 0.0, 0.0, 0.0);
        for v in noise.data() {
            let (a, b) = (v.re as f64, v.im as f64);
            re += a;
            im += b;
            re2 += a * a;
            im2 += b * b;
        }
        let sigma = ((re2 + im2) / n).sqrt();
        // standard error of the mean is sigma / sqrt(2n); allow five of them
        let tol = 5.0 * sigma / (2.0 * n).sqrt();
        assert!((re / n).abs() < tol && (im / n).abs() < tol, "{snr} dB: mean ({}, {})", re / n, im / n);
        assert!((re2 / im2 - 1.0).abs() < 0.05, "{snr} dB: Re/Im variance ratio {}", re2 / im2);
    }
}

#[test]
fn noise_is_reproducible_and_seed_sensitive() {
    let k = ComplexVolume::from_fn((1, 8, 8), Domain::KSpace, |_, y, x| Complex32::new(y as f32, x as f32));
    let a = add_noise(&k, 0.0, 9).unwrap();
    assert_eq!(a, add_noise(&k, 0.0, 9).unwrap());
    assert_ne!(a, add_noise(&k, 0.0, 10).unwrap());
    assert!(add_noise(&ComplexVolume::zeros((1, 4, 4), Domain::KSpace), 0.0, 1).is_err());
    assert!(add_noise(&k.ifft2c().unwrap(), 0.0, 1).is_err());
}
