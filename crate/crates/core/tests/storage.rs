use num_complex::Complex32;
use proptest::prelude::*;

use kseg::io::{parse_cvol, write_cvol, CvolData, CvolMeta, Stamp};
use kseg::kspace::{ComplexVolume, Domain, Timepoint};
use kseg::phantom::{generate_exam, PhantomSpec};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn complex_volumes_round_trip(d in 1usize..4, h in 1usize..9, w in 1usize..9, vals in prop::collection::vec(-1e3f32..1e3, 2 * 8 * 8 * 3), patient in 0usize..100) {
        let v = ComplexVolume::from_fn((d, h, w), Domain::KSpace, |z, y, x| {
            let i = 2 * ((z * h + y) * w + x);
            Complex32::new(vals[i], vals[i + 1])
        });
        let meta = CvolMeta {
            patient_index: Some(patient),
            domain_tag: Some("kspace".into()),
            timepoint: Some(Timepoint::Post1),
            stamp: Some(Stamp::new("abc")),
        };
        let data = CvolData::Complex(v);
        let mut buf = Vec::new();
        write_cvol(&mut buf, &data, &meta).unwrap();
        let (back, back_meta) = parse_cvol(&buf).unwrap();
        prop_assert_eq!(back, data);
        prop_assert_eq!(back_meta, meta);
    }

    #[test]
    fn masks_round_trip_and_truncation_is_detected(bits in prop::collection::vec(0u8..2, 1..200), cut in 1usize..20) {
        let data = CvolData::Mask { dims: (1, 1, bits.len()), data: bits };
        let mut buf = Vec::new();
        write_cvol(&mut buf, &data, &CvolMeta::default()).unwrap();
        prop_assert_eq!(parse_cvol(&buf).unwrap().0, data);
        let short = &buf[..buf.len().saturating_sub(cut)];
        prop_assert!(parse_cvol(short).is_err());
    }

    #[test]
    fn phantoms_are_deterministic_with_nontrivial_phase(seed in any::<u64>()) {
        let spec = PhantomSpec { depth: 8, height: 32, width: 32, lesion_radius_range: (2.0, 4.0), ..PhantomSpec::desk() };
        let a = generate_exam(&spec, 1, seed).unwrap();
        prop_assert_eq!(&a, &generate_exam(&spec, 1, seed).unwrap());
        let (d, h, w) = a.shape();
        for i in 0..d * h * w {
            if a.lesion_mask[i] != 0 {
                let p = [(i / (h * w)) as f64, (i / w % h) as f64, (i % w) as f64];
                prop_assert!(a.lesions.iter().any(|l| l.contains(p)));
            }
        }
        let im = a.pre.data().iter().map(|c| (c.im as f64).powi(2)).sum::<f64>() / a.pre.len() as f64;
        prop_assert!(im.sqrt() >= 0.05 * a.pre.rms());
    }
}

#[test]
fn garbage_is_rejected() {
    assert!(parse_cvol(b"not a volume").is_err());
    let mut buf = Vec::new();
    write_cvol(&mut buf, &CvolData::Mask { dims: (1, 1, 2), data: vec![0, 1] }, &CvolMeta::default()).unwrap();
    buf[0] = b'X';
    assert!(parse_cvol(&buf).is_err());
}
