use kseg::models::{build_model, ModelConfig, ModelVariant};
use kseg::phantom::{generate_cohort, PhantomSpec};
use kseg::training::{train, History, TrainConfig};

fn short_run(seed: u64) -> History {
    let cohort = generate_cohort(&PhantomSpec::desk(), 3, 21).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        steps_per_epoch: Some(2),
        batch_size: 2,
        augmentation_probability: 0.5,
        seed,
        ..TrainConfig::desk()
    };
    let mut model = build_model::<f32>(&ModelConfig::tiny(ModelVariant::ImageComplex), seed).unwrap();
    train(&mut model, &cohort[..2], &cohort[2..], &cfg, &mut |_| {}).unwrap()
}

#[test]
fn loss_curves_are_bit_identical_across_runs() {
    let (a, b) = (short_run(4), short_run(4));
    assert_eq!(a.step_losses.len(), 4);
    assert_eq!(a.step_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(), b.step_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>());
    assert_eq!(a, b);
    assert_ne!(a.step_losses, short_run(5).step_losses);
}

#[test]
fn overlapping_splits_are_rejected() {
    let cohort = generate_cohort(&PhantomSpec::desk(), 2, 3).unwrap();
    let mut model = build_model::<f32>(&ModelConfig::tiny(ModelVariant::ImageMagnitude), 0).unwrap();
    let err = train(&mut model, &cohort, &cohort[1..], &TrainConfig::desk(), &mut |_| {}).unwrap_err();
    assert!(err.to_string().contains("both training and validation"), "{err}");
}
