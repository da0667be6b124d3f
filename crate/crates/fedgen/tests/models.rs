//! Architecture-level tests: parameter/FLOP budgets, deterministic
//! initialization, checkpoint round trips, and live conditioning.

use candle_core::{Device, Tensor};
use fedgen::models::checkpoint::{ArchConfig, ModelCheckpoint, TrainingMeta};
use fedgen::models::classifier::{build_classifier, ClassifierConfig};
use fedgen::models::count_flops;
use fedgen::models::denoiser::{build_denoiser, DenoiserConfig};

fn within(value: f64, target: f64, tolerance: f64) -> bool {
    (value - target).abs() / target <= tolerance
}

#[test]
fn default_denoiser_parameter_budget() {
    let cfg = DenoiserConfig::default_budget(1, 10, 1000);
    let model = build_denoiser(&cfg, 0).unwrap();
    let params = model.store().param_count() as f64;
    assert!(
        within(params, 5.81e6, 0.10),
        "default denoiser has {params} parameters, budget 5.81M ±10%"
    );
}

#[test]
fn small_denoiser_parameter_budget() {
    let cfg = DenoiserConfig::small_budget(1, 10, 1000);
    let model = build_denoiser(&cfg, 0).unwrap();
    let params = model.store().param_count() as f64;
    assert!(
        within(params, 1.46e6, 0.10),
        "small denoiser has {params} parameters, budget 1.46M ±10%"
    );
}

#[test]
fn classifier_parameter_budget() {
    let cfg = ClassifierConfig::resnet16(1, 10);
    let model = build_classifier(&cfg, 0).unwrap();
    let params = model.store().param_count() as f64;
    assert!(
        within(params, 6.44e6, 0.10),
        "classifier has {params} parameters, budget 6.44M ±10%"
    );
}

#[test]
fn flop_budgets() {
    let dn = ArchConfig::Denoiser(DenoiserConfig::default_budget(1, 10, 1000));
    let small = ArchConfig::Denoiser(DenoiserConfig::small_budget(1, 10, 1000));
    let cl = ArchConfig::Classifier(ClassifierConfig::resnet16(1, 10));
    let f_dn = count_flops(&dn, (32, 32));
    let f_small = count_flops(&small, (32, 32));
    let f_cl = count_flops(&cl, (32, 32));
    assert!(within(f_dn, 301.14, 0.15), "default denoiser {f_dn} MFLOPs vs 301.14 ±15%");
    assert!(within(f_small, 77.43, 0.15), "small denoiser {f_small} MFLOPs vs 77.43 ±15%");
    assert!(within(f_cl, 479.92, 0.15), "classifier {f_cl} MFLOPs vs 479.92 ±15%");
}

#[test]
fn same_seed_same_init_different_seed_different() {
    let cfg = DenoiserConfig::tiny(1, 2, 4);
    let a = build_denoiser(&cfg, 42).unwrap().store().export_named().unwrap();
    let b = build_denoiser(&cfg, 42).unwrap().store().export_named().unwrap();
    let c = build_denoiser(&cfg, 43).unwrap().store().export_named().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn denoiser_checkpoint_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DenoiserConfig::tiny(1, 3, 8);
    let model = build_denoiser(&cfg, 5).unwrap();
    let ckpt = ModelCheckpoint::from_denoiser(
        &model,
        TrainingMeta {
            epochs: 7,
            seed: 5,
            ledger: None,
        },
    )
    .unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = ModelCheckpoint::load(dir.path()).unwrap();
    assert_eq!(back.arch, ckpt.arch);
    assert_eq!(back.meta, ckpt.meta);
    for ((n1, d1, s1), (n2, d2, s2)) in ckpt.params.iter().zip(&back.params) {
        assert_eq!(n1, n2);
        assert_eq!(s1, s2);
        assert_eq!(
            d1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            d2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    // restored model produces identical outputs
    let restored = back.into_denoiser().unwrap();
    let x = Tensor::zeros((2, 1, 8, 8), candle_core::DType::F32, &Device::Cpu).unwrap();
    let y1 = model
        .forward(&x, &[0, 1], &[1, 4])
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap();
    let y2 = restored
        .forward(&x, &[0, 1], &[1, 4])
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap();
    assert_eq!(y1, y2);
}

#[test]
fn checkpoint_type_mismatch_rejected() {
    let cfg = ClassifierConfig::tiny(1, 2);
    let model = build_classifier(&cfg, 0).unwrap();
    let ckpt = ModelCheckpoint::from_classifier(&model, TrainingMeta::default()).unwrap();
    assert!(ckpt.into_denoiser().is_err());
}

#[test]
fn denoiser_output_finite_and_shaped() {
    let cfg = DenoiserConfig::tiny(1, 2, 8);
    let model = build_denoiser(&cfg, 1).unwrap();
    let x = Tensor::rand(-1.0f32, 1.0, (3, 1, 8, 8), &Device::Cpu).unwrap();
    let y = model.forward(&x, &[0, 1, 0], &[1, 5, 8]).unwrap();
    assert_eq!(y.dims(), &[3, 1, 8, 8]);
    assert!(y
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap()
        .iter()
        .all(|v| v.is_finite()));
}

#[test]
fn conditioning_is_live() {
    // Both the class label and the timestep must change the output.
    let cfg = DenoiserConfig::tiny(1, 2, 8);
    let model = build_denoiser(&cfg, 2).unwrap();
    let x = Tensor::rand(-1.0f32, 1.0, (1, 1, 8, 8), &Device::Cpu).unwrap();
    let base = model.forward(&x, &[0], &[4]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let other_class = model.forward(&x, &[1], &[4]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let other_time = model.forward(&x, &[0], &[8]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_ne!(base, other_class);
    assert_ne!(base, other_time);
}

#[test]
fn denoiser_rejects_bad_timesteps_and_batch() {
    let cfg = DenoiserConfig::tiny(1, 2, 8);
    let model = build_denoiser(&cfg, 3).unwrap();
    let x = Tensor::zeros((1, 1, 8, 8), candle_core::DType::F32, &Device::Cpu).unwrap();
    assert!(model.forward(&x, &[0], &[0]).is_err());
    assert!(model.forward(&x, &[0], &[9]).is_err());
    assert!(model.forward(&x, &[0, 1], &[1, 1]).is_err());
}

#[test]
fn classifier_scores_shape() {
    let cfg = ClassifierConfig::tiny(1, 4);
    let model = build_classifier(&cfg, 0).unwrap();
    let x = Tensor::rand(0.0f32, 1.0, (5, 1, 8, 8), &Device::Cpu).unwrap();
    let scores = model.forward(&x).unwrap();
    assert_eq!(scores.dims(), &[5, 4]);
    let preds = model.predict(&x).unwrap();
    assert_eq!(preds.len(), 5);
    assert!(preds.iter().all(|&p| p < 4));
}
