use mocca_core::data::synthetic::{generate, AnomalyDepth, SyntheticConfig};
use mocca_core::data::{ids, labels, stack_images, Sample};
use mocca_core::diffcore::Tensor;
use mocca_core::eval::roc_auc;
use mocca_core::model::{build_autoencoder, lenet_like, Model, PresetParams, SelectorKind};
use mocca_core::objective::{estimate_centroids, BoundaryMode, LayerSet};
use mocca_core::scoring::score_batch;
use mocca_core::training::{
    finetune_oneclass, pretrain_reconstruction, train as fit, train_joint, Regime, Stage, TrainConfig,
};

fn model(seed: u64) -> Model {
    let p = PresetParams {
        base_width: 4,
        code_size: 8,
        kernel: 3,
        residual_blocks: 1,
    };
    let arch = lenet_like(&[16, 16, 1], &p).unwrap();
    let sel = arch.uniform_selectors(SelectorKind::AvgPool).unwrap();
    build_autoencoder(&arch, &sel, seed).unwrap()
}

fn blobs(depth: AnomalyDepth, n_train: usize) -> (Vec<Sample>, Vec<Sample>) {
    let s = generate(&SyntheticConfig {
        depth,
        n_train,
        n_test_normal: 100,
        n_test_anomalous: 100,
        ..Default::default()
    })
    .unwrap();
    (s.train, s.test)
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        stage1_epochs: epochs,
        stage2_epochs: epochs,
        batch_size: 32,
        ..Default::default()
    }
}

fn flat(m: &Model, range: std::ops::Range<usize>) -> Vec<u32> {
    m.params()[range]
        .iter()
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn all(m: &Model) -> Vec<u32> {
    flat(m, 0..m.params().len())
}

fn centroids(m: &Model, data: &[Sample]) -> Vec<mocca_core::objective::Hypersphere> {
    let ls = LayerSet::new(m.tapped_layers()).unwrap();
    estimate_centroids(m, &stack_images(data).unwrap(), &ls, 0.1, 1e-6, 64).unwrap()
}

#[test]
fn constant_images_reconstruct_within_twenty_epochs() {
    let data: Vec<Sample> = (0..64)
        .map(|i| Sample {
            id: format!("c{i}"),
            image: Tensor::full(&[16, 16, 1], 0.5),
            label: 0,
        })
        .collect();
    let mut m = model(0);
    let c = TrainConfig {
        lr_stage1: 1e-2,
        ..cfg(20)
    };
    let log = pretrain_reconstruction(&mut m, &data, &c).unwrap();
    let last = log.epochs.last().unwrap().recon_loss.unwrap();
    assert!(last < 1e-2, "final reconstruction loss {last}");
}

#[test]
fn pretraining_lowers_reconstruction_loss() {
    let (normal, _) = blobs(AnomalyDepth::Highlevel, 128);
    let mut m = model(1);
    let log = pretrain_reconstruction(&mut m, &normal, &cfg(5)).unwrap();
    assert_eq!(log.epochs.len(), 5);
    assert!(log.epochs.iter().all(|e| e.stage == Stage::Pretrain));
    let first = log.epochs[0].recon_loss.unwrap();
    let last = log.epochs[4].recon_loss.unwrap();
    assert!(last <= first, "{first} -> {last}");
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let (normal, _) = blobs(AnomalyDepth::Highlevel, 64);
    let mut m = model(2);
    let before = all(&m);
    let log = pretrain_reconstruction(&mut m, &normal, &cfg(0)).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(all(&m), before);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (normal, _) = blobs(AnomalyDepth::Highlevel, 96);
    let run = || {
        let mut m = model(4);
        let out = fit(&mut m, &normal, &cfg(2)).unwrap();
        (all(&m), out)
    };
    let (pa, a) = run();
    let (pb, b) = run();
    assert_eq!(pa, pb);
    assert_eq!(a.log, b.log);
    assert_eq!(a.spheres, b.spheres);
}

#[test]
fn finetuning_leaves_decoder_and_centroids_alone() {
    let (normal, _) = blobs(AnomalyDepth::Highlevel, 96);
    let mut m = model(5);
    pretrain_reconstruction(&mut m, &normal, &cfg(1)).unwrap();
    let mut spheres = centroids(&m, &normal);
    let dec = flat(&m, m.decoder_params());
    let enc = flat(&m, m.encoder_params());
    let cents: Vec<Vec<f32>> = spheres.iter().map(|s| s.centroid.clone()).collect();
    finetune_oneclass(&mut m, &normal, &mut spheres, &cfg(2)).unwrap();
    assert_eq!(flat(&m, m.decoder_params()), dec);
    assert_ne!(flat(&m, m.encoder_params()), enc);
    let after: Vec<Vec<f32>> = spheres.iter().map(|s| s.centroid.clone()).collect();
    assert_eq!(after, cents);
}

#[test]
fn hard_boundary_keeps_radii_at_zero() {
    let (normal, _) = blobs(AnomalyDepth::Highlevel, 96);
    let mut m = model(6);
    let c = TrainConfig {
        boundary: BoundaryMode::Hard,
        radius_update_every: Some(1),
        ..cfg(2)
    };
    let out = fit(&mut m, &normal, &c).unwrap();
    assert!(out.spheres.iter().all(|s| s.radius_sq == 0.0));
    assert!(out.log.radius_updates.is_empty());
    assert!(out.log.epochs.iter().all(|e| e.radius_sq.values().all(|&r| r == 0.0)));
}

#[test]
fn soft_boundary_learns_positive_radii() {
    let (normal, _) = blobs(AnomalyDepth::Highlevel, 96);
    let mut m = model(7);
    let c = TrainConfig {
        radius_update_every: Some(2),
        ..cfg(2)
    };
    let out = fit(&mut m, &normal, &c).unwrap();
    assert!(!out.log.radius_updates.is_empty());
    assert!(out.spheres.iter().all(|s| s.radius_sq > 0.0), "{:?}", out.spheres);
}

#[test]
fn finetuning_pulls_code_features_toward_the_centroid() {
    let (normal, _) = blobs(AnomalyDepth::Highlevel, 128);
    let mut m = model(8);
    let c = TrainConfig {
        boundary: BoundaryMode::Hard,
        lr_stage2: 1e-3,
        ..cfg(5)
    };
    let out = fit(&mut m, &normal, &c).unwrap();
    let tau: Vec<f64> = out
        .log
        .epochs
        .iter()
        .filter(|e| e.stage == Stage::Finetune)
        .map(|e| e.mean_tau[&3])
        .collect();
    assert!(tau.last() < tau.first(), "{tau:?}");
}

#[test]
fn joint_without_one_class_weight_is_pretraining() {
    let (normal, _) = blobs(AnomalyDepth::Highlevel, 96);
    let c = TrainConfig {
        joint_oc_weight: 0.0,
        ..cfg(2)
    };
    let mut a = model(9);
    let mut spheres = centroids(&a, &normal);
    let ja = train_joint(&mut a, &normal, &mut spheres, &c).unwrap();
    let mut b = model(9);
    let pb = pretrain_reconstruction(&mut b, &normal, &c).unwrap();
    assert_eq!(all(&a), all(&b));
    let ra: Vec<_> = ja.epochs.iter().map(|e| e.recon_loss).collect();
    let rb: Vec<_> = pb.epochs.iter().map(|e| e.recon_loss).collect();
    assert_eq!(ra, rb);
}

#[test]
fn joint_without_reconstruction_weight_is_finetuning() {
    let (normal, _) = blobs(AnomalyDepth::Highlevel, 96);
    let c = TrainConfig {
        joint_recon_weight: 0.0,
        lr_stage2: 1e-3,
        ..cfg(2)
    };
    let mut a = model(10);
    let mut sa = centroids(&a, &normal);
    train_joint(&mut a, &normal, &mut sa, &c).unwrap();
    let mut b = model(10);
    let mut sb = centroids(&b, &normal);
    finetune_oneclass(&mut b, &normal, &mut sb, &c).unwrap();
    assert_eq!(flat(&a, a.encoder_params()), flat(&b, b.encoder_params()));
    assert_eq!(sa, sb);
}

#[test]
fn joint_regime_separates_highlevel_blobs() {
    let (normal, test) = blobs(AnomalyDepth::Highlevel, 256);
    let mut m = model(11);
    let c = TrainConfig {
        regime: Regime::Joint,
        layer_set: Some(LayerSet::new([3]).unwrap()),
        ..cfg(8)
    };
    let out = fit(&mut m, &normal, &c).unwrap();
    let records = score_batch(
        &m,
        &out.spheres,
        &stack_images(&test).unwrap(),
        &ids(&test),
        BoundaryMode::Soft,
        64,
    )
    .unwrap();
    let gamma: Vec<f64> = records.iter().map(|r| r.gamma).collect();
    let (auc, _) = roc_auc(&gamma, &labels(&test)).unwrap();
    assert!(auc >= 0.9, "auc {auc}");
}

#[test]
fn anomalous_training_data_is_rejected() {
    let (_, test) = blobs(AnomalyDepth::Highlevel, 32);
    let mut m = model(12);
    assert!(fit(&mut m, &test, &cfg(1)).is_err());
}
