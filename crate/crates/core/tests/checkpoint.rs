use mocca_core::data::synthetic::{generate, SyntheticConfig};
use mocca_core::data::{ids, stack_images};
use mocca_core::model::{build_autoencoder, lenet_like, PresetParams, SelectorKind};
use mocca_core::objective::BoundaryMode;
use mocca_core::scoring::score_batch;
use mocca_core::training::{from_bytes, restore, save_checkpoint, to_bytes, train, TrainConfig, MAGIC};
use mocca_core::Error;

struct Trained {
    model: mocca_core::model::Model,
    spheres: Vec<mocca_core::objective::Hypersphere>,
    cfg: TrainConfig,
}

fn trained() -> Trained {
    let p = PresetParams {
        base_width: 4,
        code_size: 8,
        kernel: 3,
        residual_blocks: 1,
    };
    let arch = lenet_like(&[16, 16, 1], &p).unwrap();
    let sel = arch.uniform_selectors(SelectorKind::AvgPool).unwrap();
    let mut model = build_autoencoder(&arch, &sel, 3).unwrap();
    let data = generate(&SyntheticConfig {
        n_train: 64,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        stage1_epochs: 1,
        stage2_epochs: 2,
        batch_size: 32,
        radius_update_every: Some(1),
        ..Default::default()
    };
    let out = train(&mut model, &data.train, &cfg).unwrap();
    Trained {
        model,
        spheres: out.spheres,
        cfg,
    }
}

fn is_checkpoint_error(r: Result<mocca_core::training::Checkpoint, Error>) -> String {
    match r {
        Err(Error::Checkpoint(m)) => m,
        Err(e) => panic!("wrong error kind: {e}"),
        Ok(_) => panic!("corrupted checkpoint accepted"),
    }
}

#[test]
fn restored_checkpoint_scores_bit_identically() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mocc");
    save_checkpoint(&path, &t.model, &t.spheres, &t.cfg).unwrap();
    let ck = restore(&path).unwrap();
    assert_eq!(ck.spheres, t.spheres);
    assert_eq!(ck.config, t.cfg);
    assert!(ck.spheres.iter().all(|s| s.radius_sq > 0.0));
    assert_eq!(ck.layer_set().to_vec(), [0, 1, 2, 3]);

    let probe = generate(&SyntheticConfig {
        n_train: 8,
        seed: 99,
        ..Default::default()
    })
    .unwrap()
    .train;
    let images = stack_images(&probe).unwrap();
    let a = score_batch(&t.model, &t.spheres, &images, &ids(&probe), BoundaryMode::Soft, 8).unwrap();
    let b = score_batch(&ck.model, &ck.spheres, &images, &ids(&probe), BoundaryMode::Soft, 8).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.gamma.to_bits(), y.gamma.to_bits(), "{}", x.sample_id);
        assert_eq!(x.tau, y.tau);
    }
    assert_eq!(to_bytes(&ck.model, &ck.spheres, &ck.config).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn stripped_decoder_survives_the_round_trip() {
    let mut t = trained();
    t.model.strip_decoder();
    let ck = from_bytes(&to_bytes(&t.model, &t.spheres, &t.cfg).unwrap()).unwrap();
    assert!(!ck.model.has_decoder());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let t = trained();
    let good = to_bytes(&t.model, &t.spheres, &t.cfg).unwrap();
    assert_eq!(&good[..4], MAGIC);

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(is_checkpoint_error(from_bytes(&bad)).contains("magic"));

    let mut bad = good.clone();
    bad[4] = 0xff;
    assert!(is_checkpoint_error(from_bytes(&bad)).contains("version"));

    for cut in [3, 10, good.len() / 2, good.len() - 1] {
        is_checkpoint_error(from_bytes(&good[..cut]));
    }

    let mut bad = good.clone();
    bad.push(0);
    assert!(is_checkpoint_error(from_bytes(&bad)).contains("trailing"));
}
