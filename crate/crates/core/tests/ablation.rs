use mocca_core::data::synthetic::{generate, AnomalyDepth, SyntheticConfig};
use mocca_core::eval::{ablation_sweep, run_cell, run_cell_probed, AblationSetup, Metric};
use mocca_core::model::{lenet_like, PresetParams, SelectorKind};
use mocca_core::objective::LayerSet;
use mocca_core::training::TrainConfig;

fn with_setup(f: impl FnOnce(&AblationSetup<'_>)) {
    let p = PresetParams {
        base_width: 4,
        code_size: 8,
        kernel: 3,
        residual_blocks: 1,
    };
    let arch = lenet_like(&[16, 16, 1], &p).unwrap();
    let selectors = arch.uniform_selectors(SelectorKind::AvgPool).unwrap();
    let data = generate(&SyntheticConfig {
        depth: AnomalyDepth::Highlevel,
        n_train: 96,
        n_test_normal: 40,
        n_test_anomalous: 40,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        stage1_epochs: 2,
        stage2_epochs: 2,
        batch_size: 32,
        ..Default::default()
    };
    f(&AblationSetup {
        arch: &arch,
        selectors: &selectors,
        cfg: &cfg,
        train: &data.train,
        test: &data.test,
        metric: Metric::Auc,
    });
}

#[test]
fn sweep_rows_follow_subsets_and_ignore_thread_count() {
    with_setup(|setup| {
        let subsets = [LayerSet::new([3]).unwrap(), LayerSet::new([2, 3]).unwrap()];
        let one = ablation_sweep(setup, &subsets, &[0, 1], 1).unwrap();
        let two = ablation_sweep(setup, &subsets, &[0, 1], 2).unwrap();
        assert_eq!(one, two);
        assert_eq!(one.len(), 2);
        assert_eq!(one[0].layer_subset, subsets[0]);
        assert_eq!(one[0].values.len(), 2);
        assert_eq!(one[0].values[0], run_cell(setup, &subsets[0], 0).unwrap().1);
    });
}

#[test]
fn single_seed_rows_have_zero_spread() {
    with_setup(|setup| {
        let rows = ablation_sweep(setup, &[LayerSet::new([3]).unwrap()], &[4], 1).unwrap();
        assert_eq!(rows[0].seed_std, 0.0);
        assert_eq!(rows[0].seed_mean, rows[0].values[0]);
    });
}

#[test]
fn probing_the_trained_set_matches_the_plain_cell() {
    with_setup(|setup| {
        let ls = LayerSet::new([2, 3]).unwrap();
        let (plain, _) = run_cell(setup, &ls, 3).unwrap();
        let probed = run_cell_probed(setup, &ls, &ls, 3).unwrap();
        assert_eq!(plain, probed);
        let wider = run_cell_probed(setup, &LayerSet::new([3]).unwrap(), &ls, 3).unwrap();
        assert!(wider.iter().all(|r| r.tau.keys().copied().eq([2, 3])));
    });
}
