use apn_core::data::{generate_synthetic, DatasetBundle, Split, SynthConfig};
use apn_core::eval::zsl_eval;
use apn_core::model::{load_checkpoint, save_checkpoint, ModelParams};
use apn_core::train::{architecture_for, grid_search, train, train_from, TrainConfig};
use apn_core::Error;
use tempfile::TempDir;

/// Two classes, eight images each, 16-pixel images.
fn micro_bundle() -> DatasetBundle {
    generate_synthetic(&SynthConfig {
        n_classes: 2,
        n_unseen: 0,
        n_val: 0,
        k_attrs: 2,
        l_groups: 1,
        image_size: 16,
        imgs_per_class: 8,
        seed: 7,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_bundle(n_val: usize) -> DatasetBundle {
    generate_synthetic(&SynthConfig {
        n_classes: 9,
        n_unseen: 2,
        n_val,
        k_attrs: 8,
        l_groups: 4,
        image_size: 32,
        imgs_per_class: 10,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed: 7,
        f64: true,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_the_initialisation() {
    let b = micro_bundle();
    let cfg = quick(0);
    let init = ModelParams::<f64>::init(architecture_for(&b, &cfg).unwrap(), cfg.seed);
    let (params, log) = train_from(&b, &cfg, init.clone()).unwrap();
    assert_eq!(params, init);
    assert!(log.records.is_empty());
}

#[test]
fn micro_instance_classification_loss_decreases() {
    let b = micro_bundle();
    let (params, log) = train::<f64>(&b, &quick(50)).unwrap();
    assert_eq!(log.records.len(), 50);
    let cls: Vec<f64> = log.records.iter().map(|r| r.losses.cls).collect();
    for w in cls[..5].windows(2) {
        assert!(w[1] < w[0], "l_cls not decreasing: {:?}", &cls[..5]);
    }
    assert!(params.all_finite());
    assert!(log
        .records
        .iter()
        .all(|r| (r.losses.total - r.losses.weighted_sum()).abs() < 1e-6));
}

#[test]
fn base_model_leaves_prototypes_untouched() {
    let b = micro_bundle();
    let cfg = quick(3).base_only();
    let init = ModelParams::<f64>::init(architecture_for(&b, &cfg).unwrap(), cfg.seed);
    let (params, _) = train_from(&b, &cfg, init.clone()).unwrap();
    assert_eq!(params.p, init.p);
    assert_ne!(params.v, init.v);
}

#[test]
fn learning_rate_follows_the_step_schedule() {
    let b = micro_bundle();
    let cfg = TrainConfig {
        lr_decay_every: 2,
        ..quick(5)
    };
    let (_, log) = train::<f64>(&b, &cfg).unwrap();
    let lrs: Vec<f64> = log.records.iter().map(|r| r.lr).collect();
    let want = [1.0, 1.0, 0.9, 0.9, 0.81].map(|f| f * cfg.lr);
    for (a, b) in lrs.iter().zip(want) {
        assert!((a - b).abs() < 1e-15, "{lrs:?}");
    }
    let tsv = log.to_tsv();
    assert!(tsv.starts_with("epoch\tlr\tl_cls\tl_reg\tl_ad\tl_cpt\ttotal\tval_zsl\tseconds\n"));
    assert_eq!(tsv.lines().count(), 6);
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let b = micro_bundle();
    let cfg = TrainConfig {
        lr: 1e12,
        beta1: 0.0,
        ..quick(20)
    };
    match train::<f64>(&b, &cfg) {
        Err(Error::Divergence { .. }) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok((p, _)) => assert!(
            p.all_finite(),
            "non-finite parameters returned without error"
        ),
    }
}

#[test]
fn checkpoint_reload_evaluates_identically() {
    let b = small_bundle(0);
    let cfg = quick(1);
    let (params, _) = train::<f64>(&b, &cfg).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.apn");
    save_checkpoint(&params, &cfg.to_text(), &path).unwrap();
    let (back, text) = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(back, params);
    assert_eq!(TrainConfig::from_text(&text, &path).unwrap(), cfg);
    let part = b.partition();
    let ids = b.classes.ids(Split::Unseen);
    let lc = cfg.loss_config();
    assert_eq!(
        zsl_eval(&params, &b, &part.unseen, &ids, &lc).unwrap(),
        zsl_eval(&back, &b, &part.unseen, &ids, &lc).unwrap()
    );
}

#[test]
fn grid_search_examples() {
    let b = small_bundle(2);
    let base = TrainConfig {
        zoom: false,
        ..quick(1)
    };
    let single = grid_search::<f64>(&b, &base, &[0.05], &[0.3]).unwrap();
    assert_eq!((single.best.lambda1, single.best.gamma), (0.05, 0.3));
    assert_eq!(single.rows.len(), 1);

    let two = grid_search::<f64>(&b, &base, &[0.01, 0.1], &[0.0, 0.5]).unwrap();
    assert!([0.01, 0.1].contains(&two.best.lambda1));
    assert_eq!(two.rows.len(), 4);
    assert_eq!(two.to_tsv().lines().count(), 5);

    assert!(grid_search::<f64>(&b, &base, &[], &[0.1]).is_err());
    let no_val = small_bundle(0);
    assert!(grid_search::<f64>(&no_val, &base, &[0.05], &[0.1]).is_err());
    let one_val = small_bundle(1);
    assert!(grid_search::<f64>(&one_val, &base, &[0.05], &[0.1]).is_ok());
}
