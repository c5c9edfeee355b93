mod common;

use brnet::dataset::{load_dataset, save_dataset};
use brnet::detector::ProposalMode;
use brnet::harness::{load_config, Overrides};
use brnet::synth::AugmentOp;
use brnet::train::{synthesize, TrainConfig, Trainer};

#[test]
fn dataset_round_trips_through_disk() {
    let cfg = common::tiny_config();
    let (train, _) = synthesize(&cfg.data, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&train, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), train.len());
    for (a, b) in train.iter().zip(&back) {
        assert_eq!(a.instances, b.instances);
        // images are quantised to 16 bits on disk
        let worst = a.image.pixels.iter().zip(&b.image.pixels).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 65535.0 + 1e-12);
    }
}

#[test]
fn splits_are_disjoint_and_reproducible() {
    let cfg = common::tiny_config();
    let (train, test) = synthesize(&cfg.data, 1).unwrap();
    let (train2, _) = synthesize(&cfg.data, 3).unwrap();
    assert_eq!(train, train2);
    assert!(test.iter().all(|t| !train.contains(t)));
}

#[test]
fn seed_override_reseeds_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, common::tiny_config().to_toml()).unwrap();
    let cfg = load_config(
        Some(&path),
        Overrides {
            seed: Some(99),
            proposal_mode: Some(ProposalMode::Rpn),
        },
    )
    .unwrap();
    assert_eq!((cfg.seed, cfg.data.scene.seed), (99, 99));
    assert_eq!(cfg.proposal_mode, ProposalMode::Rpn);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = common::tiny_config();
    let mut bad = Vec::new();
    let mut c = base.clone();
    c.train.warmup_iters = c.train.total_iters;
    bad.push(c);
    let mut c = base.clone();
    c.train.lr_final = 1.0;
    bad.push(c);
    let mut c = base.clone();
    c.train.augment = vec![AugmentOp::Crop];
    bad.push(c);
    let mut c = base.clone();
    c.data.scene.image_size = (80, 64);
    bad.push(c);
    let mut c = base.clone();
    c.toggles = Some(brnet::train::Toggles {
        b_o: false,
        ..Default::default()
    });
    bad.push(c);
    for c in bad {
        assert!(c.validate().is_err());
        assert!(TrainConfig::from_toml(&c.to_toml()).is_err());
    }
    assert!(TrainConfig::from_toml(&base.to_toml()).is_ok());
}

#[test]
fn augmented_training_is_deterministic() {
    let mut cfg = common::tiny_config();
    cfg.train.augment = vec![AugmentOp::Hflip, AugmentOp::Rotate];
    let (scenes, _) = synthesize(&cfg.data, 1).unwrap();
    let run = || {
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let mut log = Vec::new();
        t.fit(&scenes, &mut log, None).unwrap();
        log
    };
    assert_eq!(run(), run());
}

#[test]
fn disabled_heads_report_zero_terms() {
    let mut cfg = common::tiny_config();
    cfg.toggles = Some(brnet::train::Toggles {
        b_o: false,
        b_n: false,
        uam: false,
        l_cons: false,
        ..Default::default()
    });
    let (scenes, _) = synthesize(&cfg.data, 1).unwrap();
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let hist = t.fit(&scenes, &mut std::io::sink(), None).unwrap();
    assert!(hist.iter().all(|r| r.losses.l_dec == 0.0 && r.losses.l_rmask == 0.0 && r.losses.l_cons == 0.0));
    assert!(t.model.bilayer.is_none() && t.model.recombine.is_none());
}
