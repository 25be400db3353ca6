//! End-to-end behaviour of the joint training loop on a small configuration.

use std::path::PathBuf;

use shape_transfer::checkpoint;
use shape_transfer::data::{Dataset, Sample};
use shape_transfer::losses::LossWeights;
use shape_transfer::manifest::Domain;
use shape_transfer::nets::{ArchConfig, ModelBundle};
use shape_transfer::phantom::{generate_sample, PhantomSpec};
use shape_transfer::train::{run_mode, run_session, CheckpointSink, GanSession, Mode, TrainConfig, TrainingLog};

fn arch() -> ArchConfig {
    ArchConfig {
        image_size: 32,
        base_channels: 2,
        n_residual_blocks: 1,
        n_discriminator_layers: 2,
        n_classes: 4,
        segmentor_depth: 2,
    }
}

fn dataset(n: u32, domain: Domain, seed: u64) -> Dataset {
    let spec = PhantomSpec { image_size: 32, ..PhantomSpec::default() };
    let samples = (0..n)
        .map(|i| {
            let s = generate_sample(&spec, domain, seed + i as u64).unwrap();
            Sample::new(s.image, Some(s.mask), i, 0).unwrap()
        })
        .collect();
    Dataset::from_samples(samples, PathBuf::from(domain.to_string())).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr_gan: 1e-3,
        lr_seg: 1e-3,
        checkpoint_every: 0,
        pretrain_epochs: 1,
        post_seg_epochs: 1,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn run(c: &TrainConfig, source: &Dataset, target: &Dataset) -> (GanSession<f64>, TrainingLog) {
    let bundle = ModelBundle::init(&arch(), c.seed).unwrap();
    let mut s = GanSession::new(bundle, c.clone()).unwrap();
    let log = run_session(&mut s, source, target, &CheckpointSink::default()).unwrap();
    (s, log)
}

#[test]
fn discriminators_improve_against_frozen_generators() {
    let (source, target) = (dataset(8, Domain::Source, 10), dataset(8, Domain::Target, 20));
    let c = TrainConfig {
        lr_gan: 0.0,
        lr_disc: Some(1e-3),
        weights: LossWeights { lambda_cyc: 0.0, lambda_shape: 0.0 },
        ..cfg(100)
    };
    let before = ModelBundle::<f64>::init(&arch(), c.seed).unwrap().fingerprints();
    let (s, log) = run(&c, &source, &target);
    assert_eq!(s.bundle.step, 200);
    let after = s.bundle.fingerprints();
    assert_eq!(before[..2], after[..2], "generators moved");
    assert_eq!(before[4], after[4], "segmentor moved");
    assert_ne!(before[2], after[2]);
    let first = log.epoch_means.first().unwrap();
    let last = log.epoch_means.last().unwrap();
    assert!(last.l_gan1 > first.l_gan1, "{} -> {}", first.l_gan1, last.l_gan1);
    assert!(last.l_gan2 > first.l_gan2, "{} -> {}", first.l_gan2, last.l_gan2);
    assert!(log.rows.iter().all(|r| r.report.l_shape == 0.0));
}

#[test]
fn identical_configs_give_identical_logs() {
    let (source, target) = (dataset(6, Domain::Source, 30), dataset(5, Domain::Target, 40));
    let (a, la) = run(&cfg(2), &source, &target);
    let (b, lb) = run(&cfg(2), &source, &target);
    assert_eq!(la.csv(), lb.csv());
    assert_eq!(a.bundle.fingerprints(), b.bundle.fingerprints());
    assert!(la.rows.iter().all(|r| r.wall_time_s == 0.0));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (source, target) = (dataset(6, Domain::Source, 50), dataset(7, Domain::Target, 60));
    let (full, full_log) = run(&cfg(3), &source, &target);

    let (half, half_log) = run(&cfg(1), &source, &target);
    let mut ck = half.checkpoint();
    ck.config.epochs = 3;
    let bytes = checkpoint::to_bytes(&ck);
    let mut resumed = GanSession::from_checkpoint(checkpoint::from_bytes::<f64>(&bytes).unwrap()).unwrap();
    let rest = run_session(&mut resumed, &source, &target, &CheckpointSink::default()).unwrap();

    let joined: Vec<String> = half_log.rows.iter().chain(&rest.rows).map(|r| r.csv_line()).collect();
    let straight: Vec<String> = full_log.rows.iter().map(|r| r.csv_line()).collect();
    assert_eq!(joined, straight);
    assert_eq!(resumed.bundle.fingerprints(), full.bundle.fingerprints());
    assert_eq!(resumed.opt, full.opt);
}

#[test]
fn checkpoints_on_disk_resume_bit_exactly() {
    let (source, target) = (dataset(4, Domain::Source, 70), dataset(4, Domain::Target, 80));
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig { checkpoint_every: 1, ..cfg(2) };
    let bundle = ModelBundle::<f32>::init(&arch(), c.seed).unwrap();
    let mut s = GanSession::new(bundle, c.clone()).unwrap();
    let log = run_session(&mut s, &source, &target, &CheckpointSink::to(dir.path())).unwrap();
    assert!(dir.path().join("epoch_0001.ckpt").exists());
    let ck = checkpoint::load::<f32>(&dir.path().join("epoch_0001.ckpt")).unwrap();
    assert_eq!(ck.epoch, 1);
    let mut resumed = GanSession::from_checkpoint(ck).unwrap();
    let rest = run_session(&mut resumed, &source, &target, &CheckpointSink::default()).unwrap();
    let tail: Vec<_> = log.rows.iter().filter(|r| r.epoch == 1).map(|r| r.csv_line()).collect();
    assert_eq!(rest.rows.iter().map(|r| r.csv_line()).collect::<Vec<_>>(), tail);
    let last = checkpoint::load::<f32>(&dir.path().join("epoch_0002.ckpt")).unwrap();
    assert_eq!(last.bundle, resumed.bundle);
}

#[test]
fn every_mode_leaves_target_masks_unread() {
    let (source, target) = (dataset(4, Domain::Source, 90), dataset(4, Domain::Target, 100));
    for mode in Mode::ALL {
        let out = run_mode::<f32>(mode, &source, &target, &arch(), &cfg(1), &CheckpointSink::default()).unwrap();
        assert_eq!(out.target_mask_reads, 0, "{mode:?}");
        match mode {
            Mode::Unet => assert!(out.gan_log.is_none()),
            Mode::Noshape => {
                let log = out.gan_log.unwrap();
                assert!(log.rows.iter().all(|r| r.report.l_shape == 0.0));
                assert_eq!(log.audit.s_steps, 0);
                assert_eq!(out.post_log.len(), 1);
            }
            Mode::Shapetransfer => {
                let log = out.gan_log.unwrap();
                assert_eq!(log.audit.s_steps, log.audit.g_steps);
                assert!(log.rows.iter().all(|r| r.report.l_shape > 0.0));
            }
        }
    }
}

#[test]
fn sessions_reject_mismatched_image_sizes() {
    let source = dataset(4, Domain::Source, 1);
    let spec = PhantomSpec { image_size: 48, ..PhantomSpec::default() };
    let s = generate_sample(&spec, Domain::Target, 3).unwrap();
    let target = Dataset::from_samples(vec![Sample::new(s.image, None, 0, 0).unwrap()], PathBuf::from("t")).unwrap();
    let mut session = GanSession::new(ModelBundle::<f32>::init(&arch(), 0).unwrap(), cfg(1)).unwrap();
    let err = run_session(&mut session, &source, &target, &CheckpointSink::default()).unwrap_err();
    assert!(err.to_string().contains("48"), "{err}");
}
