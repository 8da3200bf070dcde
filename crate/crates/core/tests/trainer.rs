mod common;

use common::{random_packet, schema};
use packetlm::model::ModelParams;
use packetlm::trainer::{
    adam_step, append_log, initial_checkpoint, lr_at_step, read_log, AdamConfig, AdamState, Checkpoint, CheckpointError, TrainLogRecord,
};
use packetlm::{train, train_with, ModelConfig, PacketCodec, TokenizedPacket, TrainConfig, TrainError, TrainOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(n: usize) -> (PacketCodec, Vec<TokenizedPacket>, TrainConfig) {
    let codec = PacketCodec::new(schema(&[3, 2, 2], 3, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = (0..n).map(|_| random_packet(&codec, &mut rng)).collect();
    let model = ModelConfig::for_schema(&codec.schema, 1, 2, 8);
    let mut cfg = TrainConfig::standard(model, 3e-3);
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 21;
    (codec, data, cfg)
}

fn tiny_params(cfg: &ModelConfig, fill: f64) -> ModelParams<f64> {
    let mut p = ModelParams::zeros(cfg);
    for t in p.tensors_mut() {
        t.fill(fill);
    }
    p
}

#[test]
fn adam_with_constant_gradient_moves_lr_per_step() {
    let (_, _, tc) = setup(1);
    let cfg = tc.model;
    let adam = AdamConfig::default();
    let mut params = tiny_params(&cfg, 0.5);
    let grads = tiny_params(&cfg, -0.2);
    let mut state = AdamState::new(&cfg);
    let lr = 0.01;
    for t in 1..=25 {
        adam_step(&mut params, &grads, &mut state, t, lr, &adam).unwrap();
    }
    // m_hat = g and v_hat = g^2 at every step, so each update is lr * g / (|g| + eps).
    let want = 0.5 + 25.0 * lr * 0.2 / (0.2 + 1e-8);
    for t in params.tensors() {
        assert!(t.data.iter().all(|&x| (x - want).abs() < 1e-12), "{}", t.name);
    }
}

#[test]
fn adam_two_steps_closed_form() {
    let (_, _, tc) = setup(1);
    let cfg = tc.model;
    let adam = AdamConfig {
        beta1: 0.8,
        beta2: 0.95,
        eps: 1e-3,
    };
    let (g1, g2, lr1, lr2) = (0.3, -0.7, 0.1, 0.05);
    let mut params = tiny_params(&cfg, 1.0);
    let mut state = AdamState::new(&cfg);
    adam_step(&mut params, &tiny_params(&cfg, g1), &mut state, 1, lr1, &adam).unwrap();
    adam_step(&mut params, &tiny_params(&cfg, g2), &mut state, 2, lr2, &adam).unwrap();

    let s1 = g1 / (g1.abs() + 1e-3);
    let m2 = 0.8 * 0.2 * g1 + 0.2 * g2;
    let v2 = 0.95 * 0.05 * g1 * g1 + 0.05 * g2 * g2;
    let s2 = (m2 / (1.0 - 0.64)) / ((v2 / (1.0 - 0.9025)).sqrt() + 1e-3);
    let want = 1.0 - lr1 * s1 - lr2 * s2;
    assert!(params.tensors().iter().all(|t| t.data.iter().all(|&x| (x - want).abs() < 1e-12)));
}

#[test]
fn adam_rejects_non_finite_gradients_before_updating() {
    let (_, _, tc) = setup(1);
    let cfg = tc.model;
    let mut params = tiny_params(&cfg, 1.0);
    let before = params.clone();
    let mut grads = tiny_params(&cfg, 0.1);
    grads.w_out.set(0, 1, f64::NAN);
    let mut state = AdamState::new(&cfg);
    let err = adam_step(&mut params, &grads, &mut state, 1, 0.1, &AdamConfig::default()).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteGradient { ref tensor, step: 1, .. } if tensor == "w_out"));
    assert_eq!(params, before);
    assert_eq!(state, AdamState::new(&cfg));
}

#[test]
fn schedule_hits_its_anchor_points() {
    let (_, _, mut cfg) = setup(1);
    cfg.base_lr = 1e-3;
    cfg.warmup_steps = Some(10);
    cfg.min_lr = Some(1e-4);
    let total = 110;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
    assert!(close(lr_at_step(0, &cfg, total), 0.0));
    assert!(close(lr_at_step(5, &cfg, total), 5e-4));
    assert!(close(lr_at_step(10, &cfg, total), 1e-3));
    assert!(close(lr_at_step(60, &cfg, total), 5.5e-4));
    assert!(close(lr_at_step(35, &cfg, total), 1e-4 + 9e-4 * (1.0 + (std::f64::consts::PI / 4.0).cos()) / 2.0));
    assert!(close(lr_at_step(110, &cfg, total), 1e-4));
    for s in 10..110 {
        assert!(lr_at_step(s + 1, &cfg, total) <= lr_at_step(s, &cfg, total));
    }

    cfg.warmup_steps = None;
    cfg.min_lr = None;
    assert_eq!(cfg.warmup_for(200), 10);
    assert!(close(lr_at_step(200, &cfg, 200), 1e-4));
}

#[test]
fn training_lowers_the_loss_and_logs_every_epoch() {
    let (codec, data, cfg) = setup(40);
    let out = train(&data, &codec.schema, &cfg).unwrap();
    assert_eq!(out.log.len(), 3);
    assert_eq!(out.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![10, 20, 30]);
    assert!(out.log[2].nll < out.log[0].nll);
    assert_eq!(out.checkpoint.step, 30);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let (codec, data, cfg) = setup(12);
    let out = train(&data, &codec.schema, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    let bits = |c: &Checkpoint| c.params.tensors().iter().flat_map(|t| t.data.iter().map(|x| x.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&out.checkpoint));
}

#[test]
fn truncated_checkpoint_is_a_corrupt_tensor() {
    let (codec, _, cfg) = setup(1);
    let bytes = initial_checkpoint(&codec.schema, &cfg).to_bytes();
    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 7]).unwrap_err();
    assert!(matches!(err, CheckpointError::CorruptTensor(_)), "{err}");

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::CorruptTensor(m)) if m.contains("checksum")));
}

#[test]
fn other_format_versions_are_refused() {
    let (codec, _, cfg) = setup(1);
    let bytes = initial_checkpoint(&codec.schema, &cfg).to_bytes();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("\"format_version\":1").unwrap() + "\"format_version\":".len();
    let mut edited = bytes.clone();
    edited[at] = b'7';
    assert!(matches!(
        Checkpoint::from_bytes(&edited),
        Err(CheckpointError::VersionMismatch { found: 7, expected: 1 })
    ));
    assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(CheckpointError::Malformed(_))));
}

fn resume_matches_unbroken(stop: u64) {
    let (codec, data, cfg) = setup(18);
    let full = train(&data, &codec.schema, &cfg).unwrap();

    let first = train_with(
        &data,
        &codec.schema,
        &cfg,
        TrainOptions {
            stop_after_step: Some(stop),
            ..Default::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    first.checkpoint.save(&path).unwrap();
    let resumed = train_with(
        &data,
        &codec.schema,
        &cfg,
        TrainOptions {
            resume: Some(Checkpoint::load(&path).unwrap()),
            ..Default::default()
        },
    )
    .unwrap();

    let mut log = first.log.clone();
    log.extend(resumed.log.iter().cloned());
    assert_eq!(log.len(), full.log.len());
    for (a, b) in log.iter().zip(&full.log) {
        assert_eq!(a.epoch, b.epoch);
        assert!((a.nll - b.nll).abs() < 1e-6, "epoch {}: {} vs {}", a.epoch, a.nll, b.nll);
    }
    assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
}

#[test]
fn resume_mid_epoch_matches_unbroken_run() {
    resume_matches_unbroken(7);
}

#[test]
fn resume_at_epoch_boundary_matches_unbroken_run() {
    resume_matches_unbroken(5);
}

#[test]
fn resume_refuses_a_different_config() {
    let (codec, data, cfg) = setup(8);
    let ckpt = initial_checkpoint(&codec.schema, &cfg);
    let mut other = cfg.clone();
    other.base_lr *= 2.0;
    let err = train_with(
        &data,
        &codec.schema,
        &other,
        TrainOptions {
            resume: Some(ckpt),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::InvalidConfig(_)));
}

#[test]
fn nan_parameters_surface_as_non_finite_gradient() {
    let (codec, data, cfg) = setup(8);
    let mut ckpt = initial_checkpoint(&codec.schema, &cfg);
    ckpt.params.final_norm[0] = f32::NAN;
    let err = train_with(
        &data,
        &codec.schema,
        &cfg,
        TrainOptions {
            resume: Some(ckpt),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteGradient { step: 1, epoch: Some(1), .. }), "{err}");
}

#[test]
fn log_lines_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let recs = vec![
        TrainLogRecord {
            epoch: 1,
            step: 10,
            nll: 1.5,
            lr: 1e-3,
            elapsed_secs: 0.25,
        },
        TrainLogRecord {
            epoch: 2,
            step: 20,
            nll: 1.25,
            lr: 5e-4,
            elapsed_secs: 0.5,
        },
    ];
    append_log(&path, &recs[..1]).unwrap();
    append_log(&path, &recs[1..]).unwrap();
    assert_eq!(read_log(&path).unwrap(), recs);
}
