use std::path::Path;

use ajepa::checkpoint::{self, Checkpoint};
use ajepa::frontend::{log_mel, FrontendConfig, MelSpectrogram};
use ajepa::manifest::{Manifest, ManifestEntry, Split};
use ajepa::model::{tau_schedule, ModelConfig, ParamSet};
use ajepa::synth::{build_corpus, generate_clip, ClipSpec, CorpusConfig, Generator, PitchTaskConfig};
use ajepa::train::{
    adamw_step, epoch_order, lr_schedule, parse_metrics_csv, run_pretraining, train_step, AdamW, Corpus, Moments,
    StepPlan, TrainConfig, TrainState, Trainer,
};
use ajepa::Error;
use ajepa_tensor::Tensor;

fn scalar_set(v: f64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.push("w", Tensor::new([1], vec![v]).unwrap());
    p
}

fn value(p: &ParamSet<f64>) -> f64 {
    p.tensors()[0].data()[0]
}

const OPT: AdamW = AdamW {
    beta1: 0.9,
    beta2: 0.95,
    eps: 1e-8,
    weight_decay: 0.05,
};

#[test]
fn adamw_single_scalar_step() {
    let (p0, g, lr) = (1.0, 0.5, 0.1);
    let mut p = scalar_set(p0);
    let mut mom = Moments::zeros_like(&p);
    adamw_step(&mut p, &[Tensor::new([1], vec![g]).unwrap()], &mut mom, 1, lr, &OPT).unwrap();
    // m = 0.05, v = 0.0125; bias corrections give m_hat = 0.5, v_hat = 0.25.
    let expected = p0 - lr * (0.5 / (0.5 + 1e-8) + 0.05 * p0);
    assert!((value(&p) - expected).abs() < 1e-7);
    assert!((value(&mom.m) - 0.05).abs() < 1e-15);
    assert!((value(&mom.v) - 0.0125).abs() < 1e-15);
}

#[test]
fn adamw_zero_gradient_is_pure_decay() {
    let mut p = scalar_set(2.0);
    let mut mom = Moments::zeros_like(&p);
    adamw_step(&mut p, &[Tensor::new([1], vec![0.0]).unwrap()], &mut mom, 1, 1e-3, &OPT).unwrap();
    assert_eq!(value(&p), 2.0 * (1.0 - 1e-3 * 0.05));
}

#[test]
fn adamw_constant_gradient_steps_approach_lr() {
    let opt = AdamW {
        weight_decay: 0.0,
        ..OPT
    };
    for g in [0.3, -2.0] {
        let mut p = scalar_set(0.0);
        let mut mom = Moments::zeros_like(&p);
        let lr = 1e-3;
        let mut last = 0.0;
        for t in 1..=2000 {
            let before = value(&p);
            adamw_step(&mut p, &[Tensor::new([1], vec![g]).unwrap()], &mut mom, t, lr, &opt).unwrap();
            last = value(&p) - before;
        }
        // Both moments are exactly bias-corrected to g and g^2, so the step
        // is lr * |g| / (|g| + eps), which tends to lr.
        assert_eq!(last.signum(), -g.signum());
        let closed_form = lr * g.abs() / (g.abs() + opt.eps);
        assert!((last.abs() - closed_form).abs() < 1e-15, "{last}");
        assert!((last.abs() - lr).abs() < 1e-7 * lr);
    }
}

#[test]
fn adamw_rejects_bad_inputs() {
    let mut p = scalar_set(1.0);
    let mut mom = Moments::zeros_like(&p);
    let g = Tensor::new([1], vec![1.0]).unwrap();
    assert!(adamw_step(&mut p, std::slice::from_ref(&g), &mut mom, 0, 0.1, &OPT).is_err());
    let wrong = Tensor::new([2], vec![1.0, 1.0]).unwrap();
    assert!(adamw_step(&mut p, &[wrong], &mut mom, 1, 0.1, &OPT).is_err());
}

#[test]
fn learning_rate_schedule() {
    let (base, total) = (3e-4, 2000);
    let warmup = total / 20;
    assert_eq!(lr_schedule(0, base, warmup, total), 0.0);
    assert_eq!(lr_schedule(warmup, base, warmup, total), base);
    assert!(lr_schedule(total, base, warmup, total) < 1e-8 * base);
    let lrs: Vec<f64> = (warmup..=total).map(|s| lr_schedule(s, base, warmup, total)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

fn tone_corpus(n: usize) -> Corpus {
    let cfg = FrontendConfig::desk();
    let mels: Vec<MelSpectrogram> = (0..n)
        .map(|i| {
            let spec = ClipSpec {
                generator: Generator::Tone {
                    f0: 200.0 * 1.3f64.powi(i as i32),
                },
                duration_s: 0.8,
                label: 0,
                seed: i as u64,
                snr_db: Some(20.0),
            };
            log_mel(&generate_clip(&spec).unwrap(), &cfg).unwrap()
        })
        .collect();
    Corpus::from_mels((0..n).map(|i| format!("c{i}")).collect(), mels).unwrap()
}

fn small_config(out: &Path, steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 3,
        checkpoint_every: 3,
        ..TrainConfig::desk(out.join("unused.jsonl"), out)
    }
}

#[test]
fn one_step_applies_the_ema_rule() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 10);
    let mut trainer = Trainer::new(config.clone(), tone_corpus(5)).unwrap();
    let before = trainer.state().params.theta_bar.clone();
    let m = trainer.step().unwrap();
    let tau = tau_schedule(1, &config.ema_schedule()).unwrap();
    assert_eq!(m.tau, tau);
    let s = trainer.state();
    for ((old, new), bar) in before.tensors().iter().zip(s.params.theta.tensors()).zip(s.params.theta_bar.tensors()) {
        for ((o, n), b) in old.data().iter().zip(new.data()).zip(bar.data()) {
            let want = tau * *o as f64 + (1.0 - tau) * *n as f64;
            assert!((*b as f64 - want).abs() < 1e-6);
        }
    }
    assert!(s.theta_moments.m.same_layout(&s.params.theta));
    assert!(s.phi_moments.m.same_layout(&s.params.phi));
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 10);
    let mut trainer = Trainer::new(config.clone(), tone_corpus(4)).unwrap();
    let batch = trainer.next_batch().unwrap();
    let mut state = TrainState::init(&config.model, 0).unwrap();
    state.params.phi.tensors_mut()[0].data_mut()[0] = f32::NAN;
    let err = train_step(&mut state, trainer.model(), &batch, &StepPlan::from_config(&config)).unwrap_err();
    match err {
        Error::Diverged(msg) => {
            assert!(msg.contains("step 1") && msg.contains("seed 0") && msg.contains("(|C|, |T|)"), "{msg}");
        }
        other => panic!("expected divergence, got {other}"),
    }
    assert!(train_step(&mut state, trainer.model(), &[], &StepPlan::from_config(&config)).is_err());
}

fn run_to_end(config: &TrainConfig, corpus: Corpus) -> std::path::PathBuf {
    Trainer::new(config.clone(), corpus).unwrap().run().unwrap()
}

#[test]
fn identical_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = small_config(a.path(), 6);
    let cb = small_config(b.path(), 6);
    let pa = run_to_end(&ca, tone_corpus(5));
    let pb = run_to_end(&cb, tone_corpus(5));
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&ca.metrics_path), read(&cb.metrics_path));
    // Checkpoints embed their own output paths, so compare what they decode to.
    let (ka, kb) = (checkpoint::load(&pa).unwrap(), checkpoint::load(&pb).unwrap());
    assert_eq!(ka.state, kb.state);
    assert_eq!(ka.norm, kb.norm);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 7);
    let full = run_to_end(&config, tone_corpus(5));
    let full_bytes = std::fs::read(&full).unwrap();
    let full_metrics = std::fs::read(&config.metrics_path).unwrap();

    let mid = checkpoint::load(&config.checkpoint_dir.join("step-000003.ckpt")).unwrap();
    std::fs::remove_file(&full).unwrap();
    let mut resumed = Trainer::resume(config.clone(), tone_corpus(5), mid).unwrap();
    assert_eq!(resumed.metrics().len(), 3);
    let again = resumed.run().unwrap();
    assert_eq!(again, full);
    assert_eq!(std::fs::read(&again).unwrap(), full_bytes);
    let metrics = std::fs::read(&config.metrics_path).unwrap();
    assert_eq!(metrics, full_metrics);
    let steps: Vec<u64> = parse_metrics_csv(&String::from_utf8(metrics).unwrap())
        .unwrap()
        .iter()
        .map(|m| m.step)
        .collect();
    assert_eq!(steps, (1..=7).collect::<Vec<_>>());
}

#[test]
fn resume_refuses_a_different_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 3);
    let path = run_to_end(&config, tone_corpus(4));
    let ckpt = checkpoint::load(&path).unwrap();
    let other = TrainConfig {
        base_lr: 1e-3,
        ..config.clone()
    };
    assert!(Trainer::resume(other, tone_corpus(4), ckpt).is_err());
}

#[test]
fn epochs_visit_every_clip_once() {
    for epoch in 0..3 {
        let mut o = epoch_order(9, epoch, 37);
        o.sort_unstable();
        assert_eq!(o, (0..37).collect::<Vec<_>>());
    }
    assert_ne!(epoch_order(9, 0, 37), epoch_order(9, 1, 37));
    assert_eq!(epoch_order(9, 0, 37), epoch_order(9, 0, 37));
}

fn tiny_corpus_config() -> CorpusConfig {
    CorpusConfig {
        pretrain_clips: 6,
        pitch_task: PitchTaskConfig {
            train_per_class: 1,
            test_per_class: 1,
            ..PitchTaskConfig::default()
        },
        ..CorpusConfig::default()
    }
}

#[test]
fn empty_manifest_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("empty.jsonl");
    std::fs::write(&manifest, "").unwrap();
    let config = TrainConfig {
        steps: 2,
        ..TrainConfig::desk(&manifest, dir.path())
    };
    assert!(run_pretraining(&config, None).is_err());
    assert!(!config.checkpoint_dir.exists());
}

#[test]
fn unreadable_clips_are_skipped_up_to_the_limit() {
    let dir = tempfile::tempdir().unwrap();
    let paths = build_corpus(&tiny_corpus_config(), dir.path(), 1).unwrap();
    let mut m = Manifest::load(&paths.pretrain_manifest).unwrap();
    m.entries.push(ManifestEntry {
        clip_id: "missing".into(),
        path: "pretrain/missing.wav".into(),
        label: 0,
        split: Split::Train,
    });
    let broken = dir.path().join("broken.jsonl");
    Manifest::new(m.entries).unwrap().save(&broken).unwrap();
    let fe = FrontendConfig::desk();
    assert_eq!(Corpus::load(&broken, &fe, 1, 2).unwrap().len(), 6);
    assert!(Corpus::load(&broken, &fe, 0, 1).is_err());
}

#[test]
fn pretraining_from_a_manifest_writes_checkpoints_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let paths = build_corpus(&tiny_corpus_config(), dir.path(), 2).unwrap();
    let config = TrainConfig {
        steps: 4,
        batch_size: 2,
        checkpoint_every: 2,
        ..TrainConfig::desk(&paths.pretrain_manifest, dir.path().join("run"))
    };
    let last = run_pretraining(&config, None).unwrap();
    assert!(last.ends_with("step-000004.ckpt"));
    assert!(config.checkpoint_dir.join("step-000002.ckpt").exists());
    let text = std::fs::read_to_string(&config.metrics_path).unwrap();
    assert!(text.starts_with("step,loss,lr,tau,grad_norm\n"));
    assert_eq!(parse_metrics_csv(&text).unwrap().len(), 4);
    let leftovers: Vec<_> = std::fs::read_dir(&config.checkpoint_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

fn sample_checkpoint() -> Checkpoint {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 2);
    let mut trainer = Trainer::new(config.clone(), tone_corpus(3)).unwrap();
    trainer.step().unwrap();
    Checkpoint {
        state: trainer.state().clone(),
        config,
        norm: trainer.norm_stats(),
    }
}

fn with_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + len]).unwrap();
    edit(&mut header);
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..12].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[20 + len..]);
    out
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let ckpt = sample_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    checkpoint::save(&path, &ckpt).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(checkpoint::encode(&back), std::fs::read(&path).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = checkpoint::encode(&sample_checkpoint());
    let p = Path::new("x.ckpt");

    let count = with_header(&bytes, |h| {
        let n = h["tensor_count"].as_u64().unwrap();
        h["tensor_count"] = (n + 1).into();
    });
    let err = checkpoint::decode(&count, p).unwrap_err().to_string();
    assert!(err.contains("declares") && err.contains("tensors"), "{err}");

    let truncated = &bytes[..bytes.len() - 10];
    let err = checkpoint::decode(truncated, p).unwrap_err().to_string();
    assert!(err.contains("truncated") && err.contains("offset"), "{err}");

    let mut version = bytes.clone();
    version[8] = 9;
    let err = checkpoint::decode(&version, p).unwrap_err().to_string();
    assert!(err.contains("version 9"), "{err}");

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(checkpoint::decode(&magic, p).is_err());
    assert!(checkpoint::decode(&bytes[..5], p).is_err());
}

#[test]
fn desk_checkpoint_is_small() {
    let model = ModelConfig::desk();
    let state = TrainState::init(&model, 0).unwrap();
    let theta = state.params.theta.numel();
    let phi = state.params.phi.numel();
    // theta, theta_bar and phi plus two moment buffers each for theta and
    // phi.
    let floats = 4 * theta + 3 * phi;
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint {
        state,
        config: TrainConfig::desk("m.jsonl", dir.path()),
        norm: ajepa::frontend::NormStats { mean: 0.0, std: 1.0 },
    };
    let size = checkpoint::encode(&ckpt).len();
    assert!(size >= 4 * floats && size < 4 * floats + 64 * 1024);
    assert!(size < 20 * 1024 * 1024, "{size} bytes");
}
