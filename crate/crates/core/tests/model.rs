use ajepa::frontend::MelSpectrogram;
use ajepa::mask::{patchify, sample_unstructured, MaskSpec, PatchGrid, StrategyKind};
use ajepa::model::{
    batch_gradients, encode, forward_training_step, jepa_loss, predict, sinusoidal_pos_embed, step_gradients,
    Indices, LossKind, Model, ModelConfig, ModelParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn wide_grid_config() -> ModelConfig {
    ModelConfig {
        grid_cols: 13,
        ..ModelConfig::desk()
    }
}

fn random_grid(cfg: &ModelConfig, seed: u64) -> PatchGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.grid_rows * cfg.patch_side, cfg.grid_cols * cfg.patch_side);
    let values = (0..h * w).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    patchify(&MelSpectrogram::new(h, w, values).unwrap(), cfg.patch_side).unwrap()
}

fn setup(cfg: &ModelConfig, seed: u64) -> (Model<f32>, ModelParams<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (Model::new(cfg).unwrap(), ModelParams::init(cfg, &mut rng).unwrap())
}

#[test]
fn positional_codes_are_pairwise_distinct() {
    let t = sinusoidal_pos_embed(5, 13, 64).unwrap();
    for a in 0..65 {
        for b in a + 1..65 {
            let differs = t.row(a).iter().zip(t.row(b)).any(|(x, y)| (x - y).abs() > 1e-9);
            assert!(differs, "positions {a} and {b} collide");
        }
    }
    assert_eq!(t, sinusoidal_pos_embed(5, 13, 64).unwrap());
}

#[test]
fn encoder_shapes() {
    let cfg = wide_grid_config();
    let (model, params) = setup(&cfg, 0);
    let grid = random_grid(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mask = sample_unstructured(5, 13, 0.7, &mut rng).unwrap();
    assert_eq!(mask.context().len(), 19);
    let z = encode(&model, &params.theta, &grid, Indices::Subset(mask.context())).unwrap();
    assert_eq!(z.shape(), &[19, 64]);
    let all = encode(&model, &params.theta, &grid, Indices::All).unwrap();
    assert_eq!(all.shape(), &[65, 64]);
    assert!(encode(&model, &params.theta, &grid, Indices::Subset(&[])).is_err());
    assert!(encode(&model, &params.theta, &random_grid(&ModelConfig::desk(), 0), Indices::All).is_err());
}

#[test]
fn permuting_indices_permutes_rows() {
    let cfg = wide_grid_config();
    let (model, params) = setup(&cfg, 3);
    let grid = random_grid(&cfg, 4);
    let idx: Vec<usize> = vec![3, 17, 40, 2, 64, 33, 9];
    let mut rev = idx.clone();
    rev.reverse();
    let a = encode(&model, &params.theta, &grid, Indices::Subset(&idx)).unwrap();
    let b = encode(&model, &params.theta, &grid, Indices::Subset(&rev)).unwrap();
    let n = idx.len();
    for i in 0..n {
        for (x, y) in a.row(i).iter().zip(b.row(n - 1 - i)) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn predictions_depend_on_target_position() {
    let cfg = ModelConfig::desk();
    let (model, params) = setup(&cfg, 5);
    let grid = random_grid(&cfg, 6);
    let context: Vec<usize> = (0..20).collect();
    let z = encode(&model, &params.theta, &grid, Indices::Subset(&context)).unwrap();
    let targets = [21usize, 37];
    let pred = predict(&model, &params.phi, &z, &context, &targets).unwrap();
    assert_eq!(pred.shape(), &[2, 64]);
    assert!(pred.row(0).iter().zip(pred.row(1)).any(|(a, b)| (a - b).abs() > 1e-6));
    assert!(predict(&model, &params.phi, &z, &context, &[3]).is_err());
}

#[test]
fn mask_token_receives_gradient() {
    let cfg = ModelConfig::desk();
    let (model, params) = setup(&cfg, 7);
    let grid = random_grid(&cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mask = sample_unstructured(5, 8, 0.7, &mut rng).unwrap();
    let before = params.clone();
    let sg = step_gradients(&model, &params, &grid.to_tensor(), &mask).unwrap();
    let i = params.phi.position("mask_token").unwrap();
    assert!(sg.phi[i].sum_squares() > 0.0);
    assert_eq!(sg.theta.len(), params.theta.len());
    assert_eq!(sg.phi.len(), params.phi.len());
    assert_eq!(params, before);
}

#[test]
fn training_forward_pass() {
    let cfg = ModelConfig::desk();
    let (model, params) = setup(&cfg, 10);
    let grid = random_grid(&cfg, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mask = sample_unstructured(5, 8, 0.7, &mut rng).unwrap();
    let (loss, reps) = forward_training_step(&model, &params, &grid, &mask).unwrap();
    assert!(loss.is_finite() && loss >= 0.0);
    assert_eq!(reps.z_context.shape(), &[mask.context().len(), 64]);
    assert_eq!(reps.z_hat.shape(), &[mask.target().len(), 64]);
    assert_eq!(reps.z_bar_target.shape(), reps.z_hat.shape());

    // Predicting the targets exactly gives zero loss.
    assert_eq!(jepa_loss(&reps.z_bar_target, &reps.z_bar_target, LossKind::Vector).unwrap(), 0.0);
    let recomputed = jepa_loss(&reps.z_hat, &reps.z_bar_target, LossKind::Vector).unwrap();
    assert!((recomputed - loss).abs() < 1e-5 * loss.max(1.0));

    let batch = batch_gradients(&model, &params, &[grid.to_tensor()], std::slice::from_ref(&mask)).unwrap();
    assert!((batch.loss - loss).abs() < 1e-6 * loss.max(1.0));
}

#[test]
fn latent_target_masking_changes_values_not_shapes() {
    let plain = ModelConfig::desk();
    let latent = ModelConfig {
        latent_target_masking: true,
        ..plain.clone()
    };
    let (model, params) = setup(&plain, 13);
    let latent_model = Model::new(&latent).unwrap();
    let grid = random_grid(&plain, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mask = sample_unstructured(5, 8, 0.5, &mut rng).unwrap();
    let (_, a) = forward_training_step(&model, &params, &grid, &mask).unwrap();
    let (_, b) = forward_training_step(&latent_model, &params, &grid, &mask).unwrap();
    assert_eq!(a.z_bar_target.shape(), b.z_bar_target.shape());
    assert!(a.z_bar_target.max_abs_diff(&b.z_bar_target).unwrap() > 0.0);
    assert_eq!(a.z_hat, b.z_hat);
}

#[test]
fn all_patch_encoding_ignores_masking() {
    let cfg = ModelConfig::desk();
    let (model, params) = setup(&cfg, 16);
    let grid = random_grid(&cfg, 17);
    let reference = encode(&model, &params.theta, &grid, Indices::All).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..3 {
        let m = sample_unstructured(5, 8, 0.7, &mut rng).unwrap();
        forward_training_step(&model, &params, &grid, &m).unwrap();
        assert_eq!(encode(&model, &params.theta, &grid, Indices::All).unwrap(), reference);
    }
}

#[test]
fn overlapping_sets_are_rejected() {
    assert!(MaskSpec::new(vec![0, 1], vec![1, 2], StrategyKind::Unstructured, 4).is_err());
}
