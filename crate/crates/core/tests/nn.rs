use plateau_lab::nn::gradcheck::grad_check_featurenet;
use plateau_lab::nn::{featurenet_loss_grad, featurenet_loss_grad_against};
use plateau_lab::nn::{
    backward, embed_prompt, forward_transformer, grad_check, predict_batch, sequence_loss, FeatureMode,
    FeatureNetConfig, FeatureNetParams, ModelParams, TaskHead, Teacher, TeacherLaw, TransformerConfig,
};
use plateau_lab::taskgen::{build_batch, MixtureSpec, PromptSequence, TaskSpec};
use plateau_lab::{Exec, LabError, RngState};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn tiny(d: usize, n: usize) -> TransformerConfig {
    TransformerConfig::custom(2, 16, 2, d, n)
}

fn perturbed(cfg: &TransformerConfig, seed: u64) -> ModelParams<f64> {
    let mut rng = RngState::from_seed(seed).rng();
    let mut p = ModelParams::<f64>::init(cfg, &mut rng).unwrap();
    p.perturb(0.3, &mut rng);
    p
}

fn mixed_batch(d: usize, n: usize, seed: u64) -> (Vec<PromptSequence>, Vec<TaskHead>) {
    let mix = MixtureSpec::even(vec![TaskSpec::linear(d, 0.5), TaskSpec::sparse_parity(d, 2)]);
    let batch = build_batch(&mix, 4, n, RngState::from_seed(seed)).unwrap();
    let heads = mix.tasks().map(TaskHead::for_task).collect();
    (batch.prompts, heads)
}

#[test]
fn transformer_gradient_matches_finite_differences() {
    let cfg = tiny(3, 4);
    let p = perturbed(&cfg, 11);
    let (prompts, heads) = mixed_batch(3, 4, 5);
    let mut rng = RngState::from_seed(99).rng();
    let report = grad_check(&p, &prompts, &heads, &[0.7, 1.3], 1e-5, &mut rng).unwrap();
    assert!(report.coords_checked >= 200);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn retrieval_gradient_matches_finite_differences() {
    let cfg = tiny(10, 6);
    let p = perturbed(&cfg, 12);
    let mix = MixtureSpec::even(vec![TaskSpec::gaussian_retrieval(10), TaskSpec::boolean_retrieval(10)]);
    let batch = build_batch(&mix, 4, 6, RngState::from_seed(3)).unwrap();
    let heads: Vec<TaskHead> = mix.tasks().map(TaskHead::for_task).collect();
    let mut rng = RngState::from_seed(98).rng();
    let report = grad_check(&p, &batch.prompts, &heads, &[1.0, 1.0], 1e-5, &mut rng).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn feature_net_gradient_matches_finite_differences() {
    let cfg = FeatureNetConfig { init_std: 0.5, ..FeatureNetConfig::new(10, 4, 20, 3, FeatureMode::Multi) };
    let p = FeatureNetParams::<f64>::init(&cfg, RngState::from_seed(4)).unwrap();
    let t = Teacher::sample(&cfg, RngState::from_seed(4)).unwrap();
    let mut rng = RngState::from_seed(8).rng();
    let rows = 16;
    let xs: Vec<f64> = (0..rows * 10).map(|_| rng.sample(StandardNormal)).collect();
    let ys = t.targets(&xs, rows);
    let report = grad_check_featurenet(&p, &xs, &ys, rows, 1e-5, &mut rng).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn zero_eps_is_a_usage_error() {
    let cfg = tiny(3, 4);
    let p = perturbed(&cfg, 1);
    let (prompts, heads) = mixed_batch(3, 4, 1);
    let mut rng = RngState::from_seed(1).rng();
    let err = grad_check(&p, &prompts, &heads, &[1.0, 1.0], 0.0, &mut rng).unwrap_err();
    assert!(matches!(err, LabError::Usage(_)));
}

#[test]
fn embedding_layout() {
    let p = PromptSequence { task_id: 0, dim: 4, xs: (0..8).map(|v| v as f64).collect(), ys: vec![3.5, -1.0] };
    let tokens = embed_prompt(&p);
    assert_eq!(tokens.len(), 4);
    assert_eq!(tokens.token(0), &[0.0, 1.0, 2.0, 3.0]);
    assert_eq!(tokens.token(1), &[3.5, 0.0, 0.0, 0.0]);
    assert_eq!(tokens.token(2), &[4.0, 5.0, 6.0, 7.0]);
    assert_eq!(tokens.token(3), &[-1.0, 0.0, 0.0, 0.0]);

    let spec = TaskSpec::linear(10, 0.0);
    let batch = build_batch(&MixtureSpec::even(vec![spec]), 1, 120, RngState::from_seed(2)).unwrap();
    let t = embed_prompt(&batch.prompts[0]);
    assert_eq!((t.len(), t.dim), (240, 10));
}

#[test]
fn fresh_model_predicts_zero_and_is_deterministic() {
    let cfg = TransformerConfig::toy(5, 8);
    let p = ModelParams::<f32>::init(&cfg, &mut RngState::from_seed(3).rng()).unwrap();
    let q = ModelParams::<f32>::init(&cfg, &mut RngState::from_seed(3).rng()).unwrap();
    assert_eq!(p.data, q.data);
    let batch = build_batch(&MixtureSpec::even(vec![TaskSpec::linear(5, 0.0)]), 2, 8, RngState::from_seed(4)).unwrap();
    let out = forward_transformer(&p, &embed_prompt(&batch.prompts[0])).unwrap();
    assert_eq!(out.len(), 8);
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn serial_and_parallel_gradients_are_bit_identical() {
    let cfg = TransformerConfig::toy(5, 10);
    let mut p = ModelParams::<f32>::init(&cfg, &mut RngState::from_seed(5).rng()).unwrap();
    p.perturb(0.05, &mut RngState::from_seed(6).rng());
    let mix = MixtureSpec::even(vec![TaskSpec::linear(5, 0.0), TaskSpec::sparse_parity(5, 2)]);
    let batch = build_batch(&mix, 32, 10, RngState::from_seed(7)).unwrap();
    let heads: Vec<TaskHead> = mix.tasks().map(TaskHead::for_task).collect();
    let (la, ga) = backward(&p, &batch.prompts, &heads, &[1.0, 2.0], Exec::Serial).unwrap();
    let (lb, gb) = backward(&p, &batch.prompts, &heads, &[1.0, 2.0], Exec::Parallel).unwrap();
    assert_eq!(la, lb);
    assert_eq!(ga, gb);
}

#[test]
fn loss_examples_and_linearity() {
    let cfg = TransformerConfig::toy(3, 4);
    let p = ModelParams::<f64>::init(&cfg, &mut RngState::from_seed(1).rng()).unwrap();
    let spec = TaskSpec::linear(3, 0.0);
    let prompt = PromptSequence { task_id: 0, dim: 3, xs: vec![0.5; 12], ys: vec![2.0; 4] };
    let heads = [TaskHead::for_task(&spec)];
    let report = sequence_loss(&p, std::slice::from_ref(&prompt), &heads, &[1.0], Exec::Serial).unwrap();
    assert_eq!(report.total, 4.0);

    let (prompts, heads) = mixed_batch(3, 4, 9);
    let q = perturbed(&tiny(3, 4), 2);
    let base = sequence_loss(&q, &prompts, &heads, &[1.0, 1.0], Exec::Serial).unwrap();
    let scaled = sequence_loss(&q, &prompts, &heads, &[2.0, 3.0], Exec::Serial).unwrap();
    let (a, b) = (base.components[0], base.components[1]);
    assert!((scaled.total - (2.0 * a + 3.0 * b)).abs() < 1e-12);
    let doubled = sequence_loss(&q, &prompts, &heads, &[2.0, 2.0], Exec::Serial).unwrap();
    assert_eq!(doubled.total, 2.0 * base.total);

    let (_, g1) = backward(&q, &prompts[..2], &heads, &[1.0, 0.0], Exec::Serial).unwrap();
    let (_, g2) = backward(&q, &prompts[..2], &heads, &[2.0, 0.0], Exec::Serial).unwrap();
    for (x, y) in g1.iter().zip(&g2) {
        assert_eq!(2.0 * x, *y);
    }
}

#[test]
fn perfect_fit_has_zero_loss_and_gradient() {
    let cfg = TransformerConfig::toy(3, 4);
    let p = ModelParams::<f64>::init(&cfg, &mut RngState::from_seed(1).rng()).unwrap();
    let spec = TaskSpec::linear(3, 0.0);
    let prompt = PromptSequence { task_id: 0, dim: 3, xs: vec![0.25; 12], ys: vec![0.0; 4] };
    let (report, g) = backward(&p, &[prompt], &[TaskHead::for_task(&spec)], &[1.0], Exec::Serial).unwrap();
    assert_eq!(report.total, 0.0);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn predictions_match_single_sequence_forward() {
    let cfg = TransformerConfig::toy(5, 6);
    let mut p = ModelParams::<f32>::init(&cfg, &mut RngState::from_seed(5).rng()).unwrap();
    p.perturb(0.05, &mut RngState::from_seed(6).rng());
    let batch = build_batch(&MixtureSpec::even(vec![TaskSpec::linear(5, 0.0)]), 3, 6, RngState::from_seed(1)).unwrap();
    let all = predict_batch(&p, &batch.prompts, Exec::Serial).unwrap();
    for (prompt, preds) in batch.prompts.iter().zip(&all) {
        let single = forward_transformer(&p, &embed_prompt(prompt)).unwrap();
        let single: Vec<f64> = single.iter().map(|&v| v as f64).collect();
        assert_eq!(&single, preds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_mask_makes_prefix_predictions_invariant(seed in 0u64..1000, i in 0usize..6, noise in -5.0f64..5.0) {
        let cfg = TransformerConfig::custom(2, 16, 2, 3, 6);
        let mut p = ModelParams::<f64>::init(&cfg, &mut RngState::from_seed(seed).rng()).unwrap();
        p.perturb(0.2, &mut RngState::from_seed(seed + 1).rng());
        let batch = build_batch(&MixtureSpec::even(vec![TaskSpec::linear(3, 0.0)]), 1, 6, RngState::from_seed(seed)).unwrap();
        let tokens = embed_prompt(&batch.prompts[0]);
        let base = forward_transformer(&p, &tokens).unwrap();
        let mut altered = tokens.clone();
        // every token after x-token i (0-based position 2i)
        for pos in 2 * i + 1..altered.len() {
            for v in altered.token_mut(pos) {
                *v += noise;
            }
        }
        let after = forward_transformer(&p, &altered).unwrap();
        for j in 0..=i {
            prop_assert_eq!(base[j].to_bits(), after[j].to_bits());
        }
    }

    #[test]
    fn sequence_loss_is_non_negative(seed in 0u64..1000) {
        let cfg = tiny(3, 4);
        let p = perturbed(&cfg, seed);
        let (prompts, heads) = mixed_batch(3, 4, seed);
        let r = sequence_loss(&p, &prompts, &heads, &[1.0, 1.0], Exec::Serial).unwrap();
        prop_assert!(r.total >= 0.0);
        prop_assert!(r.components.iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn y_tokens_are_zero_padded(d in 1usize..12, n in 1usize..10, seed in 0u64..100) {
        let batch = build_batch(&MixtureSpec::even(vec![TaskSpec::linear(d, 0.0)]), 1, n, RngState::from_seed(seed)).unwrap();
        let t = embed_prompt(&batch.prompts[0]);
        for i in 0..n {
            let y = t.token(2 * i + 1);
            prop_assert_eq!(y[0], batch.prompts[0].ys[i]);
            prop_assert!(y[1..].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn teacher_label_noise_matches_its_law() {
    let base = FeatureNetConfig::new(12, 3, 8, 4, FeatureMode::Multi);
    let fixed = Teacher::sample(&FeatureNetConfig { teacher: TeacherLaw::Fixed, ..base.clone() }, RngState::from_seed(6)).unwrap();
    let resampled = Teacher::sample(&base, RngState::from_seed(6)).unwrap();
    assert_eq!(resampled.u, resampled.mus.concat());
    assert_eq!(fixed.a_star, resampled.a_star);
    assert_ne!(fixed.u, resampled.u);

    let mut rng = RngState::from_seed(7).rng();
    let rows = 20_000;
    let xs: Vec<f64> = (0..rows * 12).map(|_| rng.sample(StandardNormal)).collect();
    let (noisy, clean) = fixed.sample_labels(&xs, rows, &mut rng);
    assert_eq!(noisy, clean);
    assert_eq!(clean, fixed.targets(&xs, rows));

    // Label noise divided by |σ(A* x)| is standard normal.
    let (noisy, clean) = resampled.sample_labels(&xs, rows, &mut rng);
    let z = resampled.hidden(&xs, rows);
    let std: Vec<f64> = (0..rows * 4)
        .map(|i| {
            let r = i / 4;
            (noisy[i] - clean[i]) / z[r * 3..r * 3 + 3].iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect();
    let mean = std.iter().sum::<f64>() / std.len() as f64;
    let var = std.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / std.len() as f64;
    assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03, "mean {mean}, var {var}");
}

#[test]
fn reference_loss_comes_from_the_same_pass() {
    let cfg = FeatureNetConfig { init_std: 0.3, ..FeatureNetConfig::new(6, 2, 5, 3, FeatureMode::Multi) };
    let p = FeatureNetParams::<f64>::init(&cfg, RngState::from_seed(1)).unwrap();
    let t = Teacher::sample(&cfg, RngState::from_seed(1)).unwrap();
    let mut rng = RngState::from_seed(2).rng();
    let xs: Vec<f64> = (0..8 * 6).map(|_| rng.sample(StandardNormal)).collect();
    let (noisy, clean) = t.sample_labels(&xs, 8, &mut rng);
    let (train, reference, g) = featurenet_loss_grad_against(&p, &xs, &noisy, &clean, 8).unwrap();
    let (train_only, g_only) = featurenet_loss_grad(&p, &xs, &noisy, 8).unwrap();
    let (clean_only, _) = featurenet_loss_grad(&p, &xs, &clean, 8).unwrap();
    assert_eq!((train, g), (train_only, g_only));
    assert!((reference - clean_only).abs() < 1e-12);
}
