use std::collections::HashMap;

use plateau_lab::taskgen::{
    build_batch, build_prompt, build_retrieval_prompt, build_retrieval_table, eval_function,
    sample_function, MixtureSpec, Payload, TaskSpec,
};
use plateau_lab::RngState;
use proptest::prelude::*;

fn subset_frequencies(spec: &TaskSpec, draws: usize, seed: u64) -> HashMap<Vec<usize>, usize> {
    let mut rng = RngState::from_seed(seed).rng();
    let mut counts = HashMap::new();
    for _ in 0..draws {
        match sample_function(spec, &mut rng).payload {
            Payload::Subset(a) => *counts.entry(a).or_insert(0) += 1,
            other => panic!("unexpected payload {other:?}"),
        }
    }
    counts
}

#[test]
fn linear_weights_have_mean_mu() {
    let spec = TaskSpec::linear(10, 0.0);
    let mut rng = RngState::from_seed(11).rng();
    let draws = 100_000;
    let mut sums = [0.0; 10];
    for _ in 0..draws {
        let Payload::Weights(w) = sample_function(&spec, &mut rng).payload else { unreachable!() };
        sums.iter_mut().zip(&w).for_each(|(s, v)| *s += v);
    }
    for s in sums {
        assert!((s / draws as f64).abs() < 0.02, "coordinate mean {}", s / draws as f64);
    }
}

#[test]
fn parity_subsets_are_uniform() {
    let counts = subset_frequencies(&TaskSpec::parity(3), 100_000, 5);
    assert_eq!(counts.len(), 8);
    for (a, c) in counts {
        let f = c as f64 / 1e5;
        assert!((f - 0.125).abs() < 0.01, "{a:?}: {f}");
    }
}

#[test]
fn sparse_parity_pairs_are_uniform() {
    let counts = subset_frequencies(&TaskSpec::sparse_parity(5, 2), 100_000, 6);
    assert_eq!(counts.len(), 10);
    for (a, c) in counts {
        let f = c as f64 / 1e5;
        assert!((f - 0.1).abs() < 0.01, "{a:?}: {f}");
    }
}

#[test]
fn prompt_has_n_pairs() {
    let spec = TaskSpec::linear(10, 0.0);
    let mut rng = RngState::from_seed(1).rng();
    let f = sample_function(&spec, &mut rng);
    let p = build_prompt(&spec, &f, 120, &mut rng);
    assert_eq!(p.n(), 120);
    assert_eq!(p.xs.len(), 120 * 10);
}

#[test]
fn uneven_and_non_integral_batches() {
    let tasks: Vec<TaskSpec> = ["lr", "qr", "slr", "sp2", "lrelu"]
        .iter()
        .map(|c| TaskSpec::from_code(c, 5).unwrap())
        .collect();
    let weights = [0.5, 0.125, 0.125, 0.125, 0.125];
    let mix = MixtureSpec::weighted(tasks.iter().cloned().zip(weights).collect());
    assert_eq!(mix.counts(64).unwrap(), vec![32, 8, 8, 8, 8]);
    let four = MixtureSpec::even(tasks[..4].to_vec());
    assert_eq!(four.counts(64).unwrap(), vec![16; 4]);
    let three = MixtureSpec::even(tasks[..3].to_vec());
    let err = three.counts(64).unwrap_err().to_string();
    assert!(err.contains("entry 0"), "{err}");
}

/// Chi-square of the queried position against the uniform law over 119 slots.
#[test]
fn retrieval_query_position_is_uniform_and_sound() {
    let spec = TaskSpec::boolean_retrieval(10);
    let table = build_retrieval_table(&spec, &mut RngState::from_seed(2).rng()).unwrap();
    let mut rng = RngState::from_seed(3).rng();
    let (prompts, n) = (100_000, 120);
    let mut hits = vec![0usize; n - 1];
    for _ in 0..prompts {
        let (p, target, pos) = build_retrieval_prompt(&table, n, &mut rng).unwrap();
        let query = p.last_x();
        let matches: Vec<usize> = (0..n - 1).filter(|&i| p.x(i) == query).collect();
        assert_eq!(matches, vec![pos]);
        assert_eq!(p.ys[pos], target);
        hits[pos] += 1;
    }
    let expected = prompts as f64 / (n - 1) as f64;
    let chi2: f64 = hits.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
    // 118 degrees of freedom; the 0.999 quantile is about 170.
    assert!(chi2 < 170.0, "chi-square {chi2}");
}

fn any_spec() -> impl Strategy<Value = TaskSpec> {
    (0usize..6, 2usize..8, -1.0f64..1.0).prop_map(|(kind, d, mu)| match kind {
        0 => TaskSpec::linear(d, mu),
        1 => TaskSpec::quadratic(d, mu),
        2 => TaskSpec::sparse_linear(d, 1 + d / 3, mu),
        3 => TaskSpec::leaky_relu(d, mu),
        4 => TaskSpec::sparse_parity(d, 2),
        _ => TaskSpec::parity(d),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_match_stored_function(spec in any_spec(), seed in any::<u64>(), n in 1usize..30) {
        let mut rng = RngState::from_seed(seed).rng();
        let f = sample_function(&spec, &mut rng);
        let p = build_prompt(&spec, &f, n, &mut rng);
        for i in 0..n {
            prop_assert_eq!(eval_function(&f, p.x(i)).unwrap(), p.ys[i]);
            if spec.is_boolean() {
                prop_assert!(p.x(i).iter().all(|&v| v == 1.0 || v == -1.0));
            }
        }
    }

    #[test]
    fn prompts_are_reproducible(spec in any_spec(), seed in any::<u64>()) {
        let build = || {
            let mut rng = RngState::from_seed(seed).rng();
            let f = sample_function(&spec, &mut rng);
            build_prompt(&spec, &f, 12, &mut rng)
        };
        let (a, b) = (build(), build());
        prop_assert_eq!(a.xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.ys.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.ys.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn batch_composition(k in 1usize..5, share in 1usize..6, seed in any::<u64>()) {
        let codes = ["lr", "qr", "sp2", "lrelu"];
        let mix = MixtureSpec::even(codes[..k].iter().map(|c| TaskSpec::from_code(c, 4).unwrap()).collect());
        let b = build_batch(&mix, k * share, 3, RngState::from_seed(seed)).unwrap();
        prop_assert_eq!(b.prompts.len(), k * share);
        prop_assert_eq!(b.counts.clone(), vec![share; k]);
        for (i, p) in b.prompts.iter().enumerate() {
            prop_assert_eq!(p.task_id, i / share);
        }
    }

    #[test]
    fn retrieval_prompts_are_sound(seed in any::<u64>(), n in 2usize..64, boolean in any::<bool>()) {
        let spec = if boolean { TaskSpec::boolean_retrieval(10) } else { TaskSpec::gaussian_retrieval(4) };
        let mut rng = RngState::from_seed(seed).rng();
        let table = build_retrieval_table(&spec, &mut rng).unwrap();
        let (p, target, pos) = build_retrieval_prompt(&table, n, &mut rng).unwrap();
        prop_assert_eq!(p.n(), n);
        let hits = (0..n - 1).filter(|&i| p.x(i) == p.last_x()).count();
        prop_assert_eq!(hits, 1);
        prop_assert_eq!(p.ys[pos], target);
        prop_assert_eq!(p.last_y(), target);
    }
}
