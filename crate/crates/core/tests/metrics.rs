use plateau_lab::metrics::{
    escape_report, exit_time, last_position_metric, plateau_escape_time, LossStream, OnlineDetector,
};
use plateau_lab::taskgen::Modality;
use plateau_lab::RngState;
use proptest::prelude::*;
use rand::Rng;

/// Direct transcription of the definition: min { t > 100, t <= budget : mean(v[t-99..=t]) ⋈ θ },
/// with v indexed from step 1.
fn brute_force(values: &[f64], threshold: f64, below: bool, budget: u64) -> Option<u64> {
    (101..=budget.min(values.len() as u64)).find(|&t| {
        let window = &values[(t - 100) as usize..t as usize];
        let mean = window.iter().fold(0.0, |s, v| s + v) / 100.0;
        if below {
            mean < threshold
        } else {
            mean > threshold
        }
    })
}

/// A random piecewise-constant stream. Levels are multiples of 1/64, so window sums are
/// exact in any summation order and both sides see the same means.
fn random_step_stream(rng: &mut impl Rng) -> Vec<f64> {
    let len = rng.random_range(50..800);
    let mut values = Vec::with_capacity(len);
    while values.len() < len {
        let level = rng.random_range(0..=77) as f64 / 64.0;
        let run = rng.random_range(1..150);
        values.extend(std::iter::repeat_n(level, run.min(len - values.len())));
    }
    values
}

#[test]
fn detectors_match_brute_force_on_random_streams() {
    let mut rng = RngState::from_seed(2024).rng();
    for case in 0..1000 {
        let values = random_step_stream(&mut rng);
        let stream = LossStream::from_values(values.iter().copied());
        let budget = rng.random_range(100..900);
        assert_eq!(plateau_escape_time(&stream, budget), brute_force(&values, 0.8, true, budget), "case {case}");
        assert_eq!(
            exit_time(&stream, Modality::Continuous, budget),
            brute_force(&values, 0.2, true, budget),
            "case {case}"
        );
        assert_eq!(exit_time(&stream, Modality::Boolean, budget), brute_force(&values, 0.95, false, budget), "case {case}");
    }
}

#[test]
fn step_function_examples() {
    let plateau = LossStream::from_values((1..=1000).map(|t| if t <= 200 { 1.0 } else { 0.0 }));
    assert_eq!(plateau_escape_time(&plateau, 1000), Some(221));
    let flat = LossStream::from_values(std::iter::repeat_n(1.0, 1000));
    assert_eq!(plateau_escape_time(&flat, 1000), None);
    let error = LossStream::from_values((1..=1000).map(|t| if t <= 300 { 1.0 } else { 0.0 }));
    assert_eq!(exit_time(&error, Modality::Continuous, 1000), Some(381));
    let zero = LossStream::from_values(std::iter::repeat_n(0.0, 300));
    assert_eq!(plateau_escape_time(&zero, 300), Some(101));

    let report = escape_report(&plateau, &error, Modality::Continuous, 1000);
    assert_eq!(report.to_string(), "0.2k (0.4k)");
    let stuck = escape_report(&flat, &flat, Modality::Continuous, 20_000);
    assert_eq!(stuck.to_string(), ">20k");
    let half = escape_report(&plateau, &flat, Modality::Continuous, 1000);
    assert_eq!((half.t_plateau, half.t_exit), (Some(221), None));
}

#[test]
fn thresholds_are_strict() {
    let at = |v: f64| LossStream::from_values(std::iter::repeat_n(v, 500));
    assert_eq!(plateau_escape_time(&at(0.75), 500), Some(101));
    assert_eq!(exit_time(&at(0.99), Modality::Boolean, 500), Some(101));
    assert_eq!(exit_time(&at(0.95), Modality::Boolean, 500), None);
    assert_eq!(exit_time(&at(0.25), Modality::Continuous, 500), None);
    assert_eq!(plateau_escape_time(&at(0.8), 500), None);
    assert_eq!(exit_time(&at(0.2), Modality::Continuous, 500), None);
}

#[test]
fn last_position_examples() {
    let targets: Vec<f64> = (0..1024).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    assert_eq!(last_position_metric(&targets, &targets, Modality::Boolean).unwrap(), 1.0);
    let zeros = vec![0.0; 1024];
    assert_eq!(last_position_metric(&zeros, &targets, Modality::Boolean).unwrap(), 0.5);
    assert_eq!(last_position_metric(&targets, &targets, Modality::Continuous).unwrap(), 0.0);
    assert!(last_position_metric(&zeros[..3], &targets, Modality::Continuous).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn detection_is_stable_under_extension(values in prop::collection::vec(0.0f64..1.2, 100..400), extra in prop::collection::vec(0.0f64..1.2, 0..200)) {
        let short = LossStream::from_values(values.iter().copied());
        let long = LossStream::from_values(values.iter().chain(&extra).copied());
        if let Some(t) = plateau_escape_time(&short, u64::MAX) {
            prop_assert_eq!(plateau_escape_time(&long, u64::MAX), Some(t));
        }
    }

    #[test]
    fn online_detector_agrees(values in prop::collection::vec(0.0f64..1.2, 0..400)) {
        let stream = LossStream::from_values(values.iter().copied());
        let mut online = OnlineDetector::plateau();
        let mut fired = None;
        for &(s, v) in &stream.points {
            if let Some(t) = online.push(s, v) {
                prop_assert!(fired.is_none());
                fired = Some(t);
            }
        }
        prop_assert_eq!(fired, plateau_escape_time(&stream, u64::MAX));
    }
}
