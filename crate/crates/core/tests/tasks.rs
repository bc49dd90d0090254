use dmcm_core::tasks::{mislabel, RangePartition, TaskFamily};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn unrestricted_amplitude_mean_within_three_sigma() {
    let f = TaskFamily::sine2();
    let p = RangePartition::full(2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let mean: f64 = (0..n)
        .map(|_| f.sample_task(&p, &mut rng).unwrap().amplitude())
        .sum::<f64>()
        / n as f64;
    // uniform on [0.1, 5.0]: sd = 4.9 / sqrt(12)
    let se = 4.9 / 12f64.sqrt() / (n as f64).sqrt();
    assert!((mean - 2.55).abs() < 3.0 * se, "mean {mean}");
}

#[test]
fn conditional_samples_never_enter_excluded_cells() {
    let f = TaskFamily::sine2();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = RangePartition::random_exclusion(vec![5, 5], 15, &mut rng).unwrap();
    let mut task = f.sample_task(&p, &mut rng).unwrap();
    for i in 0..10_000 {
        let prev = task.clone();
        let s = i % 2;
        task = f.sample_conditional(&prev, &[s], &p, &mut rng).unwrap();
        assert!(!p.excluded_cells.contains(&p.cell_of(&f, &task.values)));
        assert_eq!(task.values[1 - s], prev.values[1 - s]);
    }
}

#[test]
fn cycling_changes_each_factor_once_per_round() {
    let f = TaskFamily::sine3();
    let p = RangePartition::full(3);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut task = f.sample_task(&p, &mut rng).unwrap();
    let mut changed = [0usize; 3];
    let mut s = 0;
    for _ in 0..3 {
        let next = f.sample_conditional(&task, &[s], &p, &mut rng).unwrap();
        for k in 0..3 {
            if next.values[k] != task.values[k] {
                changed[k] += 1;
            }
        }
        task = next;
        s = (s + 1) % 3;
    }
    assert_eq!(changed, [1, 1, 1]);
}

#[test]
fn mislabel_frequency() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 100_000;
    let wrong = (0..n)
        .filter(|i| {
            let s = i % 3;
            mislabel(s, 0.1, 3, &mut rng).unwrap() != s
        })
        .count();
    let freq = wrong as f64 / n as f64;
    assert!((freq - 0.10).abs() < 0.005, "{freq}");
}

proptest! {
    #[test]
    fn sampled_tasks_stay_in_range_and_admissible(seed in 0u64..500, excluded in 0usize..24) {
        let f = TaskFamily::sine3();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = RangePartition::random_exclusion(vec![5, 5, 1], excluded, &mut rng).unwrap();
        for _ in 0..20 {
            let t = f.sample_task(&p, &mut rng).unwrap();
            prop_assert!(p.admits(&f, &t.values));
            for (spec, v) in f.factors.iter().zip(&t.values) {
                prop_assert!(spec.contains(*v));
            }
        }
    }

    #[test]
    fn mislabel_never_returns_self_when_certain(seed in 0u64..500, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (seed as usize) % k;
        let m = mislabel(s, 1.0, k, &mut rng).unwrap();
        prop_assert!(m != s && m < k);
    }
}
