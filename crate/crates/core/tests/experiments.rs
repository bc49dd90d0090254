use dmcm_core::experiments::*;
use dmcm_core::meta::Method;
use dmcm_core::tasks::TaskFamily;
use dmcm_core::Error;

fn quiet(_: &RunState) -> dmcm_core::Result<()> {
    Ok(())
}

/// Small enough that thousands of steps run in seconds.
fn tiny(method: Method) -> ExperimentConfig {
    let mut cfg = a1(method, 5, Exclusion::None {});
    cfg.network.hidden = vec![8];
    cfg.train.inner_steps = 1;
    cfg.train.tasks_per_step = if method == Method::Dmcm { 4 } else { 2 };
    cfg.train.warmup = if method == Method::Dmcm { 1 } else { 0 };
    cfg.train.adapt_sweeps = 1;
    cfg.eval_tasks = 2;
    cfg.test_points = 5;
    cfg
}

#[test]
fn one_row_per_evaluation() {
    let mut cfg = tiny(Method::Cavia);
    cfg.budget = 4000;
    cfg.eval_every = 100;
    let rows = run_training_curve(&cfg, 1, &[], &quiet).unwrap();
    assert_eq!(rows.len(), 40);
    assert_eq!(rows.last().unwrap().meta_step, 4000);
    assert!(rows.iter().all(|r| r.ci95 >= 0.0 && r.mean_mse.is_finite()));

    // An uneven budget still ends with a row at the final step.
    cfg.budget = 250;
    let steps: Vec<u64> = run_training_curve(&cfg, 1, &[], &quiet)
        .unwrap()
        .iter()
        .map(|r| r.meta_step)
        .collect();
    assert_eq!(steps, [100, 200, 250]);
}

#[test]
fn curves_are_deterministic_and_worker_independent() {
    let mut cfg = tiny(Method::Dmcm);
    cfg.budget = 20;
    cfg.eval_every = 5;
    cfg.seeds = vec![0, 1, 2];
    let a = run_training_curve(&cfg, 1, &[], &quiet).unwrap();
    let b = run_training_curve(&cfg, 3, &[], &quiet).unwrap();
    assert_eq!(a.len(), 12);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.mean_mse.to_bits(), y.mean_mse.to_bits());
        assert_eq!((x.seed, x.meta_step, &x.trial), (y.seed, y.meta_step, &y.trial));
    }
}

#[test]
fn oracle_predictor_scores_zero() {
    let set = eval_set(&TaskFamily::sine2(), 20, 10, 100, 4).unwrap();
    let mut i = 0;
    let (m, ci) = eval_with(&set, |_, x| {
        let task = &set[i].task;
        i += 1;
        Ok(dmcm_core::autodiff::Array::column(x.data().iter().map(|&v| task.eval(v)).collect()))
    })
    .unwrap();
    assert_eq!((m, ci), (0.0, 0.0));
}

#[test]
fn ci_matches_direct_recomputation() {
    let cfg = tiny(Method::Cavia);
    let trainer = cfg.trainer(0, 0).unwrap();
    let set = eval_set(&cfg.family(), 30, 5, 20, 1).unwrap();
    let errs: Vec<f64> = set
        .iter()
        .map(|t| {
            let a = trainer.adapt(&t.support).unwrap();
            mse(&trainer.predict(&a, &t.query.x).unwrap(), &t.query.y)
        })
        .collect();
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let (m, ci) = eval_tasks(&trainer, &set).unwrap();
    assert!((m - mean).abs() <= 1e-14 * mean);
    assert!((ci - 1.96 * var.sqrt() / n.sqrt()).abs() <= 1e-12 * ci);
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    for method in [Method::Maml, Method::Anil, Method::Cavia, Method::Dmcm] {
        let cfg = tiny(method);
        let mut trainer = cfg.trainer(3, 0).unwrap();
        trainer.step().unwrap();
        let before = trainer.params.checksum();
        let set = cfg.eval_set().unwrap();
        let first = eval_tasks(&trainer, &set).unwrap();
        assert_eq!(trainer.params.checksum(), before, "{method:?}");
        assert_eq!(eval_tasks(&trainer, &set).unwrap(), first);
    }
}

#[test]
fn ood_training_stays_in_admissible_cells_while_evaluation_does_not() {
    let cfg = tiny(Method::Dmcm);
    let mut cfg = ExperimentConfig { partition: PartitionSpec::grid(vec![5, 5], Exclusion::Fraction { fraction: 0.6 }), ..cfg };
    cfg.eval_tasks = 300;
    let mut trainer = cfg.trainer(0, 0).unwrap();
    let partition = trainer.sampler.partition.clone();
    assert_eq!(partition.excluded_cells.len(), 15);
    let family = cfg.family();
    let mut prev = trainer.sampler.fresh().unwrap().0;
    for i in 0..500 {
        assert!(partition.admits(&family, &prev.values), "{prev:?}");
        prev = trainer.sampler.conditional(&prev, &[i % 2]).unwrap().0;
    }
    let outside = cfg
        .eval_set()
        .unwrap()
        .iter()
        .filter(|t| !partition.admits(&family, &t.task.values))
        .count();
    assert!(outside > 100, "{outside} of 300 evaluation tasks outside the training cells");
}

#[test]
fn trials_draw_distinct_exclusions() {
    let spec = PartitionSpec::grid(vec![5, 5], Exclusion::Fraction { fraction: 0.4 });
    let a = spec.resolve(2, 0).unwrap();
    let b = spec.resolve(2, 1).unwrap();
    assert_eq!(a.excluded_cells.len(), 10);
    assert_ne!(a.excluded_cells, b.excluded_cells);
    assert_eq!(spec.resolve(2, 0).unwrap(), a);
}

#[test]
fn ncontext_ood_keeps_two_of_four_intervals() {
    let cfg = b1(NContext::Three, true);
    let trainer = cfg.trainer(0, 0).unwrap();
    let p = &trainer.sampler.partition;
    let admitted: Vec<Vec<usize>> = p.cells().into_iter().filter(|c| !p.excluded_cells.contains(c)).collect();
    assert_eq!(p.num_cells(), 64);
    assert_eq!(admitted.len(), 8);
    for f in 0..3 {
        let mut kept: Vec<usize> = admitted.iter().map(|c| c[f]).collect();
        kept.sort();
        kept.dedup();
        assert_eq!(kept.len(), 2);
    }
}

#[test]
fn identity_composition_equals_self_adaptation() {
    let cfg = tiny(Method::Dmcm);
    let mut trainer = cfg.trainer(0, 0).unwrap();
    trainer.step().unwrap();
    for t in cfg.eval_set().unwrap() {
        let own = trainer.predict(&trainer.adapt(&t.support).unwrap(), &t.query.x).unwrap();
        let composed = trainer
            .predict(&trainer.compose(&[&t.support, &t.support]).unwrap(), &t.query.x)
            .unwrap();
        assert_eq!(own, composed);
    }
}

#[test]
fn zero_shot_needs_dmcm_and_a_valid_restriction() {
    let cfg = tiny(Method::Cavia);
    let trainer = cfg.trainer(0, 0).unwrap();
    assert!(zero_shot_errors(&trainer, &cfg.family(), 2, 5, 0).is_err());
    assert!(restrict_amplitude(&cfg.family(), 6.0, 9.0).is_err());
    let d = tiny(Method::Dmcm);
    let trainer = d.trainer(0, 0).unwrap();
    let (own, full, restricted) = zero_shot_eval(&trainer, &d.family(), 4, 5, Some((1.5, 5.0)), 0).unwrap();
    assert_eq!((own.len(), full.len(), restricted.unwrap().len()), (4, 4, 4));
}

#[test]
fn context_size_zero_is_rejected() {
    let cfg = b4_param(0);
    assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    for size in [1, 2, 3, 6] {
        b4_param(size).validate().unwrap();
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny(Method::Cavia);
    cfg.budget = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny(Method::Cavia);
    cfg.eval_tasks = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny(Method::Cavia);
    cfg.partition = PartitionSpec::grid(vec![5, 5], Exclusion::Fraction { fraction: 1.0 });
    assert!(cfg.validate().is_err() || cfg.trainer(0, 0).is_err());
    // A single context cannot drive DMCM's per-factor chain with two factors unaccounted for.
    let mut cfg = tiny(Method::Maml);
    cfg.contexts = tiny(Method::Dmcm).contexts;
    assert!(cfg.validate().is_err());
}

#[test]
fn divergence_ends_with_a_diagnostic_row() {
    let mut cfg = tiny(Method::Cavia);
    cfg.train.inner_lr = 1e150;
    cfg.train.inner_steps = 3;
    cfg.budget = 50;
    cfg.eval_every = 10;
    let spec = RunSpec::expand(&cfg, "").remove(0);
    let states = run_many(&[spec], 1, &[], &quiet).unwrap();
    let run = &states[0];
    assert!(run.failure.is_some());
    let last = run.rows.last().unwrap();
    assert!(last.mean_mse.is_nan());
    assert!(run.trainer.meta_steps < 50);
}

#[test]
fn run_state_resumes_to_identical_rows() {
    let mut cfg = tiny(Method::Dmcm);
    cfg.budget = 12;
    cfg.eval_every = 4;
    let full = run_many(&RunSpec::expand(&cfg, ""), 1, &[], &quiet).unwrap();

    let mut short = cfg.clone();
    // Stop on an evaluation step so the short run adds no extra final row.
    short.budget = 4;
    let partial = run_many(&RunSpec::expand(&short, ""), 1, &[], &quiet).unwrap();
    let resumed = run_many(&RunSpec::expand(&cfg, ""), 1, &partial, &quiet).unwrap();
    let bits = |s: &[RunState]| -> Vec<(u64, u64)> {
        s[0].rows.iter().map(|r| (r.meta_step, r.mean_mse.to_bits())).collect()
    };
    assert_eq!(bits(&full), bits(&resumed));
}

#[test]
fn resuming_with_another_shape_names_the_layer() {
    let cfg = tiny(Method::Cavia);
    let states = run_many(&RunSpec::expand(&ExperimentConfig { budget: 1, ..cfg.clone() }, ""), 1, &[], &quiet).unwrap();
    let mut wider = cfg;
    wider.network.hidden = vec![9];
    let err = run_many(&RunSpec::expand(&wider, ""), 1, &states, &quiet).unwrap_err();
    assert!(err.to_string().contains("layer 0"), "{err}");
}

#[test]
fn summary_groups_trials_by_setting() {
    let row = |trial: &str, m: f64| MetricRow {
        method: "dmcm".into(),
        seed: 0,
        meta_step: 10,
        mean_mse: m,
        ci95: 0.0,
        trial: trial.into(),
        wall_time_s: 0.0,
    };
    let rows = [row("x40-t0", 1.0), row("x40-t1", 3.0), row("x60-t0", 5.0)];
    let s = final_summary(&rows, Some(10));
    assert_eq!(s.len(), 2);
    assert_eq!((s[0].mean, s[0].runs), (2.0, 2));
    assert!((s[0].sd - 2f64.sqrt()).abs() < 1e-15);
}
