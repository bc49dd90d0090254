//! Recipes for the standard studies.

use serde::{Deserialize, Serialize};

use crate::meta::{Method, Optimizer, TrainConfig};
use crate::model::{ContextSlot, ContextSpec, NetworkConfig};
use crate::tasks::TaskFamily;

use super::{Exclusion, ExperimentConfig, PartitionSpec};

fn base(
    method: Method,
    train: TrainConfig,
    network: NetworkConfig,
    contexts: ContextSpec,
    family: TaskFamily,
    partition: PartitionSpec,
    budget: u64,
) -> ExperimentConfig {
    ExperimentConfig {
        method,
        label: None,
        train,
        network,
        contexts,
        factors: family.factors,
        partition,
        budget,
        eval_every: 100,
        eval_tasks: 500,
        test_points: 100,
        eval_seed: 0,
        seeds: vec![0],
        trials: 1,
        record_wall_time: false,
    }
}

/// Two-factor benchmark: 2×40 network, 10 inner steps, 25 scored tasks per
/// meta-gradient on a 5×5 range grid. `exclusion` withholds grid cells.
pub fn a1(method: Method, shots: usize, exclusion: Exclusion) -> ExperimentConfig {
    let dmcm = method == Method::Dmcm;
    let train = TrainConfig {
        // Full-network MAML is unstable above 0.001; ANIL adapts only the head.
        inner_lr: if method == Method::Maml { 0.001 } else { 0.1 },
        inner_decay: 1.0,
        meta_lr: 0.001,
        inner_steps: 10,
        tasks_per_step: if dmcm { 35 } else { 25 },
        warmup: if dmcm { 10 } else { 0 },
        adapt_sweeps: if dmcm { 10 } else { 1 },
        shots,
        recombination: false,
        grad_order: Default::default(),
        optimizer: Optimizer::adam(),
        mislabel_rate: 0.0,
    };
    let contexts = match method {
        Method::Maml | Method::Anil => ContextSpec::none(),
        Method::Cavia => ContextSpec::single(6, &["A", "P"]),
        Method::Dmcm => ContextSpec::new(vec![
            ContextSlot::new(3, 0, &["A"]),
            ContextSlot::new(3, 0, &["P"]),
        ]),
    };
    base(
        method,
        train,
        NetworkConfig::mlp(1, &[40, 40], 1),
        contexts,
        TaskFamily::sine2(),
        PartitionSpec::grid(vec![5, 5], exclusion),
        4000,
    )
}

/// Two-context model with decaying inner rate, 30 inner steps and
/// recombination, used for zero-shot composition.
pub fn a3_zeroshot() -> ExperimentConfig {
    let train = TrainConfig {
        inner_lr: 0.08,
        inner_decay: 0.92,
        meta_lr: 0.001,
        inner_steps: 30,
        tasks_per_step: 35,
        warmup: 10,
        adapt_sweeps: 3,
        shots: 10,
        recombination: true,
        grad_order: Default::default(),
        optimizer: Optimizer::adam(),
        mislabel_rate: 0.0,
    };
    let contexts = ContextSpec::new(vec![
        ContextSlot::new(3, 0, &["A"]),
        ContextSlot::new(3, 0, &["P"]),
    ]);
    base(
        Method::Dmcm,
        train,
        NetworkConfig::mlp(1, &[40, 40], 1),
        contexts,
        TaskFamily::sine2(),
        PartitionSpec::default(),
        4000,
    )
}

/// Context layouts of the three-factor study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NContext {
    /// One context over amplitude, phase and shift.
    One,
    /// Amplitude and shift contexts; phase is never modelled.
    TwoNoPhase,
    /// Joint amplitude-shift context plus a phase context.
    Two,
    Three,
    /// Amplitude split over two contexts.
    Four,
}

impl NContext {
    pub const ALL: [NContext; 5] = [
        NContext::One,
        NContext::TwoNoPhase,
        NContext::Two,
        NContext::Three,
        NContext::Four,
    ];

    pub fn label(self) -> &'static str {
        match self {
            NContext::One => "1[A,P,Y]",
            NContext::TwoNoPhase => "2[A][Y]",
            NContext::Two => "2[A,Y][P]",
            NContext::Three => "3[A][Y][P]",
            NContext::Four => "4[A1][A2][Y][P]",
        }
    }

    pub fn method(self) -> Method {
        if self == NContext::One {
            Method::Cavia
        } else {
            Method::Dmcm
        }
    }

    fn family(self) -> TaskFamily {
        if self == NContext::Four {
            TaskFamily::sine3_split_amplitude()
        } else {
            TaskFamily::sine3()
        }
    }

    fn contexts(self) -> ContextSpec {
        let s = ContextSlot::new;
        ContextSpec::new(match self {
            NContext::One => vec![s(9, 0, &["A", "P", "Y"])],
            NContext::TwoNoPhase => vec![s(4, 0, &["A"]), s(4, 0, &["Y"])],
            NContext::Two => vec![s(4, 0, &["A", "Y"]), s(4, 0, &["P"])],
            NContext::Three => vec![s(3, 1, &["A"]), s(3, 2, &["Y"]), s(3, 0, &["P"])],
            NContext::Four => vec![
                s(2, 1, &["A1"]),
                s(2, 1, &["A2"]),
                s(2, 2, &["Y"]),
                s(2, 0, &["P"]),
            ],
        })
    }
}

fn b1_train(method: Method, ood: bool) -> TrainConfig {
    let dmcm = method == Method::Dmcm;
    TrainConfig {
        inner_lr: if method == Method::Maml { 0.001 } else { 0.05 },
        inner_decay: 0.92,
        meta_lr: 0.00033,
        inner_steps: 20,
        tasks_per_step: if dmcm { 65 } else { 45 },
        warmup: if dmcm { 20 } else { 0 },
        adapt_sweeps: if !dmcm {
            1
        } else if ood {
            10
        } else {
            5
        },
        shots: 10,
        recombination: false,
        grad_order: Default::default(),
        optimizer: Optimizer::adam(),
        mislabel_rate: 0.0,
    }
}

/// Three-factor study on a 4×40 network. With `ood`, two of four intervals
/// per factor are kept for training.
pub fn b1(layout: NContext, ood: bool) -> ExperimentConfig {
    let family = layout.family();
    let exclude = if ood {
        Exclusion::PerFactor { keep: 2 }
    } else {
        Exclusion::None {}
    };
    let mut cfg = base(
        layout.method(),
        b1_train(layout.method(), ood),
        NetworkConfig::mlp(1, &[40, 40, 40, 40], 1),
        layout.contexts(),
        family.clone(),
        PartitionSpec::grid(vec![if ood { 4 } else { 1 }; family.len()], exclude),
        4000,
    );
    cfg.label = Some(layout.label().to_string());
    cfg
}

/// Three-factor recipe for the context-size ablation: an entangled
/// amplitude-phase context of `size` and a shift context of 3.
pub fn b4_param(size: usize) -> ExperimentConfig {
    let contexts = ContextSpec::new(vec![
        ContextSlot::new(size, 0, &["A", "P"]),
        ContextSlot::new(3, 0, &["Y"]),
    ]);
    let mut cfg = base(
        Method::Dmcm,
        b1_train(Method::Dmcm, false),
        NetworkConfig::mlp(1, &[40, 40, 40, 40], 1),
        contexts,
        TaskFamily::sine3(),
        PartitionSpec::default(),
        4000,
    );
    cfg.label = Some(format!("[A,P]x{size}"));
    cfg
}

/// The MAML reference on the three-factor recipe, used for timing.
pub fn b1_maml() -> ExperimentConfig {
    let mut cfg = base(
        Method::Maml,
        b1_train(Method::Maml, false),
        NetworkConfig::mlp(1, &[40, 40, 40, 40], 1),
        ContextSpec::none(),
        TaskFamily::sine3(),
        PartitionSpec::default(),
        4000,
    );
    cfg.label = Some("maml".into());
    cfg
}
