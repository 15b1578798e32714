//! Desk-scale laboratory for interaction-breaking adversarial training of
//! cooperative multi-agent policies.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffcore`] - dense `f64` tensors, a reverse-mode tape, feedforward and
//!   gated-recurrent layers, and an RMSProp optimizer.
//! * [`envs`] - two gridworld environments (cooperative foraging and a small
//!   skirmish combat task) behind a common interface, with observation
//!   layouts and robustness perturbations.
//! * [`qmix`] - recurrent per-agent utility networks, a monotonic mixing
//!   network, an episode replay buffer, and the TD learning step.
//! * [`miest`] - conditional-Gaussian and categorical reconstruction models
//!   with contrastive log-ratio (CLUB) mutual-information scoring per
//!   observation dimension, plus a group-level redundancy probe.
//! * [`attackers`] - group partition sampling, MI-guided observation masking,
//!   MI-minimizing action replacement with an adaptive firing probability,
//!   and the baseline attack suite.
//! * [`induced`] / [`train`] - the attacked-environment wrapper, episode
//!   rollouts, the adversarial training loop, and a wrapper-vs-composition
//!   equivalence probe.
//! * [`harness`] - experiment configuration, evaluation matrices, MI table
//!   dumps, ablations, checkpoints, and metrics output.
//!
//! Everything is deterministic given a seed: random streams are derived per
//! purpose in [`rng`], parameters live in ordered maps, and no hash-map
//! iteration touches a numeric path.

pub mod attackers;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod harness;
pub mod induced;
pub mod miest;
pub mod qmix;
pub mod rng;
pub mod stats;
pub mod train;

pub use attackers::{AttackProbState, AttackSpec, GroupPartition, MaskSet};
pub use diffcore::{
    Architecture, Gradients, ModelParams, OptimizerState, Tape, Tensor,
};
pub use envs::{Env, EnvSpec, JointObservation, ObsLayout, PerturbationSpec, StepResult};
pub use error::{CkptError, CoreError, Result};
pub use harness::{
    AblationVariant, CsvSink, EvalCell, EvalReport, ExperimentConfig, MetricsWriter, MiDump,
    MiDumpAgent, SelfcheckReport,
};
pub use induced::{EpisodeTrace, InducedEnv, ReplayAction, Transition};
pub use miest::{ActionReconModel, DimScoreTable, MiBatch, ObsReconModel, RedundancyReport};
pub use qmix::{EpsilonSchedule, MixerParams, QmixOptimizer, QmixParams, ReplayBuffer};
pub use train::{MetricsRow, TrainConfig, TrainRun, TrainState};
