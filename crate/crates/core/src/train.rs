//! The training loop: a pretraining phase of plain QMIX, then adversarial
//! episodes rolled out in the induced environment while the MI models, the
//! dimension score table, and the adaptive firing-probability cap are kept
//! up to date. One metrics row is emitted per episode; the full learner
//! state is returned (and optionally snapshotted on a cadence) for
//! checkpointing.
//!
//! With a zero maximum group size the loop degenerates structurally to
//! vanilla QMIX training: no partition is sampled, no mask is built, no MI
//! model is updated, and every adversary-related knob is inert. All
//! randomness flows through purpose-named streams derived from the config
//! seed, so a fixed config yields a byte-identical metrics stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attackers::{
    mask_budget, sample_partition, select_mask, AttackProbState, GroupPartition, MaskSet,
    SUCCESS_WINDOW,
};
use crate::diffcore::OptimizerState;
use crate::envs::EnvSpec;
use crate::error::{CoreError, Result};
use crate::induced::{
    rollout_episode_with, ActionAttack, EpisodeTrace, InducedEnv, ReplayAction,
};
use crate::miest::{
    refresh_score_table, train_action_model, train_obs_model, ActionReconModel, DimScoreTable,
    MiBatch, ObsReconModel, DEFAULT_MI_LR,
};
use crate::qmix::{
    sync_target, td_update, EpsilonSchedule, QmixOptimizer, QmixParams, ReplayBuffer,
    AGENT_HIDDEN, DEFAULT_LR, HYPER_HIDDEN, MIXER_EMBED,
};
use crate::rng::{standard_normal, stream};

/// Steps drawn per action-model update.
const ACTION_MODEL_BATCH: usize = 64;

/// How the selected observation dimensions are corrupted during training.
/// Zero-forcing is the method proper; the other two styles exist for
/// comparison runs that swap the mask for additive noise or a gradient-sign
/// perturbation on the same dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObsStyle {
    Zero,
    Gaussian { sigma: f64 },
    Fgsm { eps: f64 },
}

impl Default for ObsStyle {
    fn default() -> Self {
        ObsStyle::Zero
    }
}

fn default_gamma() -> f64 {
    0.99
}
fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_mi_lr() -> f64 {
    DEFAULT_MI_LR
}
fn default_target_sync() -> f64 {
    0.01
}
fn default_alpha() -> f64 {
    crate::attackers::DEFAULT_ALPHA
}
fn default_eta() -> f64 {
    crate::attackers::DEFAULT_ETA
}
fn default_epsilon() -> EpsilonSchedule {
    EpsilonSchedule::standard()
}
fn default_l_per_g2() -> usize {
    2
}
fn default_buffer() -> usize {
    500
}
fn default_batch() -> usize {
    32
}
fn default_pretrain_fraction() -> f64 {
    0.05
}
fn default_mi_refresh() -> usize {
    200
}
fn default_mi_batch_limit() -> usize {
    512
}
fn default_mi_window() -> usize {
    64
}
fn default_agent_hidden() -> usize {
    AGENT_HIDDEN
}
fn default_mixer_embed() -> usize {
    MIXER_EMBED
}
fn default_hyper_hidden() -> usize {
    HYPER_HIDDEN
}
fn default_true() -> bool {
    true
}

/// Everything one training run needs. Only the environment, the seed, the
/// step budget, and the maximum attacked-group size are mandatory; the rest
/// defaults to the standard hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvSpec,
    pub seed: u64,
    pub total_env_steps: usize,
    /// Maximum attacked-group size; 0 trains vanilla QMIX.
    pub k_max: usize,
    /// Masked dimensions per member of the opposite group.
    #[serde(default = "default_l_per_g2")]
    pub l_per_g2: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: EpsilonSchedule,
    #[serde(default = "default_buffer")]
    pub buffer_episodes: usize,
    #[serde(default = "default_batch")]
    pub batch_episodes: usize,
    /// Fraction of the step budget spent pretraining without attacks.
    #[serde(default = "default_pretrain_fraction")]
    pub pretrain_fraction: f64,
    /// Episodes between score-table refreshes.
    #[serde(default = "default_mi_refresh")]
    pub mi_refresh_episodes: usize,
    /// Transition cap per MI batch and per table refresh.
    #[serde(default = "default_mi_batch_limit")]
    pub mi_batch_limit: usize,
    /// How many recent episodes feed the MI models.
    #[serde(default = "default_mi_window")]
    pub mi_window_episodes: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_mi_lr")]
    pub mi_lr: f64,
    /// Per-update mixing coefficient of the target-network moving average.
    #[serde(default = "default_target_sync")]
    pub target_sync: f64,
    #[serde(default)]
    pub replay_action: ReplayAction,
    #[serde(default = "default_agent_hidden")]
    pub agent_hidden: usize,
    #[serde(default = "default_mixer_embed")]
    pub mixer_embed: usize,
    #[serde(default = "default_hyper_hidden")]
    pub hyper_hidden: usize,
    /// Freeze the firing probability at this value instead of running the
    /// adaptive schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_p_act: Option<f64>,
    /// Override the lower endpoint of the firing-probability draw
    /// (default `1/k_max`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_act_min: Option<f64>,
    /// Select masked dimensions uniformly at random instead of by MI score.
    #[serde(default)]
    pub random_mask: bool,
    /// Disable the observation attack entirely.
    #[serde(default = "default_true")]
    pub obs_attack: bool,
    /// Disable the action attack entirely.
    #[serde(default = "default_true")]
    pub action_attack: bool,
    #[serde(default)]
    pub obs_style: ObsStyle,
    /// Count an episode as successful when its return reaches this value,
    /// instead of using the environment's own success flag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_return_threshold: Option<f64>,
    /// Snapshot cadence in episodes; 0 snapshots only at the end.
    #[serde(default)]
    pub checkpoint_every_episodes: usize,
}

impl TrainConfig {
    /// A minimal config with every optional knob at its default.
    pub fn new(env: EnvSpec, seed: u64, total_env_steps: usize, k_max: usize) -> Self {
        TrainConfig {
            env,
            seed,
            total_env_steps,
            k_max,
            l_per_g2: default_l_per_g2(),
            gamma: default_gamma(),
            epsilon: default_epsilon(),
            buffer_episodes: default_buffer(),
            batch_episodes: default_batch(),
            pretrain_fraction: default_pretrain_fraction(),
            mi_refresh_episodes: default_mi_refresh(),
            mi_batch_limit: default_mi_batch_limit(),
            mi_window_episodes: default_mi_window(),
            alpha: default_alpha(),
            eta: default_eta(),
            lr: default_lr(),
            mi_lr: default_mi_lr(),
            target_sync: default_target_sync(),
            replay_action: ReplayAction::default(),
            agent_hidden: default_agent_hidden(),
            mixer_embed: default_mixer_embed(),
            hyper_hidden: default_hyper_hidden(),
            fixed_p_act: None,
            p_act_min: None,
            random_mask: false,
            obs_attack: true,
            action_attack: true,
            obs_style: ObsStyle::default(),
            success_return_threshold: None,
            checkpoint_every_episodes: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.epsilon.validate()?;
        let n = self.env.n_agents();
        if self.k_max > n / 2 {
            return Err(CoreError::InvalidArgument(format!(
                "group size cap {} exceeds half of {n} agents",
                self.k_max
            )));
        }
        if self.total_env_steps == 0 {
            return Err(CoreError::InvalidArgument("zero step budget".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CoreError::InvalidArgument(format!(
                "gamma {} outside [0, 1)",
                self.gamma
            )));
        }
        if !(0.0..1.0).contains(&self.pretrain_fraction) {
            return Err(CoreError::InvalidArgument(format!(
                "pretrain fraction {} outside [0, 1)",
                self.pretrain_fraction
            )));
        }
        if !(self.lr > 0.0) || !(self.mi_lr > 0.0) {
            return Err(CoreError::InvalidArgument(
                "learning rates must be positive".into(),
            ));
        }
        if !(self.target_sync > 0.0 && self.target_sync <= 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "target mixing coefficient {} outside (0, 1]",
                self.target_sync
            )));
        }
        if self.alpha <= 1.0 || self.eta <= 0.0 || self.eta >= 1.0 {
            return Err(CoreError::InvalidArgument(
                "cap growth needs alpha > 1 and eta in (0, 1)".into(),
            ));
        }
        if self.buffer_episodes == 0 || self.batch_episodes == 0 {
            return Err(CoreError::InvalidArgument(
                "replay buffer and batch sizes must be positive".into(),
            ));
        }
        if self.batch_episodes > self.buffer_episodes {
            return Err(CoreError::InvalidArgument(format!(
                "batch of {} episodes exceeds buffer capacity {}",
                self.batch_episodes, self.buffer_episodes
            )));
        }
        if self.mi_refresh_episodes == 0 || self.mi_window_episodes == 0 {
            return Err(CoreError::InvalidArgument(
                "MI cadence and window must be positive".into(),
            ));
        }
        if self.agent_hidden == 0 || self.mixer_embed == 0 || self.hyper_hidden == 0 {
            return Err(CoreError::InvalidArgument(
                "network widths must be positive".into(),
            ));
        }
        if let Some(p) = self.fixed_p_act {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::InvalidArgument(format!(
                    "fixed firing probability {p} outside [0, 1]"
                )));
            }
            if self.p_act_min.is_some() {
                return Err(CoreError::InvalidArgument(
                    "fixed firing probability and a minimum are mutually exclusive".into(),
                ));
            }
        }
        if let Some(p) = self.p_act_min {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::InvalidArgument(format!(
                    "minimum firing probability {p} outside [0, 1]"
                )));
            }
        }
        match self.obs_style {
            ObsStyle::Zero => {}
            ObsStyle::Gaussian { sigma } => {
                if !(sigma >= 0.0) {
                    return Err(CoreError::InvalidArgument(format!(
                        "noise scale {sigma} must be non-negative"
                    )));
                }
            }
            ObsStyle::Fgsm { eps } => {
                if !(eps >= 0.0) {
                    return Err(CoreError::InvalidArgument(format!(
                        "perturbation budget {eps} must be non-negative"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Env steps spent in the attack-free pretraining phase.
    pub fn pretrain_env_steps(&self) -> usize {
        (self.total_env_steps as f64 * self.pretrain_fraction).round() as usize
    }
}

/// Which half of the run an episode belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    Pretrain,
    Adversarial,
}

impl TrainPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainPhase::Pretrain => "pretrain",
            TrainPhase::Adversarial => "adversarial",
        }
    }
}

/// One metrics row per finished episode. Optional fields are `None` on
/// episodes where the corresponding update did not run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Cumulative env steps after this episode.
    pub step: usize,
    /// 1-based episode index.
    pub episode: usize,
    pub phase: TrainPhase,
    pub partition_size: usize,
    pub p_act: f64,
    pub p_act_max: f64,
    pub td_loss: Option<f64>,
    pub obs_model_nll: Option<f64>,
    pub action_model_ce: Option<f64>,
    pub success: bool,
    pub episode_return: f64,
    pub seed: u64,
}

/// The complete learner state a checkpoint persists.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub policy: QmixParams,
    pub target: QmixParams,
    pub obs_model: ObsReconModel,
    pub action_model: ActionReconModel,
    pub prob_state: AttackProbState,
    pub score_table: DimScoreTable,
    pub env_steps: usize,
    pub episodes: usize,
}

/// What [`train`] hands back: the final state and, when the run stopped on
/// a non-finite loss, the diagnostic reason.
#[derive(Debug)]
pub struct TrainRun {
    pub state: TrainState,
    pub aborted: Option<String>,
}

/// Receiver for training output. `row` is called once per episode;
/// `snapshot` on the configured checkpoint cadence.
pub trait TrainSink {
    fn row(&mut self, row: &MetricsRow) -> Result<()>;
    fn snapshot(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Collects rows in memory and ignores snapshots.
#[derive(Default)]
pub struct RowBuffer {
    pub rows: Vec<MetricsRow>,
}

impl TrainSink for RowBuffer {
    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
}

/// The ordered (observer, actor) pair the observation model trains on this
/// episode, cycling through all `n(n-1)` pairs.
fn ordered_pair(index: usize, n_agents: usize) -> (usize, usize) {
    let idx = index % (n_agents * (n_agents - 1));
    let i = idx / (n_agents - 1);
    let r = idx % (n_agents - 1);
    let j = if r < i { r } else { r + 1 };
    (i, j)
}

/// Uniform mask: `l` distinct dimensions per member of either group,
/// ignoring the score table. The shape mirrors the scored selection so the
/// two differ only in where the dimensions land.
fn uniform_mask(
    partition: &GroupPartition,
    l: usize,
    obs_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MaskSet> {
    if l > obs_dim {
        return Err(CoreError::InvalidArgument(format!(
            "mask budget {l} exceeds observation width {obs_dim}"
        )));
    }
    let mut mask = MaskSet::empty(partition.n_agents());
    if partition.g1.is_empty() || partition.g2.is_empty() || l == 0 {
        return Ok(mask);
    }
    for i in partition.g1.iter().chain(partition.g2.iter()) {
        mask.dims[*i] = rand::seq::index::sample(rng, obs_dim, l).into_iter().collect();
    }
    Ok(mask)
}

/// Per-episode adversary setup derived from the config, the score table,
/// and the schedule state.
struct EpisodeSetup {
    partition: GroupPartition,
    p_act: f64,
    /// Dimensions the observation attack targets (however it corrupts them).
    selected: MaskSet,
    /// What the environment wrapper zero-forces (empty for non-zero styles).
    env_mask: MaskSet,
}

struct TrainStreams {
    policy: ChaCha8Rng,
    attack: ChaCha8Rng,
    env_seed: ChaCha8Rng,
    partition: ChaCha8Rng,
    pact: ChaCha8Rng,
    replay: ChaCha8Rng,
    mi_obs: ChaCha8Rng,
    mi_action: ChaCha8Rng,
    mi_table: ChaCha8Rng,
    mask: ChaCha8Rng,
}

impl TrainStreams {
    fn derive(seed: u64) -> Self {
        TrainStreams {
            policy: stream(seed, "rollout-policy", 0),
            attack: stream(seed, "rollout-attack", 0),
            env_seed: stream(seed, "env-seed", 0),
            partition: stream(seed, "partition", 0),
            pact: stream(seed, "pact", 0),
            replay: stream(seed, "replay-sample", 0),
            mi_obs: stream(seed, "mi-obs-batch", 0),
            mi_action: stream(seed, "mi-action-batch", 0),
            mi_table: stream(seed, "mi-table", 0),
            mask: stream(seed, "mask", 0),
        }
    }
}

fn episode_setup(
    config: &TrainConfig,
    table: &DimScoreTable,
    prob_state: &AttackProbState,
    adversarial: bool,
    streams: &mut TrainStreams,
) -> Result<EpisodeSetup> {
    let n = config.env.n_agents();
    if !adversarial || config.k_max == 0 {
        return Ok(EpisodeSetup {
            partition: GroupPartition::pass_through(n),
            p_act: 0.0,
            selected: MaskSet::empty(n),
            env_mask: MaskSet::empty(n),
        });
    }
    let partition = sample_partition(n, config.k_max, &mut streams.partition)?;
    let p_act = if !config.action_attack {
        0.0
    } else {
        match config.fixed_p_act {
            Some(p) => p,
            None => {
                let lo = config
                    .p_act_min
                    .unwrap_or(1.0 / config.k_max as f64);
                prob_state.sample_pact_from(lo, &mut streams.pact)
            }
        }
    };
    let selected = if !config.obs_attack {
        MaskSet::empty(n)
    } else {
        let budget = mask_budget(config.l_per_g2, partition.g2.len(), config.env.obs_dim());
        if config.random_mask {
            uniform_mask(&partition, budget, config.env.obs_dim(), &mut streams.mask)?
        } else {
            select_mask(table, &partition, budget)?
        }
    };
    let env_mask = match config.obs_style {
        ObsStyle::Zero => selected.clone(),
        ObsStyle::Gaussian { .. } | ObsStyle::Fgsm { .. } => MaskSet::empty(n),
    };
    Ok(EpisodeSetup {
        partition,
        p_act,
        selected,
        env_mask,
    })
}

/// Roll one training episode under the given setup.
fn run_episode(
    config: &TrainConfig,
    policy: &QmixParams,
    action_model: &ActionReconModel,
    setup: &EpisodeSetup,
    epsilon: f64,
    env_seed: u64,
    streams: &mut TrainStreams,
) -> Result<EpisodeTrace> {
    let attack = if setup.partition.is_pass_through() || !config.action_attack {
        None
    } else {
        Some(ActionAttack {
            model: action_model,
            partition: setup.partition.clone(),
            p_act: setup.p_act,
        })
    };
    let mut env = InducedEnv::wrap(config.env.build()?, setup.env_mask.clone(), attack)?;
    let dims = &setup.selected;
    match config.obs_style {
        ObsStyle::Zero => rollout_episode_with(
            &mut env,
            policy,
            epsilon,
            config.replay_action,
            env_seed,
            &mut streams.policy,
            &mut streams.attack,
            |_, _, _| Ok(()),
        ),
        ObsStyle::Gaussian { sigma } => rollout_episode_with(
            &mut env,
            policy,
            epsilon,
            config.replay_action,
            env_seed,
            &mut streams.policy,
            &mut streams.attack,
            |obs, _ctx, rng| {
                for i in 0..dims.dims.len() {
                    for &d in &dims.dims[i] {
                        obs.agent_mut(i)[d] += sigma * standard_normal(rng);
                    }
                }
                Ok(())
            },
        ),
        ObsStyle::Fgsm { eps } => rollout_episode_with(
            &mut env,
            policy,
            epsilon,
            config.replay_action,
            env_seed,
            &mut streams.policy,
            &mut streams.attack,
            |obs, ctx, _rng| {
                for i in 0..dims.dims.len() {
                    if dims.dims[i].is_empty() {
                        continue;
                    }
                    let perturbed = crate::attackers::fgsm_perturb(
                        ctx.policy,
                        obs.agent(i),
                        ctx.prev.map(|a| a[i]),
                        i,
                        ctx.hidden.row(i),
                        &ctx.avail[i],
                        eps,
                    )?;
                    for &d in &dims.dims[i] {
                        obs.agent_mut(i)[d] = perturbed[d];
                    }
                }
                Ok(())
            },
        ),
    }
}

/// Run the full training loop. Returns the final state; a non-finite TD or
/// MI loss stops the run early with the state as it stood, flagged in
/// `aborted` so the caller can persist a diagnostic checkpoint.
pub fn train(config: &TrainConfig, sink: &mut dyn TrainSink) -> Result<TrainRun> {
    config.validate()?;
    let spec = &config.env;
    let n = spec.n_agents();
    let n_actions = spec.n_actions();
    let obs_dim = spec.obs_dim();
    let seed = config.seed;
    let attacks_enabled = config.k_max > 0;

    let mut policy = QmixParams::with_sizes(
        n,
        n_actions,
        obs_dim,
        spec.state_dim(),
        config.agent_hidden,
        config.mixer_embed,
        config.hyper_hidden,
        &mut stream(seed, "init-policy", 0),
    )?;
    let mut target = policy.clone();
    let mut opt = QmixOptimizer::new(&policy, config.lr);

    let mut obs_model = ObsReconModel::init(
        n,
        n_actions,
        policy.hidden_dim(),
        obs_dim,
        1,
        &mut stream(seed, "init-obs-model", 0),
    )?;
    let mut obs_opt = OptimizerState::new(config.mi_lr, &obs_model.params);
    let mut action_model = ActionReconModel::init(
        n,
        n_actions,
        policy.hidden_dim(),
        &mut stream(seed, "init-action-model", 0),
    )?;
    let mut action_opt = OptimizerState::new(config.mi_lr, &action_model.params);

    let initial_cap = if !attacks_enabled {
        0.0
    } else {
        config
            .fixed_p_act
            .unwrap_or(1.0 / config.k_max as f64)
    };
    let mut prob_state =
        AttackProbState::with_parameters(initial_cap, config.alpha, config.eta, SUCCESS_WINDOW)?;
    let mut table = DimScoreTable::empty(n, obs_dim);
    let mut last_refresh: Option<usize> = None;

    let mut replay: ReplayBuffer<EpisodeTrace> = ReplayBuffer::new(config.buffer_episodes);
    let mut streams = TrainStreams::derive(seed);

    let pretrain_steps = config.pretrain_env_steps();
    let mut env_steps = 0usize;
    let mut episodes = 0usize;
    let mut aborted: Option<String> = None;

    while env_steps < config.total_env_steps {
        let adversarial = env_steps >= pretrain_steps;
        let phase = if adversarial {
            TrainPhase::Adversarial
        } else {
            TrainPhase::Pretrain
        };

        // Keep the score table current before it is used for selection: on
        // the configured cadence, and immediately when entering the
        // adversarial phase. A refresh that still lacks data is retried
        // next episode while the previous table stays in force.
        if attacks_enabled
            && adversarial
            && last_refresh.map_or(true, |at| episodes - at >= config.mi_refresh_episodes)
        {
            let window = replay.recent(config.mi_window_episodes);
            match refresh_score_table(
                &obs_model,
                &window,
                config.mi_batch_limit,
                episodes,
                &mut streams.mi_table,
            ) {
                Ok(fresh) => {
                    table = fresh;
                    last_refresh = Some(episodes);
                }
                Err(_) => {}
            }
        }

        let setup = episode_setup(config, &table, &prob_state, adversarial, &mut streams)?;
        let epsilon = config.epsilon.value(env_steps);
        let env_seed = streams.env_seed.gen::<u64>();
        let trace = match run_episode(
            config,
            &policy,
            &action_model,
            &setup,
            epsilon,
            env_seed,
            &mut streams,
        ) {
            Ok(trace) => trace,
            Err(CoreError::NonFinite { context }) => {
                aborted = Some(format!(
                    "non-finite values while rolling out episode {} ({context})",
                    episodes + 1
                ));
                break;
            }
            Err(e) => return Err(e),
        };

        episodes += 1;
        env_steps += trace.len();
        let episode_return = trace.total_reward();
        let success = match config.success_return_threshold {
            Some(th) => episode_return >= th,
            None => trace.success,
        };
        let partition_size = setup.partition.g1.len();
        replay.push(trace);

        let mut td_loss = None;
        if replay.len() >= config.batch_episodes {
            let batch = replay.sample(config.batch_episodes, &mut streams.replay)?;
            match td_update(
                &mut policy,
                &target,
                &mut opt,
                &batch,
                config.gamma,
                config.replay_action,
            ) {
                Ok(loss) => {
                    if loss.is_finite() {
                        sync_target(&policy, &mut target, config.target_sync)?;
                    } else {
                        aborted = Some(format!("non-finite TD loss at episode {episodes}"));
                    }
                    td_loss = Some(loss);
                }
                Err(CoreError::NonFinite { context }) => {
                    aborted =
                        Some(format!("non-finite TD pass at episode {episodes} ({context})"));
                }
                Err(e) => return Err(e),
            }
        }

        let mut obs_model_nll = None;
        let mut action_model_ce = None;
        if attacks_enabled && aborted.is_none() {
            let window = replay.recent(config.mi_window_episodes);
            let (observer, actor) = ordered_pair(episodes - 1, n);
            match MiBatch::from_traces(
                &window,
                observer,
                &[actor],
                config.mi_batch_limit,
                &mut streams.mi_obs,
            ) {
                Ok(batch) => match train_obs_model(&mut obs_model, &mut obs_opt, &batch) {
                    Ok(fit) => obs_model_nll = Some(fit.nll),
                    Err(CoreError::NonFinite { context }) => {
                        aborted = Some(format!(
                            "non-finite observation-model loss at episode {episodes} ({context})"
                        ));
                    }
                    Err(e) => return Err(e),
                },
                // Not enough transitions yet; the model waits for data.
                Err(_) => {}
            }
            if aborted.is_none() && !window.is_empty() {
                let k_max = config.k_max;
                let ce = train_action_model(
                    &mut action_model,
                    &mut action_opt,
                    &window,
                    ACTION_MODEL_BATCH,
                    &mut streams.mi_action,
                    |r| sample_partition(n, k_max, r).expect("group size cap validated").g1,
                );
                match ce {
                    Ok(v) => action_model_ce = Some(v),
                    Err(CoreError::NonFinite { context }) => {
                        aborted = Some(format!(
                            "non-finite action-model loss at episode {episodes} ({context})"
                        ));
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        if attacks_enabled && adversarial && config.fixed_p_act.is_none() {
            prob_state.update_pact(success);
        }

        sink.row(&MetricsRow {
            step: env_steps,
            episode: episodes,
            phase,
            partition_size,
            p_act: setup.p_act,
            p_act_max: prob_state.p_act_max,
            td_loss,
            obs_model_nll,
            action_model_ce,
            success,
            episode_return,
            seed,
        })?;

        if aborted.is_some() {
            break;
        }

        if config.checkpoint_every_episodes > 0
            && episodes % config.checkpoint_every_episodes == 0
            && env_steps < config.total_env_steps
        {
            sink.snapshot(&TrainState {
                config: config.clone(),
                policy: policy.clone(),
                target: target.clone(),
                obs_model: obs_model.clone(),
                action_model: action_model.clone(),
                prob_state: prob_state.clone(),
                score_table: table.clone(),
                env_steps,
                episodes,
            })?;
        }
    }

    let state = TrainState {
        config: config.clone(),
        policy,
        target,
        obs_model,
        action_model,
        prob_state,
        score_table: table,
        env_steps,
        episodes,
    };
    sink.snapshot(&state)?;
    Ok(TrainRun { state, aborted })
}
