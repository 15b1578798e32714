//! Value-decomposition learner: parameter-shared recurrent per-agent utility
//! networks, a state-conditioned monotonic mixing network, episode replay,
//! epsilon-greedy action selection, and the temporal-difference update.
//!
//! Each agent runs the same recurrent network over its own stream of
//! (observation, previous-action one-hot, agent-id one-hot) inputs and emits
//! one utility per action. A hypernetwork conditioned on the global state
//! produces the mixing weights; taking their absolute value makes the mixed
//! joint value nondecreasing in every per-agent utility, so the greedy joint
//! action can be recovered from per-agent argmaxes.
//!
//! Unavailable actions are never written into the utilities themselves; they
//! are excluded at selection and target-max time, which keeps utilities
//! comparable across steps with different availability.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    collect_grads, forward_on_tape, recurrent_step, rmsprop_step, Activation, Architecture,
    ModelParams, OptimizerState, Tape, Tensor, Var,
};
use crate::envs::{JointAction, JointObservation};
use crate::error::{CoreError, Result};
use crate::induced::{EpisodeTrace, ReplayAction, Transition};

/// Recurrent cell width of the shared agent network.
pub const AGENT_HIDDEN: usize = 64;
/// Mixing-network embedding width.
pub const MIXER_EMBED: usize = 32;
/// Hidden width of the mixing hypernetworks.
pub const HYPER_HIDDEN: usize = 32;
/// Default RMSProp learning rate.
pub const DEFAULT_LR: f64 = 5e-4;

/// Agent-network architecture: observation plus previous-action and agent-id
/// one-hots in, one utility per action out.
pub fn agent_architecture(
    obs_dim: usize,
    n_actions: usize,
    n_agents: usize,
    hidden: usize,
) -> Architecture {
    Architecture::recurrent(
        obs_dim + n_actions + n_agents,
        hidden,
        n_actions,
        Activation::Relu,
    )
}

/// One input row for the shared agent network. `prev_action` is `None` on
/// the first step of an episode, encoded as an all-zero one-hot.
pub fn agent_input_row(
    obs: &[f64],
    prev_action: Option<usize>,
    agent_id: usize,
    n_actions: usize,
    n_agents: usize,
) -> Vec<f64> {
    let mut row = Vec::with_capacity(obs.len() + n_actions + n_agents);
    row.extend_from_slice(obs);
    let mut onehot = vec![0.0; n_actions];
    if let Some(a) = prev_action {
        onehot[a] = 1.0;
    }
    row.extend_from_slice(&onehot);
    let mut id = vec![0.0; n_agents];
    id[agent_id] = 1.0;
    row.extend_from_slice(&id);
    row
}

/// One agent's local trajectory: the observation sequence plus the actions
/// taken between observations.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentHistory {
    pub agent_id: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
}

/// Mixing-network parameters: four hypernetworks mapping the global state to
/// per-agent weights, an embedding bias, output weights, and an output bias.
/// Weight outputs are used through an absolute value, which is what makes
/// the mixture monotone.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerParams {
    pub hyper_w1: ModelParams,
    pub hyper_b1: ModelParams,
    pub hyper_w2: ModelParams,
    pub hyper_b2: ModelParams,
    pub n_agents: usize,
    pub embed: usize,
}

/// Tape handles for every mixer parameter, grouped per hypernetwork.
pub struct MixerLeaves {
    pub w1: BTreeMap<String, Var>,
    pub b1: BTreeMap<String, Var>,
    pub w2: BTreeMap<String, Var>,
    pub b2: BTreeMap<String, Var>,
}

impl MixerParams {
    pub fn init(
        n_agents: usize,
        state_dim: usize,
        embed: usize,
        hyper_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let archs = Self::architectures(n_agents, state_dim, embed, hyper_hidden);
        Ok(MixerParams {
            hyper_w1: ModelParams::init(archs.0, rng)?,
            hyper_b1: ModelParams::init(archs.1, rng)?,
            hyper_w2: ModelParams::init(archs.2, rng)?,
            hyper_b2: ModelParams::init(archs.3, rng)?,
            n_agents,
            embed,
        })
    }

    pub fn zeros(
        n_agents: usize,
        state_dim: usize,
        embed: usize,
        hyper_hidden: usize,
    ) -> Result<Self> {
        let archs = Self::architectures(n_agents, state_dim, embed, hyper_hidden);
        Ok(MixerParams {
            hyper_w1: ModelParams::zeros(archs.0)?,
            hyper_b1: ModelParams::zeros(archs.1)?,
            hyper_w2: ModelParams::zeros(archs.2)?,
            hyper_b2: ModelParams::zeros(archs.3)?,
            n_agents,
            embed,
        })
    }

    fn architectures(
        n_agents: usize,
        state_dim: usize,
        embed: usize,
        hyper_hidden: usize,
    ) -> (Architecture, Architecture, Architecture, Architecture) {
        (
            Architecture::mlp(&[state_dim, hyper_hidden, n_agents * embed], Activation::Relu),
            Architecture::mlp(&[state_dim, embed], Activation::Relu),
            Architecture::mlp(&[state_dim, hyper_hidden, embed], Activation::Relu),
            Architecture::mlp(&[state_dim, hyper_hidden, 1], Activation::Relu),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.hyper_w1.arch.input_size()
    }

    pub fn leaves(&self, tape: &Tape) -> MixerLeaves {
        MixerLeaves {
            w1: self.hyper_w1.leaves(tape),
            b1: self.hyper_b1.leaves(tape),
            w2: self.hyper_w2.leaves(tape),
            b2: self.hyper_b2.leaves(tape),
        }
    }

    /// Differentiable mixture of per-agent utilities `q` (`batch x n_agents`)
    /// under states (`batch x state_dim`), producing `batch x 1` joint
    /// values. The first weight layer is stored embedding-major, so tiling
    /// the utilities across the embedding lines both operands up for an
    /// elementwise product followed by block sums.
    pub fn mix_vars(&self, tape: &Tape, leaves: &MixerLeaves, q: Var, state: Var) -> Result<Var> {
        if q.cols() != self.n_agents {
            return Err(CoreError::shape(
                "mixer utilities",
                format!("{} agents", self.n_agents),
                format!("{} columns", q.cols()),
            ));
        }
        if q.rows() != state.rows() {
            return Err(CoreError::shape(
                "mixer batch",
                format!("{} rows", q.rows()),
                format!("{} state rows", state.rows()),
            ));
        }
        let w1 = tape.abs(forward_on_tape(tape, &self.hyper_w1.arch, &leaves.w1, state, None)?.0);
        let b1 = forward_on_tape(tape, &self.hyper_b1.arch, &leaves.b1, state, None)?.0;
        let w2 = tape.abs(forward_on_tape(tape, &self.hyper_w2.arch, &leaves.w2, state, None)?.0);
        let b2 = forward_on_tape(tape, &self.hyper_b2.arch, &leaves.b2, state, None)?.0;
        let tiled = tape.repeat_cols(q, self.embed);
        let embedded = tape.sum_block_cols(tape.mul_elem(tiled, w1), self.n_agents);
        let hidden = tape.elu(tape.add(embedded, b1));
        let out = tape.sum_block_cols(tape.mul_elem(hidden, w2), self.embed);
        Ok(tape.add(out, b2))
    }

    /// Forward-only mixture on plain tensors.
    pub fn mix(&self, q: &Tensor, state: &Tensor) -> Result<Tensor> {
        if !q.all_finite() || !state.all_finite() {
            return Err(CoreError::NonFinite {
                context: "mixer input".into(),
            });
        }
        let tape = Tape::new();
        let leaves = self.leaves(&tape);
        let out = self.mix_vars(&tape, &leaves, tape.leaf(q), tape.leaf(state))?;
        Ok(tape.value(out))
    }

    fn ema_from(&mut self, src: &MixerParams, c: f64) -> Result<()> {
        ema(&src.hyper_w1, &mut self.hyper_w1, c)?;
        ema(&src.hyper_b1, &mut self.hyper_b1, c)?;
        ema(&src.hyper_w2, &mut self.hyper_w2, c)?;
        ema(&src.hyper_b2, &mut self.hyper_b2, c)
    }
}

/// Full learner parameter set: the shared agent network plus the mixer.
#[derive(Clone, Debug, PartialEq)]
pub struct QmixParams {
    pub agent: ModelParams,
    pub mixer: MixerParams,
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
}

impl QmixParams {
    pub fn new(
        n_agents: usize,
        n_actions: usize,
        obs_dim: usize,
        state_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::with_sizes(
            n_agents, n_actions, obs_dim, state_dim, AGENT_HIDDEN, MIXER_EMBED, HYPER_HIDDEN, rng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_sizes(
        n_agents: usize,
        n_actions: usize,
        obs_dim: usize,
        state_dim: usize,
        hidden: usize,
        embed: usize,
        hyper_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_agents == 0 || n_actions == 0 || obs_dim == 0 || state_dim == 0 {
            return Err(CoreError::InvalidArgument(
                "learner dimensions must be positive".into(),
            ));
        }
        Ok(QmixParams {
            agent: ModelParams::init(
                agent_architecture(obs_dim, n_actions, n_agents, hidden),
                rng,
            )?,
            mixer: MixerParams::init(n_agents, state_dim, embed, hyper_hidden, rng)?,
            n_agents,
            n_actions,
            obs_dim,
            state_dim,
        })
    }

    /// All-zero parameters with the same shapes as [`QmixParams::with_sizes`].
    #[allow(clippy::too_many_arguments)]
    pub fn zeros(
        n_agents: usize,
        n_actions: usize,
        obs_dim: usize,
        state_dim: usize,
        hidden: usize,
        embed: usize,
        hyper_hidden: usize,
    ) -> Result<Self> {
        Ok(QmixParams {
            agent: ModelParams::zeros(agent_architecture(obs_dim, n_actions, n_agents, hidden))?,
            mixer: MixerParams::zeros(n_agents, state_dim, embed, hyper_hidden)?,
            n_agents,
            n_actions,
            obs_dim,
            state_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }

    pub fn hidden_dim(&self) -> usize {
        self.agent
            .arch
            .hidden_size()
            .expect("agent network is recurrent")
    }

    /// Fresh all-zero recurrent state, one row per agent.
    pub fn init_hidden(&self) -> Tensor {
        Tensor::zeros(self.n_agents, self.hidden_dim())
    }

    /// One synchronized step for all agents: stacks per-agent input rows and
    /// advances the shared recurrent network, returning per-agent utilities
    /// (`n_agents x n_actions`) and the next hidden state.
    pub fn utilities_step(
        &self,
        obs: &JointObservation,
        prev: Option<&JointAction>,
        hidden: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let input = self.input_rows(obs, prev)?;
        recurrent_step(&self.agent, &input, hidden)
    }

    fn input_rows(&self, obs: &JointObservation, prev: Option<&JointAction>) -> Result<Tensor> {
        if obs.n_agents() != self.n_agents {
            return Err(CoreError::shape(
                "joint observation",
                format!("{} agents", self.n_agents),
                format!("{} agents", obs.n_agents()),
            ));
        }
        let mut data = Vec::with_capacity(self.n_agents * self.input_dim());
        for i in 0..self.n_agents {
            if obs.agent(i).len() != self.obs_dim {
                return Err(CoreError::shape(
                    format!("observation of agent {i}"),
                    format!("{} dims", self.obs_dim),
                    format!("{} dims", obs.agent(i).len()),
                ));
            }
            let p = prev.map(|acts| acts[i]);
            if let Some(a) = p {
                if a >= self.n_actions {
                    return Err(CoreError::InvalidArgument(format!(
                        "previous action {a} out of range for agent {i}"
                    )));
                }
            }
            data.extend(agent_input_row(
                obs.agent(i),
                p,
                i,
                self.n_actions,
                self.n_agents,
            ));
        }
        Ok(Tensor::from_vec(self.n_agents, self.input_dim(), data))
    }
}

/// Utilities for one agent after replaying its whole local history through
/// the shared network from a zero hidden state.
pub fn agent_utilities(params: &QmixParams, history: &AgentHistory) -> Result<Tensor> {
    if history.observations.is_empty() {
        return Err(CoreError::InvalidArgument("empty agent history".into()));
    }
    if history.actions.len() + 1 != history.observations.len() {
        return Err(CoreError::InvalidArgument(format!(
            "history has {} observations but {} actions",
            history.observations.len(),
            history.actions.len()
        )));
    }
    if history.agent_id >= params.n_agents {
        return Err(CoreError::InvalidArgument(format!(
            "agent id {} out of range",
            history.agent_id
        )));
    }
    let mut hidden = Tensor::zeros(1, params.hidden_dim());
    let mut utilities = None;
    for (t, obs) in history.observations.iter().enumerate() {
        let prev = if t == 0 {
            None
        } else {
            Some(history.actions[t - 1])
        };
        let row = agent_input_row(obs, prev, history.agent_id, params.n_actions, params.n_agents);
        let input = Tensor::from_vec(1, row.len(), row);
        let (q, h) = recurrent_step(&params.agent, &input, &hidden)?;
        hidden = h;
        utilities = Some(q);
    }
    Ok(utilities.expect("non-empty history"))
}

/// Per-agent epsilon-greedy selection over available actions. With
/// probability `epsilon` an agent picks uniformly among its available
/// actions; otherwise it takes the highest-utility available action, ties
/// going to the lowest action index. One probability draw is consumed per
/// agent even at `epsilon` 0, so changing epsilon never shifts the stream
/// alignment of later draws.
pub fn select_actions(
    utilities: &Tensor,
    avail: &[Vec<bool>],
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<JointAction> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(CoreError::InvalidArgument(format!(
            "epsilon {epsilon} outside [0, 1]"
        )));
    }
    if avail.len() != utilities.rows() {
        return Err(CoreError::shape(
            "availability masks",
            format!("{} agents", utilities.rows()),
            format!("{} masks", avail.len()),
        ));
    }
    let mut joint = Vec::with_capacity(avail.len());
    for (i, mask) in avail.iter().enumerate() {
        if mask.len() != utilities.cols() {
            return Err(CoreError::shape(
                format!("availability of agent {i}"),
                format!("{} actions", utilities.cols()),
                format!("{} entries", mask.len()),
            ));
        }
        let open: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
        if open.is_empty() {
            return Err(CoreError::InvalidArgument(format!(
                "agent {i} has no available action"
            )));
        }
        let coin: f64 = rng.gen();
        let action = if coin < epsilon {
            open[rng.gen_range(0..open.len())]
        } else {
            let mut best = open[0];
            for &a in &open[1..] {
                if utilities.get(i, a) > utilities.get(i, best) {
                    best = a;
                }
            }
            best
        };
        joint.push(action);
    }
    Ok(joint)
}

/// Ring buffer of completed episodes with uniform with-replacement sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            items: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Append one episode, evicting the oldest at capacity.
    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn oldest(&self) -> Option<&T> {
        self.items.front()
    }

    /// The newest `m` items (or fewer while filling), oldest first.
    pub fn recent(&self, m: usize) -> Vec<&T> {
        let skip = self.items.len().saturating_sub(m);
        self.items.iter().skip(skip).collect()
    }

    /// Uniform sample with replacement. Sampling more than the buffer holds
    /// is rejected rather than silently duplicating a tiny population.
    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&T>> {
        if batch == 0 {
            return Err(CoreError::InvalidArgument("empty batch requested".into()));
        }
        if self.items.len() < batch {
            return Err(CoreError::InvalidArgument(format!(
                "replay holds {} episodes, batch needs {batch}",
                self.items.len()
            )));
        }
        Ok((0..batch)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect())
    }
}

/// Linear exploration schedule over environment steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: usize,
}

impl EpsilonSchedule {
    pub fn new(start: f64, end: f64, anneal_steps: usize) -> Result<Self> {
        let s = EpsilonSchedule {
            start,
            end,
            anneal_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn standard() -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            anneal_steps: 50_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start >= self.end && self.end >= 0.0 && self.start <= 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "epsilon schedule needs 1 >= start >= end >= 0, got {} -> {}",
                self.start, self.end
            )));
        }
        if self.anneal_steps == 0 {
            return Err(CoreError::InvalidArgument(
                "epsilon anneal horizon must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn value(&self, env_steps: usize) -> f64 {
        if env_steps >= self.anneal_steps {
            self.end
        } else {
            let frac = env_steps as f64 / self.anneal_steps as f64;
            self.start + (self.end - self.start) * frac
        }
    }
}

fn ema(src: &ModelParams, dst: &mut ModelParams, c: f64) -> Result<()> {
    for (name, s) in src.iter() {
        let d = dst.get_mut(name)?;
        for (dv, sv) in d.data_mut().iter_mut().zip(s.data()) {
            *dv = (1.0 - c) * *dv + c * sv;
        }
    }
    Ok(())
}

/// Exponential-moving-average target update: `target <- (1-c)*target +
/// c*params` over every tensor in the learner. `c` = 1 is a hard copy.
pub fn sync_target(params: &QmixParams, target: &mut QmixParams, c: f64) -> Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "target mixing coefficient {c} outside (0, 1]"
        )));
    }
    ema(&params.agent, &mut target.agent, c)?;
    target.mixer.ema_from(&params.mixer, c)
}

/// RMSProp state for every network in the learner, plus an optional global
/// gradient-norm clip applied across all of them jointly.
#[derive(Clone, Debug)]
pub struct QmixOptimizer {
    pub agent: OptimizerState,
    pub hyper_w1: OptimizerState,
    pub hyper_b1: OptimizerState,
    pub hyper_w2: OptimizerState,
    pub hyper_b2: OptimizerState,
    pub grad_clip: Option<f64>,
}

impl QmixOptimizer {
    pub fn new(params: &QmixParams, lr: f64) -> Self {
        QmixOptimizer {
            agent: OptimizerState::new(lr, &params.agent),
            hyper_w1: OptimizerState::new(lr, &params.mixer.hyper_w1),
            hyper_b1: OptimizerState::new(lr, &params.mixer.hyper_b1),
            hyper_w2: OptimizerState::new(lr, &params.mixer.hyper_w2),
            hyper_b2: OptimizerState::new(lr, &params.mixer.hyper_b2),
            grad_clip: Some(10.0),
        }
    }
}

/// Squared one-step temporal-difference error
/// `(reward + gamma * target_max - q_tot)^2`.
pub fn td_error(q_tot: f64, target_max: f64, reward: f64, gamma: f64) -> f64 {
    let y = reward + gamma * target_max;
    (y - q_tot) * (y - q_tot)
}

fn learning_action(tr: &Transition, agent: usize, which: ReplayAction) -> usize {
    match which {
        ReplayAction::Intermediate => tr.intermediate[agent],
        ReplayAction::Executed => tr.executed[agent],
    }
}

/// One temporal-difference step over a batch of complete episodes: the mean,
/// over all valid steps in the batch, of the squared error between the mixed
/// value of the taken actions and the bootstrapped target
/// `r + gamma * Q^tot_target(argmax)`, followed by one RMSProp step on the
/// agent network and all four hypernetworks. Returns the loss. Parameters
/// are untouched whenever any gradient is non-finite.
pub fn td_update(
    params: &mut QmixParams,
    target: &QmixParams,
    opt: &mut QmixOptimizer,
    batch: &[&EpisodeTrace],
    gamma: f64,
    replay_action: ReplayAction,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty episode batch".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(CoreError::InvalidArgument(format!(
            "gamma {gamma} outside [0, 1)"
        )));
    }
    let n = params.n_agents;
    let in_dim = params.input_dim();
    let hid = params.hidden_dim();
    let b_eps = batch.len();
    let t_max = batch.iter().map(|e| e.len()).max().expect("non-empty");
    let n_valid: usize = batch.iter().map(|e| e.len()).sum();

    // Stacked agent-network input for step `t`: one row per (episode, agent),
    // zeros past an episode's end.
    let inputs_at = |t: usize| -> Tensor {
        let mut m = Tensor::zeros(b_eps * n, in_dim);
        for (b, ep) in batch.iter().enumerate() {
            if t > ep.len() {
                continue;
            }
            for i in 0..n {
                let prev = if t == 0 {
                    None
                } else {
                    Some(learning_action(&ep.transitions[t - 1], i, replay_action))
                };
                let row =
                    agent_input_row(ep.obs_at(t).agent(i), prev, i, params.n_actions, n);
                m.data_mut()[(b * n + i) * in_dim..(b * n + i + 1) * in_dim]
                    .copy_from_slice(&row);
            }
        }
        m
    };
    let states_at = |t: usize| -> Tensor {
        let ds = params.state_dim;
        let mut m = Tensor::zeros(b_eps, ds);
        for (b, ep) in batch.iter().enumerate() {
            if t <= ep.len() {
                m.data_mut()[b * ds..(b + 1) * ds].copy_from_slice(ep.state_at(t));
            }
        }
        m
    };

    // Target values are plain tensor arithmetic: run the target network over
    // the same inputs and bootstrap y_t = r_t + gamma * Q^tot_targ(t+1) on
    // non-terminal steps.
    let mut targets = vec![vec![0.0; b_eps]; t_max];
    {
        let mut th = Tensor::zeros(b_eps * n, hid);
        for t in 0..=t_max {
            let (tq, th_next) = recurrent_step(&target.agent, &inputs_at(t), &th)?;
            th = th_next;
            if t == 0 {
                continue;
            }
            let mut qmax = Tensor::zeros(b_eps, n);
            for (b, ep) in batch.iter().enumerate() {
                if t > ep.len() {
                    continue;
                }
                let avail = ep.avail_at(t);
                for i in 0..n {
                    let row = tq.row(b * n + i);
                    let mut best = f64::NEG_INFINITY;
                    for (a, &ok) in avail[i].iter().enumerate() {
                        if ok && row[a] > best {
                            best = row[a];
                        }
                    }
                    qmax.set(b, i, best);
                }
            }
            let tq_tot = target.mixer.mix(&qmax, &states_at(t))?;
            for (b, ep) in batch.iter().enumerate() {
                if t > ep.len() {
                    continue;
                }
                let tr = &ep.transitions[t - 1];
                targets[t - 1][b] =
                    tr.reward + gamma * if tr.done { 0.0 } else { tq_tot.get(b, 0) };
            }
        }
    }

    // Differentiable side: replay the online network, gather the taken
    // actions, mix per step, and accumulate the masked squared error.
    let tape = Tape::new();
    let agent_leaves = params.agent.leaves(&tape);
    let mixer_leaves = params.mixer.leaves(&tape);
    let mut hidden = tape.leaf(&Tensor::zeros(b_eps * n, hid));
    let mut loss_sum: Option<Var> = None;
    for t in 0..t_max {
        let (q, h_next) = forward_on_tape(
            &tape,
            &params.agent.arch,
            &agent_leaves,
            tape.leaf_owned(inputs_at(t)),
            Some(hidden),
        )?;
        hidden = h_next.expect("recurrent agent network");
        let mut taken = vec![0usize; b_eps * n];
        let mut mask = Tensor::zeros(b_eps, 1);
        let mut y = Tensor::zeros(b_eps, 1);
        for (b, ep) in batch.iter().enumerate() {
            if t < ep.len() {
                for i in 0..n {
                    taken[b * n + i] =
                        learning_action(&ep.transitions[t], i, replay_action);
                }
                mask.set(b, 0, 1.0);
                y.set(b, 0, targets[t][b]);
            }
        }
        let q_taken = tape.reshape(tape.gather_cols(q, &taken), b_eps, n);
        let q_tot = params
            .mixer
            .mix_vars(&tape, &mixer_leaves, q_taken, tape.leaf_owned(states_at(t)))?;
        let diff = tape.mul_elem(tape.sub(q_tot, tape.leaf_owned(y)), tape.leaf_owned(mask));
        let sq = tape.sum(tape.mul_elem(diff, diff));
        loss_sum = Some(match loss_sum {
            Some(acc) => tape.add(acc, sq),
            None => sq,
        });
    }
    let loss_var = tape.scale(loss_sum.expect("at least one step"), 1.0 / n_valid as f64);
    let loss = tape.value(loss_var).get(0, 0);
    if !loss.is_finite() {
        return Err(CoreError::NonFinite {
            context: "temporal-difference loss".into(),
        });
    }

    let grads = tape.backward(loss_var);
    let mut agent_g = collect_grads(&grads, &agent_leaves);
    let mut w1_g = collect_grads(&grads, &mixer_leaves.w1);
    let mut b1_g = collect_grads(&grads, &mixer_leaves.b1);
    let mut w2_g = collect_grads(&grads, &mixer_leaves.w2);
    let mut b2_g = collect_grads(&grads, &mixer_leaves.b2);
    {
        let all = [&agent_g, &w1_g, &b1_g, &w2_g, &b2_g];
        let sq: f64 = all
            .iter()
            .flat_map(|m| m.values())
            .map(Tensor::sq_norm)
            .sum();
        if !sq.is_finite() {
            return Err(CoreError::NonFinite {
                context: "temporal-difference gradients".into(),
            });
        }
        if let Some(clip) = opt.grad_clip {
            let norm = sq.sqrt();
            if norm > clip {
                let scale = clip / norm;
                for m in [&mut agent_g, &mut w1_g, &mut b1_g, &mut w2_g, &mut b2_g] {
                    for t in m.values_mut() {
                        for v in t.data_mut() {
                            *v *= scale;
                        }
                    }
                }
            }
        }
    }
    rmsprop_step(&mut params.agent, &agent_g, &mut opt.agent)?;
    rmsprop_step(&mut params.mixer.hyper_w1, &w1_g, &mut opt.hyper_w1)?;
    rmsprop_step(&mut params.mixer.hyper_b1, &b1_g, &mut opt.hyper_b1)?;
    rmsprop_step(&mut params.mixer.hyper_w2, &w2_g, &mut opt.hyper_w2)?;
    rmsprop_step(&mut params.mixer.hyper_b2, &b2_g, &mut opt.hyper_b2)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::stats::chi_square_uniform_pvalue;
    use std::collections::BTreeSet;

    fn small_params(seed: u64) -> QmixParams {
        let mut rng = stream(seed, "qmix-test", 0);
        QmixParams::with_sizes(2, 3, 4, 3, 16, 8, 8, &mut rng).unwrap()
    }

    fn obs2() -> JointObservation {
        JointObservation::new(vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.4, 0.3, 0.2, 0.1]])
    }

    #[test]
    fn utilities_deterministic_and_shaped() {
        let p = small_params(1);
        let h = p.init_hidden();
        let (q1, h1) = p.utilities_step(&obs2(), None, &h).unwrap();
        let (q2, h2) = p.utilities_step(&obs2(), None, &h).unwrap();
        assert_eq!(q1, q2);
        assert_eq!(h1, h2);
        assert_eq!(q1.shape(), (2, 3));
        assert_eq!(h1.shape(), (2, 16));
    }

    #[test]
    fn identical_histories_and_ids_give_identical_utilities() {
        let p = small_params(2);
        let hist = AgentHistory {
            agent_id: 1,
            observations: vec![vec![0.5, 0.1, 0.0, 0.2]; 3],
            actions: vec![2, 0],
        };
        let a = agent_utilities(&p, &hist).unwrap();
        let b = agent_utilities(&p, &hist).unwrap();
        assert_eq!(a, b);
        let mut other = hist.clone();
        other.agent_id = 0;
        assert_ne!(agent_utilities(&p, &other).unwrap(), a);
    }

    #[test]
    fn greedy_selection_is_argmax_with_lowest_index_ties() {
        let q = Tensor::from_vec(2, 3, vec![1.0, 5.0, 5.0, 2.0, 2.0, 2.0]);
        let avail = vec![vec![true, true, true]; 2];
        let mut rng = stream(3, "select", 0);
        let joint = select_actions(&q, &avail, 0.0, &mut rng).unwrap();
        assert_eq!(joint, vec![1, 0]);
    }

    #[test]
    fn unavailable_actions_are_never_selected_and_do_not_shift_others() {
        let q = Tensor::from_vec(1, 3, vec![9.0, 1.0, 2.0]);
        let avail = vec![vec![false, true, true]];
        let mut rng = stream(4, "select", 0);
        let joint = select_actions(&q, &avail, 0.0, &mut rng).unwrap();
        assert_eq!(joint, vec![2], "argmax restricted to available actions");
        let empty = select_actions(&q, &[vec![false, false, false]], 0.0, &mut rng);
        assert!(empty.is_err());
    }

    #[test]
    fn adding_a_constant_per_agent_keeps_the_greedy_joint_action() {
        let p = small_params(5);
        let h = p.init_hidden();
        let (q, _) = p.utilities_step(&obs2(), None, &h).unwrap();
        let avail = vec![vec![true, true, true]; 2];
        let mut rng = stream(5, "select", 0);
        let base = select_actions(&q, &avail, 0.0, &mut rng.clone()).unwrap();
        let mut shifted = q.clone();
        for a in 0..3 {
            let v = shifted.get(0, a);
            shifted.set(0, a, v + 7.5);
        }
        let moved = select_actions(&shifted, &avail, 0.0, &mut rng).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn full_exploration_is_uniform_over_available_actions() {
        let q = Tensor::from_vec(1, 4, vec![10.0, -1.0, 0.0, 3.0]);
        let avail = vec![vec![true, false, true, true]];
        let mut rng = stream(6, "select-uniform", 0);
        let mut counts = [0u64; 4];
        for _ in 0..10_000 {
            let a = select_actions(&q, &avail, 1.0, &mut rng).unwrap()[0];
            counts[a] += 1;
        }
        assert_eq!(counts[1], 0);
        let open = [counts[0], counts[2], counts[3]];
        assert!(chi_square_uniform_pvalue(&open) > 0.01);
    }

    #[test]
    fn replay_evicts_oldest_at_capacity() {
        let mut buf = ReplayBuffer::new(5000);
        for i in 0..5001usize {
            buf.push(i);
        }
        assert_eq!(buf.len(), 5000);
        assert_eq!(*buf.oldest().unwrap(), 1);
    }

    #[test]
    fn replay_sampling_uniform_and_deterministic() {
        let mut buf = ReplayBuffer::new(8);
        for i in 0..8usize {
            buf.push(i);
        }
        assert!(buf.sample(9, &mut stream(7, "replay", 0)).is_err());
        let a: Vec<usize> = buf
            .sample(4, &mut stream(7, "replay", 1))
            .unwrap()
            .into_iter()
            .copied()
            .collect();
        let b: Vec<usize> = buf
            .sample(4, &mut stream(7, "replay", 1))
            .unwrap()
            .into_iter()
            .copied()
            .collect();
        assert_eq!(a, b);
        let mut counts = [0u64; 8];
        let mut rng = stream(7, "replay", 2);
        for _ in 0..10_000 {
            counts[*buf.sample(1, &mut rng).unwrap()[0]] += 1;
        }
        assert!(chi_square_uniform_pvalue(&counts) > 0.01);
    }

    #[test]
    fn epsilon_schedule_interpolates_linearly() {
        let s = EpsilonSchedule::new(1.0, 0.05, 1000).unwrap();
        assert!((s.value(0) - 1.0).abs() < 1e-12);
        assert!((s.value(500) - 0.525).abs() < 1e-12);
        assert!((s.value(1000) - 0.05).abs() < 1e-12);
        assert!((s.value(100_000) - 0.05).abs() < 1e-12);
        assert!(EpsilonSchedule::new(0.1, 0.5, 10).is_err());
    }

    #[test]
    fn target_sync_is_an_exponential_average() {
        let p = small_params(8);
        let mut t = small_params(9);
        // c = 1 is a hard copy.
        let mut hard = t.clone();
        sync_target(&p, &mut hard, 1.0).unwrap();
        assert_eq!(hard, p);
        // Two c = 0.5 steps move a 0-initialized target three quarters of
        // the way toward the online parameters.
        let zero_arch = t.agent.arch.clone();
        t.agent = ModelParams::zeros(zero_arch).unwrap();
        t.mixer = MixerParams::zeros(2, 3, 8, 8).unwrap();
        sync_target(&p, &mut t, 0.5).unwrap();
        sync_target(&p, &mut t, 0.5).unwrap();
        for (name, online) in p.agent.iter() {
            let targ = t.agent.get(name).unwrap();
            for (tv, ov) in targ.data().iter().zip(online.data()) {
                assert!((tv - 0.75 * ov).abs() < 1e-12);
            }
        }
        assert!(sync_target(&p, &mut t, 0.0).is_err());
    }

    #[test]
    fn mixer_is_monotone_in_every_utility() {
        let mut rng = stream(10, "mixer-mono", 0);
        let mixer = MixerParams::init(3, 5, 8, 8, &mut rng).unwrap();
        let delta = 1e-4;
        for _ in 0..200 {
            let q = Tensor::from_vec(1, 3, (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect());
            let s = Tensor::from_vec(1, 5, (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let base = mixer.mix(&q, &s).unwrap().get(0, 0);
            for i in 0..3 {
                let mut bumped = q.clone();
                bumped.set(0, i, q.get(0, i) + delta);
                let up = mixer.mix(&bumped, &s).unwrap().get(0, 0);
                assert!(
                    (up - base) / delta >= -1e-9,
                    "partial {} at utility {i}",
                    (up - base) / delta
                );
            }
        }
    }

    #[test]
    fn single_agent_mixer_is_locally_affine_with_nonnegative_slope() {
        let mut rng = stream(11, "mixer-affine", 0);
        let mixer = MixerParams::init(1, 4, 8, 8, &mut rng).unwrap();
        let s = Tensor::from_vec(1, 4, vec![0.3, -0.1, 0.8, 0.2]);
        // On the positive branch of the embedding nonlinearity the map is
        // exactly affine in the lone utility.
        let at = |q: f64| mixer.mix(&Tensor::vector(&[q]), &s).unwrap().get(0, 0);
        let (f1, f2, f3) = (at(50.0), at(60.0), at(70.0));
        let slope = (f2 - f1) / 10.0;
        assert!(slope >= 0.0);
        assert!(((f3 - f2) / 10.0 - slope).abs() < 1e-9, "second difference");
    }

    #[test]
    fn td_error_matches_hand_arithmetic() {
        assert!((td_error(1.0, 2.0, 1.0, 0.99) - 3.9204).abs() < 1e-12);
        assert!(td_error(0.5, 0.0, 0.0, 0.9) >= 0.0);
    }

    fn one_step_trace(
        obs: JointObservation,
        actions: JointAction,
        reward: f64,
        state: Vec<f64>,
        hid: usize,
    ) -> EpisodeTrace {
        let n = obs.n_agents();
        let avail = vec![vec![true; 3]; n];
        EpisodeTrace {
            transitions: vec![Transition {
                obs: obs.clone(),
                clean_obs: obs.clone(),
                intermediate: actions.clone(),
                executed: actions,
                reward,
                avail: avail.clone(),
                done: true,
                state: state.clone(),
                attack_fired: false,
            }],
            final_obs: obs.clone(),
            final_clean_obs: obs,
            final_avail: avail,
            final_state: state,
            hiddens: vec![Tensor::zeros(n, hid)],
            g1: BTreeSet::new(),
            p_act: 0.0,
            success: reward > 0.5,
        }
    }

    #[test]
    fn zero_params_zero_rewards_leave_loss_and_params_at_zero() {
        let mut p = small_params(12);
        p.agent = ModelParams::zeros(p.agent.arch.clone()).unwrap();
        p.mixer = MixerParams::zeros(2, 3, 8, 8).unwrap();
        let target = p.clone();
        let before = p.clone();
        let mut opt = QmixOptimizer::new(&p, 1e-3);
        let trace = one_step_trace(obs2(), vec![0, 1], 0.0, vec![0.0; 3], 16);
        let loss = td_update(&mut p, &target, &mut opt, &[&trace], 0.0, ReplayAction::Intermediate)
            .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn td_loss_fits_a_deterministic_bandit() {
        let mut rng = stream(13, "bandit", 0);
        let mut p = QmixParams::with_sizes(2, 3, 2, 2, 16, 8, 8, &mut rng).unwrap();
        let target = p.clone();
        let mut opt = QmixOptimizer::new(&p, 5e-3);
        let obs = JointObservation::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        // Additive payoff, so the monotone mixture can represent it exactly.
        let payoff = |a0: usize, a1: usize| [0.0, 0.3, 0.1][a0] + [0.0, 0.5, 0.2][a1];
        let traces: Vec<EpisodeTrace> = (0..9)
            .map(|k| {
                let (a0, a1) = (k / 3, k % 3);
                one_step_trace(obs.clone(), vec![a0, a1], payoff(a0, a1), vec![1.0, 0.0], 16)
            })
            .collect();
        let batch: Vec<&EpisodeTrace> = traces.iter().collect();
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..2000 {
            last = td_update(&mut p, &target, &mut opt, &batch, 0.99, ReplayAction::Intermediate)
                .unwrap();
            if step == 0 {
                first = last;
            }
            if last < 1e-3 {
                break;
            }
        }
        assert!(last < first, "loss went from {first} to {last}");
        assert!(last < 1e-3, "final loss {last}");
    }

    #[test]
    fn td_update_rejects_empty_batch_and_bad_gamma() {
        let mut p = small_params(14);
        let t = p.clone();
        let mut opt = QmixOptimizer::new(&p, 1e-3);
        assert!(td_update(&mut p, &t, &mut opt, &[], 0.99, ReplayAction::Intermediate).is_err());
        let trace = one_step_trace(obs2(), vec![0, 0], 1.0, vec![0.0; 3], 16);
        assert!(
            td_update(&mut p, &t, &mut opt, &[&trace], 1.0, ReplayAction::Intermediate).is_err()
        );
    }
}
