//! Interaction-breaking attack machinery and baseline perturbations.
//!
//! An attack episode is parameterized by a [`GroupPartition`] splitting the
//! team into an attacked group G1 and its complement G2, a [`MaskSet`] of
//! observation dimensions to zero-force on each agent, and a per-step firing
//! probability for the action replacement. Masks are chosen from a
//! [`DimScoreTable`] snapshot by aggregated MI score; action replacements
//! greedily minimize the action-level MI between the attacked group's joint
//! action and the complement's predicted actions.
//!
//! Everything here is a pure function over immutable snapshots plus an
//! explicit random stream, so evaluation cells can run independently.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{forward_on_tape, Tape, Tensor};
use crate::envs::{JointAction, JointObservation};
use crate::error::{CoreError, Result};
use crate::miest::{action_level_mi, ActionReconModel, DimScoreTable};
use crate::qmix::agent_input_row;
use crate::qmix::QmixParams;
use crate::rng::standard_normal;

/// Success-rate window length for the adaptive schedule.
pub const SUCCESS_WINDOW: usize = 100;
/// Default growth rate applied to the firing-probability cap.
pub const DEFAULT_ALPHA: f64 = 1.1;
/// Default windowed success rate that triggers cap growth.
pub const DEFAULT_ETA: f64 = 0.8;
/// Exhaustive joint replacement is limited to groups this small.
pub const MAX_JOINT_GROUP: usize = 2;

// ── partitions ───────────────────────────────────────────────────────────

/// Disjoint split of the team into an attacked group and its complement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub g1: BTreeSet<usize>,
    pub g2: BTreeSet<usize>,
}

impl GroupPartition {
    /// The empty attack: every agent unperturbed.
    pub fn pass_through(n_agents: usize) -> Self {
        GroupPartition {
            g1: BTreeSet::new(),
            g2: (0..n_agents).collect(),
        }
    }

    /// Partition with an explicit attacked group, validated against the
    /// size bound `|G1| <= floor(n/2)`.
    pub fn new(n_agents: usize, g1: BTreeSet<usize>) -> Result<Self> {
        if g1.iter().any(|&i| i >= n_agents) {
            return Err(CoreError::InvalidArgument(
                "attacked group references an agent outside the team".into(),
            ));
        }
        if g1.len() > n_agents / 2 {
            return Err(CoreError::InvalidArgument(format!(
                "attacked group of {} exceeds half of {n_agents} agents",
                g1.len()
            )));
        }
        let g2 = (0..n_agents).filter(|i| !g1.contains(i)).collect();
        Ok(GroupPartition { g1, g2 })
    }

    pub fn n_agents(&self) -> usize {
        self.g1.len() + self.g2.len()
    }

    /// True when no agent is attacked, so the episode runs unperturbed.
    pub fn is_pass_through(&self) -> bool {
        self.g1.is_empty()
    }
}

/// Draw `k ~ Unif{0..k_max}` and then a uniformly random size-`k` attacked
/// group. `k_max` may not exceed half the team.
pub fn sample_partition(
    n_agents: usize,
    k_max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GroupPartition> {
    if k_max > n_agents / 2 {
        return Err(CoreError::InvalidArgument(format!(
            "group size cap {k_max} exceeds half of {n_agents} agents"
        )));
    }
    let k = rng.gen_range(0..=k_max);
    let g1: BTreeSet<usize> = rand::seq::index::sample(rng, n_agents, k).into_iter().collect();
    GroupPartition::new(n_agents, g1)
}

// ── observation masks ────────────────────────────────────────────────────

/// Per-agent sets of observation dimensions forced to zero.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub dims: Vec<BTreeSet<usize>>,
}

impl MaskSet {
    pub fn empty(n_agents: usize) -> Self {
        MaskSet {
            dims: vec![BTreeSet::new(); n_agents],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.dims.iter().all(BTreeSet::is_empty)
    }
}

/// Total per-agent budget for a per-complement-member allowance, clamped to
/// the observation width.
pub fn mask_budget(l_per_g2: usize, g2_size: usize, obs_dim: usize) -> usize {
    (l_per_g2 * g2_size).min(obs_dim)
}

fn top_dims(scores: &[f64], l: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.into_iter().take(l).collect()
}

/// Choose each attacked agent's `l` highest-scoring dimensions aggregated
/// over the complement, and symmetrically each complement agent's `l`
/// highest aggregated over the attacked group, ties to the lowest index. A
/// pass-through partition yields an empty mask.
pub fn select_mask(
    table: &DimScoreTable,
    partition: &GroupPartition,
    l: usize,
) -> Result<MaskSet> {
    let n = partition.n_agents();
    if n != table.n_agents {
        return Err(CoreError::shape(
            "mask selection",
            format!("{} agents", table.n_agents),
            format!("{n}"),
        ));
    }
    if l > table.obs_dim {
        return Err(CoreError::InvalidArgument(format!(
            "mask budget {l} exceeds observation width {}",
            table.obs_dim
        )));
    }
    let mut mask = MaskSet::empty(n);
    if partition.g1.is_empty() || partition.g2.is_empty() || l == 0 {
        return Ok(mask);
    }
    for &i in &partition.g1 {
        mask.dims[i] = top_dims(&table.aggregate(i, &partition.g2), l);
    }
    for &j in &partition.g2 {
        mask.dims[j] = top_dims(&table.aggregate(j, &partition.g1), l);
    }
    Ok(mask)
}

/// Zero-force the masked dimensions in place; unmasked entries are
/// untouched, so the operation is idempotent.
pub fn apply_obs_mask(obs: &mut JointObservation, mask: &MaskSet) {
    for (i, dims) in mask.dims.iter().enumerate() {
        let row = obs.agent_mut(i);
        for &d in dims {
            row[d] = 0.0;
        }
    }
}

// ── action replacement ───────────────────────────────────────────────────

/// With one step-level coin of bias `p_act`, replace every attacked agent's
/// action (in ascending index order, earlier replacements held) by the
/// available action minimizing the action-level MI against the complement's
/// predictions. Complement actions always pass through. Returns the executed
/// joint action and whether the replacement fired.
pub fn ib_action_attack(
    model: &ActionReconModel,
    partition: &GroupPartition,
    intermediate: &JointAction,
    avail: &[Vec<bool>],
    hiddens: &Tensor,
    p_act: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(JointAction, bool)> {
    if !(0.0..=1.0).contains(&p_act) {
        return Err(CoreError::InvalidArgument(format!(
            "firing probability {p_act} outside [0, 1]"
        )));
    }
    if intermediate.len() != partition.n_agents() || avail.len() != intermediate.len() {
        return Err(CoreError::shape(
            "action attack",
            format!("{} agents", partition.n_agents()),
            format!("{} actions, {} masks", intermediate.len(), avail.len()),
        ));
    }
    if partition.g1.is_empty() {
        return Ok((intermediate.clone(), false));
    }
    let fired = rng.gen::<f64>() < p_act;
    if !fired {
        return Ok((intermediate.clone(), false));
    }
    let mut executed = intermediate.clone();
    for &i in &partition.g1 {
        let mut best: Option<(f64, usize)> = None;
        for (a, &open) in avail[i].iter().enumerate() {
            if !open {
                continue;
            }
            executed[i] = a;
            let candidate: BTreeMap<usize, usize> =
                partition.g1.iter().map(|&g| (g, executed[g])).collect();
            let mi = action_level_mi(model, &candidate, hiddens, &partition.g2)?;
            if best.map_or(true, |(m, _)| mi < m) {
                best = Some((mi, a));
            }
        }
        let (_, chosen) = best.ok_or_else(|| {
            CoreError::InvalidArgument(format!("agent {i} has no available action"))
        })?;
        executed[i] = chosen;
    }
    Ok((executed, true))
}

/// Exhaustive joint minimizer over the attacked group's available action
/// product, lexicographically first on ties. Exponential in the group size,
/// so it is restricted to groups of at most [`MAX_JOINT_GROUP`]; it serves
/// as a reference for the sequential replacement.
pub fn joint_ib_action_attack(
    model: &ActionReconModel,
    partition: &GroupPartition,
    intermediate: &JointAction,
    avail: &[Vec<bool>],
    hiddens: &Tensor,
) -> Result<JointAction> {
    if partition.g1.len() > MAX_JOINT_GROUP {
        return Err(CoreError::InvalidArgument(format!(
            "joint replacement over {} agents is intractable; cap is {MAX_JOINT_GROUP}",
            partition.g1.len()
        )));
    }
    if partition.g1.is_empty() {
        return Ok(intermediate.clone());
    }
    let members: Vec<usize> = partition.g1.iter().copied().collect();
    let choices: Vec<Vec<usize>> = members
        .iter()
        .map(|&i| {
            let open: Vec<usize> = avail[i]
                .iter()
                .enumerate()
                .filter_map(|(a, &ok)| ok.then_some(a))
                .collect();
            if open.is_empty() {
                return Err(CoreError::InvalidArgument(format!(
                    "agent {i} has no available action"
                )));
            }
            Ok(open)
        })
        .collect::<Result<_>>()?;
    let mut assignment = vec![0usize; members.len()];
    let mut best: Option<(f64, JointAction)> = None;
    loop {
        let mut executed = intermediate.clone();
        for (slot, &i) in members.iter().enumerate() {
            executed[i] = choices[slot][assignment[slot]];
        }
        let candidate: BTreeMap<usize, usize> =
            members.iter().map(|&g| (g, executed[g])).collect();
        let mi = action_level_mi(model, &candidate, hiddens, &partition.g2)?;
        if best.as_ref().map_or(true, |(m, _)| mi < *m) {
            best = Some((mi, executed));
        }
        // Advance the mixed-radix counter; the iteration order makes the
        // first minimum the lexicographically smallest one.
        let mut slot = members.len();
        loop {
            if slot == 0 {
                return Ok(best.expect("at least one candidate").1);
            }
            slot -= 1;
            assignment[slot] += 1;
            if assignment[slot] < choices[slot].len() {
                break;
            }
            assignment[slot] = 0;
        }
    }
}

// ── adaptive firing probability ──────────────────────────────────────────

/// Sliding-window success tracker driving the firing-probability cap: once
/// the window is full and its mean success rate reaches `eta`, the cap grows
/// by `alpha` (clamped at 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackProbState {
    pub p_act_max: f64,
    pub alpha: f64,
    pub eta: f64,
    pub window_len: usize,
    window: VecDeque<bool>,
}

impl AttackProbState {
    /// Start the cap at the minimum firing probability `1/k_max` (0 when
    /// attacks are disabled entirely).
    pub fn new(k_max: usize) -> Self {
        let p_act_max = if k_max == 0 { 0.0 } else { 1.0 / k_max as f64 };
        AttackProbState {
            p_act_max,
            alpha: DEFAULT_ALPHA,
            eta: DEFAULT_ETA,
            window_len: SUCCESS_WINDOW,
            window: VecDeque::new(),
        }
    }

    pub fn with_parameters(
        p_act_max: f64,
        alpha: f64,
        eta: f64,
        window_len: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_act_max) {
            return Err(CoreError::InvalidArgument(format!(
                "firing cap {p_act_max} outside [0, 1]"
            )));
        }
        if alpha <= 1.0 || eta <= 0.0 || eta >= 1.0 {
            return Err(CoreError::InvalidArgument(format!(
                "growth rate {alpha} must exceed 1 and threshold {eta} must lie in (0, 1)"
            )));
        }
        if window_len == 0 {
            return Err(CoreError::InvalidArgument("empty success window".into()));
        }
        Ok(AttackProbState {
            p_act_max,
            alpha,
            eta,
            window_len,
            window: VecDeque::new(),
        })
    }

    /// Mean success over the window once it is full.
    pub fn success_rate(&self) -> Option<f64> {
        (self.window.len() == self.window_len).then(|| {
            self.window.iter().filter(|&&s| s).count() as f64 / self.window_len as f64
        })
    }

    /// Push one episode's success flag, then grow the cap if the windowed
    /// success rate has reached the threshold.
    pub fn update_pact(&mut self, success: bool) {
        self.window.push_back(success);
        if self.window.len() > self.window_len {
            self.window.pop_front();
        }
        if let Some(rate) = self.success_rate() {
            if rate >= self.eta {
                self.p_act_max = (self.alpha * self.p_act_max).min(1.0);
            }
        }
    }

    /// Draw this episode's firing probability uniformly from
    /// `[1/k_max, p_act_max]`. A cap below the minimum degenerates to the
    /// minimum; a disabled attack (`k_max = 0`) fires never.
    pub fn sample_pact(&self, k_max: usize, rng: &mut ChaCha8Rng) -> f64 {
        if k_max == 0 {
            return 0.0;
        }
        self.sample_pact_from(1.0 / k_max as f64, rng)
    }

    /// Same draw with an explicit lower endpoint, for sweeps over the
    /// minimum firing probability.
    pub fn sample_pact_from(&self, lo: f64, rng: &mut ChaCha8Rng) -> f64 {
        if self.p_act_max <= lo {
            return lo;
        }
        lo + rng.gen::<f64>() * (self.p_act_max - lo)
    }
}

// ── attack configuration ─────────────────────────────────────────────────

fn default_sigma() -> f64 {
    0.1
}

fn default_prob() -> f64 {
    0.3
}

fn default_eps() -> f64 {
    0.1
}

/// Which perturbation an evaluation cell or training run applies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackSpec {
    /// Unperturbed execution.
    None,
    /// MI-guided masking plus action replacement.
    InteractionBreaking {
        k_max: usize,
        l_per_g2: usize,
        /// Fixed firing probability; defaults to `1/k_max` when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p_act: Option<f64>,
    },
    /// Gaussian observation noise on one uniformly chosen agent per step.
    RandObs {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    /// One uniformly chosen agent's action resampled uniformly over its
    /// available actions, with a per-step coin.
    RandAct {
        #[serde(default = "default_prob")]
        prob: f64,
    },
    /// Observation noise every step plus the action coin.
    RandCombined {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_prob")]
        prob: f64,
    },
    /// Fast-gradient-sign observation perturbation against one uniformly
    /// chosen agent's greedy action value.
    Fgsm {
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// One uniformly chosen agent forced to its lowest-utility available
    /// action, with a per-step coin.
    ValueMin {
        #[serde(default = "default_prob")]
        prob: f64,
    },
}

impl AttackSpec {
    /// Evaluation-cell label.
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::InteractionBreaking { .. } => "interaction-breaking",
            AttackSpec::RandObs { .. } => "rand-obs",
            AttackSpec::RandAct { .. } => "rand-act",
            AttackSpec::RandCombined { .. } => "rand-combined",
            AttackSpec::Fgsm { .. } => "fgsm",
            AttackSpec::ValueMin { .. } => "value-min",
        }
    }

    pub fn validate(&self, n_agents: usize) -> Result<()> {
        let check_prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(CoreError::InvalidArgument(format!(
                    "{what} {p} outside [0, 1]"
                )))
            }
        };
        match *self {
            AttackSpec::None => Ok(()),
            AttackSpec::InteractionBreaking { k_max, p_act, .. } => {
                if k_max == 0 || k_max > n_agents / 2 {
                    return Err(CoreError::InvalidArgument(format!(
                        "group size cap {k_max} outside 1..={} for {n_agents} agents",
                        n_agents / 2
                    )));
                }
                if let Some(p) = p_act {
                    check_prob(p, "firing probability")?;
                }
                Ok(())
            }
            AttackSpec::RandObs { sigma } => {
                if sigma < 0.0 || !sigma.is_finite() {
                    return Err(CoreError::InvalidArgument(format!(
                        "noise scale {sigma} must be finite and nonnegative"
                    )));
                }
                Ok(())
            }
            AttackSpec::RandAct { prob } | AttackSpec::ValueMin { prob } => {
                check_prob(prob, "per-step probability")
            }
            AttackSpec::RandCombined { sigma, prob } => {
                if sigma < 0.0 || !sigma.is_finite() {
                    return Err(CoreError::InvalidArgument(format!(
                        "noise scale {sigma} must be finite and nonnegative"
                    )));
                }
                check_prob(prob, "per-step probability")
            }
            AttackSpec::Fgsm { eps } => {
                if eps < 0.0 || !eps.is_finite() {
                    return Err(CoreError::InvalidArgument(format!(
                        "step size {eps} must be finite and nonnegative"
                    )));
                }
                Ok(())
            }
        }
    }
}

// ── baseline perturbations ───────────────────────────────────────────────

/// Add i.i.d. Gaussian noise of scale `sigma` to every entry in place.
pub fn rand_obs_perturb(obs: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    for v in obs {
        *v += sigma * standard_normal(rng);
    }
}

/// Uniform draw over the available actions.
pub fn uniform_available_action(avail: &[bool], rng: &mut ChaCha8Rng) -> Result<usize> {
    let open: Vec<usize> = avail
        .iter()
        .enumerate()
        .filter_map(|(a, &ok)| ok.then_some(a))
        .collect();
    if open.is_empty() {
        return Err(CoreError::InvalidArgument("no available action".into()));
    }
    Ok(open[rng.gen_range(0..open.len())])
}

/// The available action with the smallest utility, ties to the lowest index.
pub fn value_min_action(utilities: &[f64], avail: &[bool]) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (a, (&u, &ok)) in utilities.iter().zip(avail).enumerate() {
        if ok && best.map_or(true, |(m, _)| u < m) {
            best = Some((u, a));
        }
    }
    best.map(|(_, a)| a)
        .ok_or_else(|| CoreError::InvalidArgument("no available action".into()))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Shift one agent's observation one `eps`-step against the gradient of its
/// greedy action value: `o - eps * sign(grad_o Q(tau, a*))`. The recurrent
/// state and previous action replicate what the policy would see at this
/// step; the gradient flows only into the observation entries of the input.
pub fn fgsm_perturb(
    policy: &QmixParams,
    obs: &[f64],
    prev_action: Option<usize>,
    agent_id: usize,
    hidden_row: &[f64],
    avail: &[bool],
    eps: f64,
) -> Result<Vec<f64>> {
    if agent_id >= policy.n_agents || obs.len() != policy.obs_dim {
        return Err(CoreError::shape(
            "gradient perturbation",
            format!("agent < {}, obs width {}", policy.n_agents, policy.obs_dim),
            format!("agent {agent_id}, obs width {}", obs.len()),
        ));
    }
    let row = agent_input_row(obs, prev_action, agent_id, policy.n_actions, policy.n_agents);
    let tape = Tape::new();
    let leaves = policy.agent.leaves(&tape);
    let input = tape.leaf_owned(Tensor::from_vec(1, row.len(), row));
    let hidden = tape.leaf_owned(Tensor::from_vec(1, hidden_row.len(), hidden_row.to_vec()));
    let (q, _) = forward_on_tape(&tape, &policy.agent.arch, &leaves, input, Some(hidden))?;
    let utilities = tape.value(q);
    let mut greedy: Option<(f64, usize)> = None;
    for (a, &ok) in avail.iter().enumerate() {
        let u = utilities.get(0, a);
        if ok && greedy.map_or(true, |(m, _)| u > m) {
            greedy = Some((u, a));
        }
    }
    let (_, target) = greedy.ok_or_else(|| {
        CoreError::InvalidArgument(format!("agent {agent_id} has no available action"))
    })?;
    let picked = tape.gather_cols(q, &[target]);
    let grads = tape.backward(picked);
    let g = grads.get(input);
    Ok(obs
        .iter()
        .enumerate()
        .map(|(d, &o)| o - eps * sign(g.get(0, d)))
        .collect())
}
