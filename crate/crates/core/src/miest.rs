//! Mutual-information estimation between agents' actions and observations.
//!
//! Three estimators drive the interaction-breaking attacks:
//!
//! * A conditional-Gaussian observation reconstruction model predicts an
//!   observer's next observation from its own action, one or more actor
//!   agents' actions, and the observer's recurrent history embedding. The
//!   contrastive log-ratio bound (mean log-density of true pairs minus mean
//!   log-density with the actor actions re-paired within the batch) gives a
//!   per-dimension MI score in nats.
//! * A categorical action reconstruction model maps a partially zero-masked
//!   joint action plus the joint history embedding to per-agent action
//!   distributions. The action-level MI of a candidate group action is the
//!   summed KL divergence between the distributions it induces and the ones
//!   induced by a fully masked input.
//! * A group-conditioned variant of the observation model backs a redundancy
//!   diagnostic: the group-wise estimate minus the summed per-actor
//!   dimension scores, which should stay near zero when actor influences do
//!   not overlap.
//!
//! All scores are computed from clean (pre-mask) observations and executed
//! actions, so they measure influence in the underlying environment rather
//! than artifacts of the attack itself; action models use the policy's
//! selected actions, since they measure coordination inside the policy.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    collect_grads, forward_on_tape, mlp_forward, rmsprop_step, Activation, Architecture,
    ModelParams, OptimizerState, Tape, Tensor,
};
use crate::error::{CoreError, Result};
use crate::induced::EpisodeTrace;

/// Smallest batch the contrastive estimator accepts.
pub const MIN_MI_BATCH: usize = 32;
/// Hidden width of both reconstruction models.
pub const MI_MODEL_WIDTH: usize = 64;
/// Default RMSProp learning rate for the MI models.
pub const DEFAULT_MI_LR: f64 = 1e-3;
/// Largest actor group the redundancy diagnostic accepts.
pub const MAX_GROUP_ACTORS: usize = 2;

pub(crate) const LOGVAR_MIN: f64 = -8.0;
pub(crate) const LOGVAR_MAX: f64 = 4.0;
const LN_2PI: f64 = 1.8378770664093453;

// ── Gaussian head ────────────────────────────────────────────────────────

/// Outcome of one Gaussian NLL training step.
#[derive(Clone, Copy, Debug)]
pub struct GaussianFit {
    /// Mean negative log-likelihood per sample (summed over dimensions).
    pub nll: f64,
    /// Output entries whose log-variance hit the clamp.
    pub clamped: usize,
}

fn check_head(params: &ModelParams, inputs: &Tensor, targets: &Tensor) -> Result<()> {
    if inputs.rows() != targets.rows() {
        return Err(CoreError::shape(
            "gaussian head batch",
            format!("{} rows", inputs.rows()),
            format!("{} target rows", targets.rows()),
        ));
    }
    if params.arch.output_size() != 2 * targets.cols() {
        return Err(CoreError::shape(
            "gaussian head output",
            format!("{} (mean and log-variance)", 2 * targets.cols()),
            format!("{}", params.arch.output_size()),
        ));
    }
    Ok(())
}

/// Per-dimension log-density `log N(target_d; mu_d, exp(logvar_d))` of every
/// row under the model's clamped diagonal-Gaussian prediction.
pub fn gaussian_log_density(
    params: &ModelParams,
    inputs: &Tensor,
    targets: &Tensor,
) -> Result<Tensor> {
    check_head(params, inputs, targets)?;
    let out = mlp_forward(params, inputs)?;
    let d = targets.cols();
    let mut dens = Tensor::zeros(targets.rows(), d);
    for r in 0..targets.rows() {
        for c in 0..d {
            let mu = out.get(r, c);
            let lv = out.get(r, d + c).clamp(LOGVAR_MIN, LOGVAR_MAX);
            let diff = targets.get(r, c) - mu;
            dens.set(r, c, -0.5 * (lv + diff * diff * (-lv).exp() + LN_2PI));
        }
    }
    Ok(dens)
}

/// One RMSProp step on the Gaussian negative log-likelihood of `targets`
/// under the model's prediction from `inputs`.
pub fn gaussian_nll_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    inputs: &Tensor,
    targets: &Tensor,
) -> Result<GaussianFit> {
    check_head(params, inputs, targets)?;
    let (b, d) = (targets.rows(), targets.cols());
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let out = forward_on_tape(&tape, &params.arch, &leaves, tape.leaf(inputs), None)?.0;
    let clamped = {
        let raw = tape.value(out);
        let mut hit = 0;
        for r in 0..b {
            for c in 0..d {
                let lv = raw.get(r, d + c);
                if !(LOGVAR_MIN..=LOGVAR_MAX).contains(&lv) {
                    hit += 1;
                }
            }
        }
        hit
    };
    let mu = tape.slice_cols(out, 0, d);
    let lv = tape.clamp(tape.slice_cols(out, d, d), LOGVAR_MIN, LOGVAR_MAX);
    let diff = tape.sub(mu, tape.leaf(targets));
    let sq = tape.mul_elem(diff, diff);
    let weighted = tape.mul_elem(sq, tape.exp(tape.neg(lv)));
    let loss = tape.scale(tape.sum(tape.add(lv, weighted)), 0.5 / b as f64);
    let value = tape.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(CoreError::NonFinite {
            context: "gaussian reconstruction loss".into(),
        });
    }
    let grads = collect_grads(&tape.backward(loss), &leaves);
    rmsprop_step(params, &grads, opt)?;
    Ok(GaussianFit {
        nll: value + 0.5 * d as f64 * LN_2PI,
        clamped,
    })
}

/// Contrastive per-dimension MI scores: mean log-density of the true pairs
/// minus mean log-density of the re-paired negatives. Dimensions that are
/// constant across the batch carry no information and score exactly 0
/// without consulting the model; negative estimates (sampling noise) are
/// clamped to 0.
pub fn club_scores(
    params: &ModelParams,
    pos_inputs: &Tensor,
    neg_inputs: &Tensor,
    targets: &Tensor,
) -> Result<Vec<f64>> {
    if pos_inputs.rows() < MIN_MI_BATCH {
        return Err(CoreError::InvalidArgument(format!(
            "contrastive scoring needs at least {MIN_MI_BATCH} rows, got {}",
            pos_inputs.rows()
        )));
    }
    if pos_inputs.shape() != neg_inputs.shape() {
        return Err(CoreError::shape(
            "contrastive inputs",
            format!("{:?}", pos_inputs.shape()),
            format!("{:?}", neg_inputs.shape()),
        ));
    }
    let lpos = gaussian_log_density(params, pos_inputs, targets)?;
    let lneg = gaussian_log_density(params, neg_inputs, targets)?;
    let (b, d) = targets.shape();
    let mut scores = Vec::with_capacity(d);
    for c in 0..d {
        let mean = (0..b).map(|r| targets.get(r, c)).sum::<f64>() / b as f64;
        let var = (0..b).map(|r| (targets.get(r, c) - mean).powi(2)).sum::<f64>() / b as f64;
        if var < 1e-12 {
            scores.push(0.0);
            continue;
        }
        let raw = (0..b).map(|r| lpos.get(r, c) - lneg.get(r, c)).sum::<f64>() / b as f64;
        if !raw.is_finite() {
            return Err(CoreError::NonFinite {
                context: format!("contrastive score of dimension {c}"),
            });
        }
        scores.push(raw.max(0.0));
    }
    Ok(scores)
}

// ── aligned batches ──────────────────────────────────────────────────────

/// Aligned tuples for one (observer, actor set) conditioning: next-step
/// clean observations, the observer's own action, the actor actions, the
/// observer's history embedding, and a within-batch negative pairing.
#[derive(Clone, Debug)]
pub struct MiBatch {
    pub observer: usize,
    /// Ascending actor agent ids whose actions are being scored.
    pub actors: Vec<usize>,
    /// `batch x obs_dim` next-step observations of the observer.
    pub targets: Tensor,
    pub own_actions: Vec<usize>,
    /// Per row, one action per actor (in `actors` order).
    pub actor_actions: Vec<Vec<usize>>,
    /// `batch x hidden` observer history embeddings.
    pub hidden: Tensor,
    /// Negative pairing: row `k` borrows the actor actions of row
    /// `negatives[k] != k`.
    pub negatives: Vec<usize>,
}

impl MiBatch {
    pub fn len(&self) -> usize {
        self.own_actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.own_actions.is_empty()
    }

    /// Gather the most recent `limit` aligned transitions for the pair
    /// (observer, actors) from the given episodes, newest first, and draw
    /// the negative pairing from `rng`. Targets are the clean (pre-mask)
    /// observations; see [`MiBatch::from_traces_observed`] for the induced
    /// view.
    pub fn from_traces(
        traces: &[&EpisodeTrace],
        observer: usize,
        actors: &[usize],
        limit: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::gather(traces, observer, actors, limit, rng, false)
    }

    /// Same batch with the observations the policy actually received (after
    /// any masking) as targets. This is the view a post-mask MI estimate
    /// must score against: a zero-forced dimension is constant there, so its
    /// score collapses to zero.
    pub fn from_traces_observed(
        traces: &[&EpisodeTrace],
        observer: usize,
        actors: &[usize],
        limit: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::gather(traces, observer, actors, limit, rng, true)
    }

    fn gather(
        traces: &[&EpisodeTrace],
        observer: usize,
        actors: &[usize],
        limit: usize,
        rng: &mut ChaCha8Rng,
        observed: bool,
    ) -> Result<Self> {
        if actors.is_empty() || actors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::InvalidArgument(
                "actor set must be non-empty and strictly ascending".into(),
            ));
        }
        if actors.contains(&observer) {
            return Err(CoreError::InvalidArgument(format!(
                "observer {observer} cannot be its own actor"
            )));
        }
        let mut targets = Vec::new();
        let mut own = Vec::new();
        let mut acts = Vec::new();
        let mut hid = Vec::new();
        let mut hidden_dim = 0;
        'outer: for trace in traces.iter().rev() {
            for t in (0..trace.len()).rev() {
                let tr = &trace.transitions[t];
                let next = if observed {
                    trace.obs_at(t + 1)
                } else {
                    trace.clean_obs_at(t + 1)
                };
                targets.extend_from_slice(next.agent(observer));
                own.push(tr.executed[observer]);
                acts.push(actors.iter().map(|&j| tr.executed[j]).collect::<Vec<_>>());
                let row = trace.hiddens[t].row(observer);
                hidden_dim = row.len();
                hid.extend_from_slice(row);
                if own.len() == limit {
                    break 'outer;
                }
            }
        }
        let b = own.len();
        if b < MIN_MI_BATCH {
            return Err(CoreError::InvalidArgument(format!(
                "MI batch needs at least {MIN_MI_BATCH} transitions, episodes provide {b}"
            )));
        }
        let obs_dim = targets.len() / b;
        let negatives = (0..b)
            .map(|k| loop {
                let m = rng.gen_range(0..b);
                if m != k {
                    return m;
                }
            })
            .collect();
        Ok(MiBatch {
            observer,
            actors: actors.to_vec(),
            targets: Tensor::from_vec(b, obs_dim, targets),
            own_actions: own,
            actor_actions: acts,
            hidden: Tensor::from_vec(b, hidden_dim, hid),
            negatives,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.len();
        if b < MIN_MI_BATCH {
            return Err(CoreError::InvalidArgument(format!(
                "MI batch holds {b} rows, needs {MIN_MI_BATCH}"
            )));
        }
        if self.targets.rows() != b || self.hidden.rows() != b || self.negatives.len() != b {
            return Err(CoreError::InvalidArgument("misaligned MI batch fields".into()));
        }
        if self.negatives.iter().enumerate().any(|(k, &m)| k == m || m >= b) {
            return Err(CoreError::InvalidArgument(
                "negative pairing hits its own row".into(),
            ));
        }
        if self.actor_actions.iter().any(|a| a.len() != self.actors.len()) {
            return Err(CoreError::InvalidArgument(
                "actor action arity differs from the actor set".into(),
            ));
        }
        Ok(())
    }
}

// ── observation reconstruction ───────────────────────────────────────────

/// Conditional-Gaussian predictor of an observer's next observation given
/// its own action, `actors` actor actions, and its history embedding, with
/// the (observer, actor set) identities one-hot encoded so a single model
/// serves every pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsReconModel {
    pub params: ModelParams,
    pub n_agents: usize,
    pub n_actions: usize,
    pub hidden_dim: usize,
    pub obs_dim: usize,
    /// How many actor actions condition each prediction (1 for the pairwise
    /// score table; the group size for the redundancy diagnostic).
    pub actors: usize,
}

impl ObsReconModel {
    pub fn init(
        n_agents: usize,
        n_actions: usize,
        hidden_dim: usize,
        obs_dim: usize,
        actors: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if actors == 0 || actors >= n_agents {
            return Err(CoreError::InvalidArgument(format!(
                "{actors} actor slots for {n_agents} agents"
            )));
        }
        let input = n_actions * (1 + actors) + hidden_dim + 2 * n_agents;
        let params = ModelParams::init(
            Architecture::mlp(&[input, MI_MODEL_WIDTH, 2 * obs_dim], Activation::Relu),
            rng,
        )?;
        Ok(ObsReconModel {
            params,
            n_agents,
            n_actions,
            hidden_dim,
            obs_dim,
            actors,
        })
    }

    /// Same architecture as [`ObsReconModel::init`] with all-zero weights,
    /// for rebuilding a model before loading stored tensors into it.
    pub fn zeros(
        n_agents: usize,
        n_actions: usize,
        hidden_dim: usize,
        obs_dim: usize,
        actors: usize,
    ) -> Result<Self> {
        if actors == 0 || actors >= n_agents {
            return Err(CoreError::InvalidArgument(format!(
                "{actors} actor slots for {n_agents} agents"
            )));
        }
        let input = n_actions * (1 + actors) + hidden_dim + 2 * n_agents;
        let params = ModelParams::zeros(Architecture::mlp(
            &[input, MI_MODEL_WIDTH, 2 * obs_dim],
            Activation::Relu,
        ))?;
        Ok(ObsReconModel {
            params,
            n_agents,
            n_actions,
            hidden_dim,
            obs_dim,
            actors,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.n_actions * (1 + self.actors) + self.hidden_dim + 2 * self.n_agents
    }

    fn push_row(
        &self,
        out: &mut Vec<f64>,
        own: usize,
        actor_acts: &[usize],
        hidden: &[f64],
        observer: usize,
        actors: &[usize],
    ) {
        let a = self.n_actions;
        let mut onehot = vec![0.0; a * (1 + self.actors)];
        onehot[own] = 1.0;
        for (slot, &act) in actor_acts.iter().enumerate() {
            onehot[(1 + slot) * a + act] = 1.0;
        }
        out.extend_from_slice(&onehot);
        out.extend_from_slice(hidden);
        let mut ids = vec![0.0; 2 * self.n_agents];
        ids[observer] = 1.0;
        for &j in actors {
            ids[self.n_agents + j] = 1.0;
        }
        out.extend_from_slice(&ids);
    }

    /// Assemble the model input rows for a batch; with `negatives` the actor
    /// actions are taken from each row's negative pairing instead.
    pub fn assemble(&self, batch: &MiBatch, negatives: bool) -> Result<Tensor> {
        batch.validate()?;
        if batch.actors.len() != self.actors {
            return Err(CoreError::shape(
                "MI batch actor set",
                format!("{} actors", self.actors),
                format!("{}", batch.actors.len()),
            ));
        }
        if batch.hidden.cols() != self.hidden_dim || batch.targets.cols() != self.obs_dim {
            return Err(CoreError::shape(
                "MI batch widths",
                format!("hidden {}, obs {}", self.hidden_dim, self.obs_dim),
                format!("hidden {}, obs {}", batch.hidden.cols(), batch.targets.cols()),
            ));
        }
        let b = batch.len();
        let mut data = Vec::with_capacity(b * self.input_dim());
        for k in 0..b {
            let src = if negatives { batch.negatives[k] } else { k };
            self.push_row(
                &mut data,
                batch.own_actions[k],
                &batch.actor_actions[src],
                batch.hidden.row(k),
                batch.observer,
                &batch.actors,
            );
        }
        Ok(Tensor::from_vec(b, self.input_dim(), data))
    }
}

/// One NLL step of the observation model on a batch's positive pairs.
pub fn train_obs_model(
    model: &mut ObsReconModel,
    opt: &mut OptimizerState,
    batch: &MiBatch,
) -> Result<GaussianFit> {
    let inputs = model.assemble(batch, false)?;
    gaussian_nll_step(&mut model.params, opt, &inputs, &batch.targets)
}

/// Per-dimension MI scores of the batch's actor actions on the observer's
/// next observation.
pub fn club_dim_mi(model: &ObsReconModel, batch: &MiBatch) -> Result<Vec<f64>> {
    let pos = model.assemble(batch, false)?;
    let neg = model.assemble(batch, true)?;
    club_scores(&model.params, &pos, &neg, &batch.targets)
}

// ── score table ──────────────────────────────────────────────────────────

/// Dimension-wise MI scores for every ordered (observer, actor) pair,
/// clamped at 0, plus the episode count at which they were refreshed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimScoreTable {
    pub n_agents: usize,
    pub obs_dim: usize,
    /// Flat `[observer][actor][dim]` storage; self-pairs stay zero.
    scores: Vec<f64>,
    pub episodes_seen: usize,
}

impl DimScoreTable {
    pub fn empty(n_agents: usize, obs_dim: usize) -> Self {
        DimScoreTable {
            n_agents,
            obs_dim,
            scores: vec![0.0; n_agents * n_agents * obs_dim],
            episodes_seen: 0,
        }
    }

    pub fn score(&self, observer: usize, dim: usize, actor: usize) -> f64 {
        self.scores[(observer * self.n_agents + actor) * self.obs_dim + dim]
    }

    pub fn pair(&self, observer: usize, actor: usize) -> &[f64] {
        let base = (observer * self.n_agents + actor) * self.obs_dim;
        &self.scores[base..base + self.obs_dim]
    }

    pub fn set_pair(&mut self, observer: usize, actor: usize, scores: &[f64]) {
        assert_eq!(scores.len(), self.obs_dim, "score vector width");
        let base = (observer * self.n_agents + actor) * self.obs_dim;
        self.scores[base..base + self.obs_dim].copy_from_slice(scores);
    }

    /// Per-dimension scores of `observer` aggregated over a set of actors.
    pub fn aggregate(&self, observer: usize, actors: &BTreeSet<usize>) -> Vec<f64> {
        let mut out = vec![0.0; self.obs_dim];
        for &j in actors {
            for (o, s) in out.iter_mut().zip(self.pair(observer, j)) {
                *o += s;
            }
        }
        out
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }

    /// Copy with every entry divided by the maximum, so the largest entry is
    /// exactly 1 unless the table is all zeros.
    pub fn normalized(&self) -> DimScoreTable {
        let mut out = self.clone();
        let max = self.max();
        if max > 0.0 {
            for s in &mut out.scores {
                *s /= max;
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.scores.iter().all(|s| s.is_finite())
    }
}

/// Rebuild the score table for every ordered pair from the most recent
/// `limit` transitions per pair. Fails without touching anything if any
/// pair lacks a full minimum batch, in which case callers keep the previous
/// table.
pub fn refresh_score_table(
    model: &ObsReconModel,
    traces: &[&EpisodeTrace],
    limit: usize,
    episodes_seen: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DimScoreTable> {
    refresh_score_table_on(model, traces, limit, episodes_seen, rng, false)
}

/// [`refresh_score_table`] scoring against the observations the policy
/// actually received instead of the clean ones, for post-mask estimates.
pub fn refresh_score_table_observed(
    model: &ObsReconModel,
    traces: &[&EpisodeTrace],
    limit: usize,
    episodes_seen: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DimScoreTable> {
    refresh_score_table_on(model, traces, limit, episodes_seen, rng, true)
}

fn refresh_score_table_on(
    model: &ObsReconModel,
    traces: &[&EpisodeTrace],
    limit: usize,
    episodes_seen: usize,
    rng: &mut ChaCha8Rng,
    observed: bool,
) -> Result<DimScoreTable> {
    if model.actors != 1 {
        return Err(CoreError::InvalidArgument(
            "score table refresh needs the pairwise observation model".into(),
        ));
    }
    let n = model.n_agents;
    let mut table = DimScoreTable::empty(n, model.obs_dim);
    table.episodes_seen = episodes_seen;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let batch = if observed {
                MiBatch::from_traces_observed(traces, i, &[j], limit, rng)?
            } else {
                MiBatch::from_traces(traces, i, &[j], limit, rng)?
            };
            let scores = club_dim_mi(model, &batch)?;
            table.set_pair(i, j, &scores);
        }
    }
    Ok(table)
}

// ── action reconstruction ────────────────────────────────────────────────

/// Categorical predictor of every agent's action from a partially
/// zero-masked joint action and the concatenated per-agent history
/// embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionReconModel {
    pub params: ModelParams,
    pub n_agents: usize,
    pub n_actions: usize,
    pub hidden_dim: usize,
}

impl ActionReconModel {
    pub fn init(
        n_agents: usize,
        n_actions: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let input = n_agents * (n_actions + hidden_dim);
        let params = ModelParams::init(
            Architecture::mlp(
                &[input, MI_MODEL_WIDTH, n_agents * n_actions],
                Activation::Relu,
            ),
            rng,
        )?;
        Ok(ActionReconModel {
            params,
            n_agents,
            n_actions,
            hidden_dim,
        })
    }

    /// Same architecture as [`ActionReconModel::init`] with all-zero weights,
    /// for rebuilding a model before loading stored tensors into it.
    pub fn zeros(n_agents: usize, n_actions: usize, hidden_dim: usize) -> Result<Self> {
        let input = n_agents * (n_actions + hidden_dim);
        let params = ModelParams::zeros(Architecture::mlp(
            &[input, MI_MODEL_WIDTH, n_agents * n_actions],
            Activation::Relu,
        ))?;
        Ok(ActionReconModel {
            params,
            n_agents,
            n_actions,
            hidden_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.n_agents * (self.n_actions + self.hidden_dim)
    }

    /// One input row: visible agents' actions one-hot, masked agents' slots
    /// zero, then the flattened per-agent hidden rows.
    fn row(&self, visible: &BTreeMap<usize, usize>, hiddens: &[f64]) -> Vec<f64> {
        let mut row = vec![0.0; self.n_agents * self.n_actions];
        for (&agent, &action) in visible {
            row[agent * self.n_actions + action] = 1.0;
        }
        row.extend_from_slice(hiddens);
        row
    }

    /// Per-agent action distributions for one masked joint action.
    pub fn distributions(
        &self,
        visible: &BTreeMap<usize, usize>,
        hiddens: &Tensor,
    ) -> Result<Vec<Vec<f64>>> {
        if hiddens.rows() != self.n_agents || hiddens.cols() != self.hidden_dim {
            return Err(CoreError::shape(
                "action model hiddens",
                format!("{}x{}", self.n_agents, self.hidden_dim),
                format!("{}x{}", hiddens.rows(), hiddens.cols()),
            ));
        }
        if visible.keys().any(|&k| k >= self.n_agents)
            || visible.values().any(|&a| a >= self.n_actions)
        {
            return Err(CoreError::InvalidArgument(
                "visible action out of range".into(),
            ));
        }
        let row = self.row(visible, hiddens.data());
        let logits = mlp_forward(
            &self.params,
            &Tensor::from_vec(1, self.input_dim(), row),
        )?;
        let mut dists = Vec::with_capacity(self.n_agents);
        for j in 0..self.n_agents {
            let block = &logits.data()[j * self.n_actions..(j + 1) * self.n_actions];
            dists.push(softmax(block));
        }
        Ok(dists)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `KL(p || q)` between two categorical distributions in nats.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "KL over mismatched supports");
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// One cross-entropy step of the action model. Each batch row draws a fresh
/// visible group from `sample_visible`; the inputs keep only that group's
/// actions and the loss covers only the complement's actions, so a
/// zero-size visible group trains the fully-masked marginal predictor.
pub fn train_action_model(
    model: &mut ActionReconModel,
    opt: &mut OptimizerState,
    traces: &[&EpisodeTrace],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    mut sample_visible: impl FnMut(&mut ChaCha8Rng) -> BTreeSet<usize>,
) -> Result<f64> {
    let steps: Vec<(usize, usize)> = traces
        .iter()
        .enumerate()
        .flat_map(|(e, tr)| (0..tr.len()).map(move |t| (e, t)))
        .collect();
    if steps.is_empty() {
        return Err(CoreError::InvalidArgument("no transitions to train on".into()));
    }
    if batch_size == 0 {
        return Err(CoreError::InvalidArgument("empty batch requested".into()));
    }
    let n = model.n_agents;
    let mut rows = Vec::with_capacity(batch_size * model.input_dim());
    let mut targets: Vec<Vec<usize>> = vec![Vec::with_capacity(batch_size); n];
    let mut masks: Vec<Vec<f64>> = vec![Vec::with_capacity(batch_size); n];
    let mut n_targets = 0usize;
    for _ in 0..batch_size {
        let (e, t) = steps[rng.gen_range(0..steps.len())];
        let trace = traces[e];
        let tr = &trace.transitions[t];
        let visible = sample_visible(rng);
        if visible.iter().any(|&k| k >= n) {
            return Err(CoreError::InvalidArgument(
                "sampled visible group out of range".into(),
            ));
        }
        let kept: BTreeMap<usize, usize> = visible
            .iter()
            .map(|&k| (k, tr.intermediate[k]))
            .collect();
        rows.extend(model.row(&kept, trace.hiddens[t].data()));
        for j in 0..n {
            let hidden_target = !visible.contains(&j);
            targets[j].push(tr.intermediate[j]);
            masks[j].push(if hidden_target { 1.0 } else { 0.0 });
            if hidden_target {
                n_targets += 1;
            }
        }
    }
    if n_targets == 0 {
        return Err(CoreError::InvalidArgument(
            "every sampled group left no prediction targets".into(),
        ));
    }

    let tape = Tape::new();
    let leaves = model.params.leaves(&tape);
    let input = Tensor::from_vec(batch_size, model.input_dim(), rows);
    let logits = forward_on_tape(&tape, &model.params.arch, &leaves, tape.leaf_owned(input), None)?.0;
    let mut total = None;
    for j in 0..n {
        let block = tape.slice_cols(logits, j * model.n_actions, model.n_actions);
        let lsm = tape.log_softmax_rows(block);
        let picked = tape.gather_cols(lsm, &targets[j]);
        let mask = Tensor::from_vec(batch_size, 1, masks[j].clone());
        let masked = tape.mul_elem(picked, tape.leaf_owned(mask));
        let s = tape.sum(masked);
        total = Some(match total {
            Some(acc) => tape.add(acc, s),
            None => s,
        });
    }
    let loss = tape.scale(tape.neg(total.expect("at least one agent")), 1.0 / n_targets as f64);
    let value = tape.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(CoreError::NonFinite {
            context: "action reconstruction loss".into(),
        });
    }
    let grads = collect_grads(&tape.backward(loss), &leaves);
    rmsprop_step(&mut model.params, &grads, opt)?;
    Ok(value)
}

/// Mean cross-entropy of the model on the hidden-group agents over every
/// transition, with a fixed visible group. Evaluation only.
pub fn action_model_ce(
    model: &ActionReconModel,
    traces: &[&EpisodeTrace],
    visible: &BTreeSet<usize>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for trace in traces {
        for t in 0..trace.len() {
            let tr = &trace.transitions[t];
            let kept: BTreeMap<usize, usize> = visible
                .iter()
                .map(|&k| (k, tr.intermediate[k]))
                .collect();
            let dists = model.distributions(&kept, &trace.hiddens[t])?;
            for j in 0..model.n_agents {
                if visible.contains(&j) {
                    continue;
                }
                total -= dists[j][tr.intermediate[j]].max(1e-300).ln();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(CoreError::InvalidArgument(
            "no prediction targets outside the visible group".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Action-level MI of a candidate visible-group action: the summed KL
/// between each hidden-group agent's predicted distribution conditioned on
/// the candidate and the one conditioned on a fully masked input.
pub fn action_level_mi(
    model: &ActionReconModel,
    candidate: &BTreeMap<usize, usize>,
    hiddens: &Tensor,
    hidden_group: &BTreeSet<usize>,
) -> Result<f64> {
    if candidate.keys().any(|k| hidden_group.contains(k)) {
        return Err(CoreError::InvalidArgument(
            "candidate actions overlap the predicted group".into(),
        ));
    }
    let cond = model.distributions(candidate, hiddens)?;
    let marg = model.distributions(&BTreeMap::new(), hiddens)?;
    Ok(hidden_group
        .iter()
        .map(|&j| categorical_kl(&cond[j], &marg[j]))
        .sum())
}

// ── redundancy diagnostic ────────────────────────────────────────────────

/// Group-wise MI estimate against the sum of the per-actor dimension scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub groupwise: f64,
    pub summed_dim: f64,
    /// `groupwise - summed_dim`, signed.
    pub residual: f64,
}

/// Compare the group-conditioned estimate on `batch` with the summed
/// pairwise table scores for the same observer and actors. Large actor
/// groups are rejected; the diagnostic is meant for small desk partitions.
pub fn redundancy_estimate(
    group_model: &ObsReconModel,
    batch: &MiBatch,
    table: &DimScoreTable,
) -> Result<RedundancyReport> {
    if batch.actors.len() > MAX_GROUP_ACTORS {
        return Err(CoreError::InvalidArgument(format!(
            "redundancy diagnostic supports at most {MAX_GROUP_ACTORS} actors, got {}",
            batch.actors.len()
        )));
    }
    let groupwise: f64 = club_dim_mi(group_model, batch)?.iter().sum();
    let actor_set: BTreeSet<usize> = batch.actors.iter().copied().collect();
    let summed_dim: f64 = table.aggregate(batch.observer, &actor_set).iter().sum();
    Ok(RedundancyReport {
        groupwise,
        summed_dim,
        residual: groupwise - summed_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream};

    // Jointly Gaussian (input, target) pair with the given correlation.
    fn gaussian_pair_batch(rho: f64, b: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
        let mut u = Vec::with_capacity(b);
        let mut x = Vec::with_capacity(b);
        for _ in 0..b {
            let z = standard_normal(rng);
            let e = standard_normal(rng);
            u.push(z);
            x.push(rho * z + (1.0 - rho * rho).sqrt() * e);
        }
        let neg: Vec<f64> = (0..b).map(|k| u[(k + 1) % b]).collect();
        (
            Tensor::from_vec(b, 1, u),
            Tensor::from_vec(b, 1, neg),
            Tensor::from_vec(b, 1, x),
        )
    }

    fn trained_gaussian_model(rho: f64, seed: u64) -> (ModelParams, Tensor, Tensor, Tensor) {
        let mut rng = stream(seed, "club-oracle", 0);
        let mut params = ModelParams::init(
            Architecture::mlp(&[1, 32, 2], Activation::Relu),
            &mut rng,
        )
        .unwrap();
        let mut opt = OptimizerState::new(DEFAULT_MI_LR, &params);
        let (train_u, _, train_x) = gaussian_pair_batch(rho, 512, &mut rng);
        for _ in 0..600 {
            gaussian_nll_step(&mut params, &mut opt, &train_u, &train_x).unwrap();
        }
        let (pos, neg, x) = gaussian_pair_batch(rho, 1024, &mut rng);
        (params, pos, neg, x)
    }

    #[test]
    fn gaussian_training_reduces_nll_on_linear_data() {
        let mut rng = stream(1, "nll", 0);
        let mut params = ModelParams::init(
            Architecture::mlp(&[2, 32, 4], Activation::Relu),
            &mut rng,
        )
        .unwrap();
        let mut opt = OptimizerState::new(DEFAULT_MI_LR, &params);
        let b = 256;
        let mut inp = Vec::new();
        let mut tgt = Vec::new();
        for _ in 0..b {
            let (a, c) = (standard_normal(&mut rng), standard_normal(&mut rng));
            inp.extend([a, c]);
            tgt.extend([a + 0.5 * c, a - c]);
        }
        let inputs = Tensor::from_vec(b, 2, inp);
        let targets = Tensor::from_vec(b, 2, tgt);
        let first = gaussian_nll_step(&mut params, &mut opt, &inputs, &targets)
            .unwrap()
            .nll;
        let mut last = first;
        for _ in 0..500 {
            last = gaussian_nll_step(&mut params, &mut opt, &inputs, &targets)
                .unwrap()
                .nll;
        }
        assert!(last < first, "NLL went from {first} to {last}");
        assert!(last.is_finite());
    }

    #[test]
    fn constant_target_reaches_the_variance_clamp_floor() {
        let mut rng = stream(2, "clamp", 0);
        let mut params = ModelParams::init(
            Architecture::mlp(&[1, 2], Activation::Relu),
            &mut rng,
        )
        .unwrap();
        let b = 128;
        let inputs = Tensor::from_vec(b, 1, (0..b).map(|_| standard_normal(&mut rng)).collect());
        let targets = Tensor::filled(b, 1, 0.7);
        let mut fit = GaussianFit { nll: f64::NAN, clamped: 0 };
        // Coarse phase drives the log-variance down to the clamp, fine phase
        // settles the mean so the squared error stops fighting exp(8).
        let mut opt = OptimizerState::new(5e-3, &params);
        for _ in 0..2500 {
            fit = gaussian_nll_step(&mut params, &mut opt, &inputs, &targets).unwrap();
        }
        let mut opt = OptimizerState::new(2e-4, &params);
        for _ in 0..1500 {
            fit = gaussian_nll_step(&mut params, &mut opt, &inputs, &targets).unwrap();
        }
        // Optimal NLL for a constant target is the entropy of the
        // floor-variance Gaussian: (logvar_min + ln 2 pi) / 2.
        let floor = 0.5 * (LOGVAR_MIN + LN_2PI);
        assert!(fit.clamped > 0, "log-variance never hit the clamp");
        assert!((fit.nll - floor).abs() < 0.15, "NLL {} vs floor {floor}", fit.nll);
    }

    #[test]
    fn club_estimates_are_monotone_in_correlation_and_near_analytic() {
        let mut estimates = Vec::new();
        for &rho in &[0.0, 0.5, 0.9] {
            let (params, pos, neg, x) = trained_gaussian_model(rho, 3);
            let score = club_scores(&params, &pos, &neg, &x).unwrap()[0];
            let analytic = -0.5 * (1.0 - rho * rho).ln();
            assert!(
                score >= analytic - 0.05,
                "rho {rho}: estimate {score} vs analytic {analytic}"
            );
            estimates.push(score);
        }
        assert!(estimates[0] < estimates[1] && estimates[1] < estimates[2]);
    }

    #[test]
    fn independent_pair_scores_near_zero() {
        let (params, pos, neg, x) = trained_gaussian_model(0.0, 4);
        let score = club_scores(&params, &pos, &neg, &x).unwrap()[0];
        assert!(score <= 0.05, "independent estimate {score}");
    }

    #[test]
    fn constant_target_dimension_scores_exactly_zero() {
        let mut rng = stream(5, "const-dim", 0);
        let params = ModelParams::init(
            Architecture::mlp(&[1, 8, 4], Activation::Relu),
            &mut rng,
        )
        .unwrap();
        let b = 64;
        let pos = Tensor::from_vec(b, 1, (0..b).map(|_| standard_normal(&mut rng)).collect());
        let neg = Tensor::from_vec(b, 1, (0..b).map(|_| standard_normal(&mut rng)).collect());
        let mut t = Tensor::zeros(b, 2);
        for r in 0..b {
            t.set(r, 1, standard_normal(&mut rng));
        }
        let scores = club_scores(&params, &pos, &neg, &t).unwrap();
        assert_eq!(scores[0], 0.0, "constant dimension must score exactly 0");
        assert!(scores.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn small_batches_are_rejected() {
        let mut rng = stream(6, "small", 0);
        let params = ModelParams::init(
            Architecture::mlp(&[1, 8, 2], Activation::Relu),
            &mut rng,
        )
        .unwrap();
        let t = Tensor::zeros(8, 1);
        assert!(club_scores(&params, &t, &t, &t).is_err());
    }

    // Synthetic traces with controllable action influence: agent j's action
    // moves dimension j of every observer's next observation.
    fn synthetic_traces(
        n_agents: usize,
        n_actions: usize,
        hid: usize,
        episodes: usize,
        steps: usize,
        coupled: bool,
        seed: u64,
    ) -> Vec<EpisodeTrace> {
        use crate::envs::JointObservation;
        use crate::induced::Transition;
        let mut rng = stream(seed, "synthetic-traces", 0);
        let obs_dim = n_agents + 1;
        (0..episodes)
            .map(|_| {
                let mut transitions = Vec::new();
                let mut hiddens = Vec::new();
                let mut obs_now = JointObservation::new(vec![vec![0.0; obs_dim]; n_agents]);
                for t in 0..steps {
                    let acts: Vec<usize> =
                        (0..n_agents).map(|_| rng.gen_range(0..n_actions)).collect();
                    let mut next = Vec::new();
                    for _ in 0..n_agents {
                        let mut o = vec![0.0; obs_dim];
                        for (j, &a) in acts.iter().enumerate() {
                            o[j] = if coupled {
                                a as f64 / n_actions as f64 + 0.05 * standard_normal(&mut rng)
                            } else {
                                standard_normal(&mut rng)
                            };
                        }
                        o[n_agents] = standard_normal(&mut rng);
                        next.push(o);
                    }
                    let next = JointObservation::new(next);
                    let mut h = Tensor::zeros(n_agents, hid);
                    for v in h.data_mut() {
                        *v = 0.1 * standard_normal(&mut rng);
                    }
                    hiddens.push(h);
                    transitions.push(Transition {
                        obs: obs_now.clone(),
                        clean_obs: obs_now.clone(),
                        intermediate: acts.clone(),
                        executed: acts,
                        reward: 0.0,
                        avail: vec![vec![true; n_actions]; n_agents],
                        done: t == steps - 1,
                        state: vec![0.0; 2],
                        attack_fired: false,
                    });
                    obs_now = next;
                }
                let last = transitions.last().expect("steps > 0");
                EpisodeTrace {
                    final_obs: obs_now.clone(),
                    final_clean_obs: obs_now.clone(),
                    final_avail: last.avail.clone(),
                    final_state: last.state.clone(),
                    transitions,
                    hiddens,
                    g1: BTreeSet::new(),
                    p_act: 0.0,
                    success: false,
                }
            })
            .collect()
    }

    #[test]
    fn batches_from_traces_align_and_never_self_pair() {
        let traces = synthetic_traces(3, 4, 6, 5, 10, true, 7);
        let refs: Vec<&EpisodeTrace> = traces.iter().collect();
        let mut rng = stream(7, "batch", 0);
        let batch = MiBatch::from_traces(&refs, 0, &[2], 40, &mut rng).unwrap();
        batch.validate().unwrap();
        assert_eq!(batch.len(), 40);
        assert!(batch.negatives.iter().enumerate().all(|(k, &m)| k != m));
        assert!(MiBatch::from_traces(&refs, 0, &[0], 40, &mut rng).is_err());
        assert!(MiBatch::from_traces(&refs[..1], 0, &[1], 64, &mut rng).is_err());
    }

    #[test]
    fn score_table_covers_all_ordered_pairs_and_normalizes() {
        let traces = synthetic_traces(3, 4, 6, 30, 12, true, 8);
        let refs: Vec<&EpisodeTrace> = traces.iter().collect();
        let mut rng = stream(8, "table", 0);
        let mut model = ObsReconModel::init(3, 4, 6, 4, 1, &mut rng).unwrap();
        let mut opt = OptimizerState::new(DEFAULT_MI_LR, &model.params);
        // Train briefly on one pair batch per step, rotating pairs.
        let pairs = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];
        for s in 0..240 {
            let (i, j) = pairs[s % pairs.len()];
            let batch = MiBatch::from_traces(&refs, i, &[j], 128, &mut rng).unwrap();
            train_obs_model(&mut model, &mut opt, &batch).unwrap();
        }
        let table = refresh_score_table(&model, &refs, 128, 30, &mut rng).unwrap();
        assert!(table.all_finite());
        assert!(table.max() > 0.0, "coupled data must produce signal");
        let norm = table.normalized();
        let mut top = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    for d in 0..4 {
                        let s = norm.score(i, d, j);
                        assert!((0.0..=1.0).contains(&s));
                        top = top.max(s);
                    }
                }
            }
        }
        assert!((top - 1.0).abs() < 1e-12);
        // Influence structure: actor j drives dimension j of the next
        // observation, so the diagonal dimension should dominate.
        for (i, j) in [(0usize, 1usize), (1, 2), (2, 0)] {
            let row = table.pair(i, j);
            let best = (0..4).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best, j, "observer {i} actor {j} scores {row:?}");
        }
        // Insufficient data keeps the caller on the previous table.
        assert!(refresh_score_table(&model, &refs[..1], 128, 30, &mut rng).is_err());
    }

    #[test]
    fn gaussian_nll_gradient_matches_finite_differences() {
        use crate::diffcore::{max_rel_error, numeric_gradient};
        let mut rng = stream(12, "gradcheck", 0);
        let mut params = ModelParams::init(
            Architecture::mlp(&[2, 5, 4], Activation::Relu),
            &mut rng,
        )
        .unwrap();
        let b = 6;
        let inputs = Tensor::from_vec(
            b,
            2,
            (0..2 * b).map(|_| standard_normal(&mut rng)).collect(),
        );
        let targets = Tensor::from_vec(
            b,
            2,
            (0..2 * b).map(|_| standard_normal(&mut rng)).collect(),
        );
        let loss_of = |p: &ModelParams| {
            let tape = Tape::new();
            let leaves = p.leaves(&tape);
            let out = forward_on_tape(&tape, &p.arch, &leaves, tape.leaf(&inputs), None)
                .unwrap()
                .0;
            let d = targets.cols();
            let mu = tape.slice_cols(out, 0, d);
            let lv = tape.clamp(tape.slice_cols(out, d, d), LOGVAR_MIN, LOGVAR_MAX);
            let diff = tape.sub(mu, tape.leaf(&targets));
            let sq = tape.mul_elem(diff, diff);
            let w = tape.mul_elem(sq, tape.exp(tape.neg(lv)));
            let loss = tape.scale(tape.sum(tape.add(lv, w)), 0.5 / b as f64);
            tape.value(loss).get(0, 0)
        };
        let analytic = {
            let tape = Tape::new();
            let leaves = params.leaves(&tape);
            let out = forward_on_tape(&tape, &params.arch, &leaves, tape.leaf(&inputs), None)
                .unwrap()
                .0;
            let d = targets.cols();
            let mu = tape.slice_cols(out, 0, d);
            let lv = tape.clamp(tape.slice_cols(out, d, d), LOGVAR_MIN, LOGVAR_MAX);
            let diff = tape.sub(mu, tape.leaf(&targets));
            let sq = tape.mul_elem(diff, diff);
            let w = tape.mul_elem(sq, tape.exp(tape.neg(lv)));
            let loss = tape.scale(tape.sum(tape.add(lv, w)), 0.5 / b as f64);
            collect_grads(&tape.backward(loss), &leaves)
        };
        let numeric = numeric_gradient(&mut params, loss_of, 1e-6);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "gradient mismatch {err}");
    }

    #[test]
    fn categorical_kl_matches_hand_arithmetic() {
        let kl = categorical_kl(&[0.9, 0.1], &[0.5, 0.5]);
        assert!((kl - 0.3680642071684971).abs() < 1e-12);
        assert_eq!(categorical_kl(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!(categorical_kl(&[1.0, 0.0], &[0.5, 0.5]) > 0.0);
    }

    #[test]
    fn input_independent_model_has_zero_action_mi() {
        let zero = ActionReconModel {
            params: ModelParams::zeros(Architecture::mlp(
                &[2 * (3 + 4), 8, 6],
                Activation::Relu,
            ))
            .unwrap(),
            n_agents: 2,
            n_actions: 3,
            hidden_dim: 4,
        };
        let hiddens = Tensor::zeros(2, 4);
        let g2: BTreeSet<usize> = [1].into();
        for a in 0..3 {
            let cand: BTreeMap<usize, usize> = [(0, a)].into();
            let mi = action_level_mi(&zero, &cand, &hiddens, &g2).unwrap();
            assert_eq!(mi, 0.0);
        }
        let overlap: BTreeMap<usize, usize> = [(1, 0)].into();
        assert!(action_level_mi(&zero, &overlap, &hiddens, &g2).is_err());
    }

    #[test]
    fn action_model_learns_to_copy_a_visible_agent() {
        // Agent 1 always mirrors agent 0, so conditioning on agent 0 should
        // drive the hidden-group cross-entropy toward zero.
        let mut traces = synthetic_traces(2, 3, 4, 24, 10, false, 9);
        for tr in &mut traces {
            for step in &mut tr.transitions {
                step.intermediate[1] = step.intermediate[0];
                step.executed[1] = step.executed[0];
            }
        }
        let refs: Vec<&EpisodeTrace> = traces.iter().collect();
        let mut rng = stream(9, "copy", 0);
        let mut model = ActionReconModel::init(2, 3, 4, &mut rng).unwrap();
        let mut opt = OptimizerState::new(DEFAULT_MI_LR, &model.params);
        let visible: BTreeSet<usize> = [0].into();
        let before = action_model_ce(&model, &refs, &visible).unwrap();
        for _ in 0..600 {
            train_action_model(&mut model, &mut opt, &refs, 64, &mut rng, |_| {
                [0usize].into()
            })
            .unwrap();
        }
        let after = action_model_ce(&model, &refs, &visible).unwrap();
        assert!(after < before, "CE went from {before} to {after}");
        assert!(after < 0.1, "copyable data should be nearly free: {after}");
    }

    #[test]
    fn masked_action_inputs_get_zero_gradient() {
        let traces = synthetic_traces(2, 3, 4, 6, 8, false, 10);
        let refs: Vec<&EpisodeTrace> = traces.iter().collect();
        let mut rng = stream(10, "masked-grad", 0);
        let mut model = ActionReconModel::init(2, 3, 4, &mut rng).unwrap();
        let mut opt = OptimizerState::new(DEFAULT_MI_LR, &model.params);
        let w_before = model.params.get("layer0.w").unwrap().clone();
        // Empty visible group: every action input is a zeroed constant.
        train_action_model(&mut model, &mut opt, &refs, 32, &mut rng, |_| {
            BTreeSet::new()
        })
        .unwrap();
        let w_after = model.params.get("layer0.w").unwrap();
        let action_rows = 2 * 3;
        for r in 0..action_rows {
            for c in 0..w_after.cols() {
                assert_eq!(
                    w_before.get(r, c),
                    w_after.get(r, c),
                    "masked input weight ({r},{c}) moved"
                );
            }
        }
        let hidden_moved = (action_rows..w_after.rows())
            .any(|r| (0..w_after.cols()).any(|c| w_before.get(r, c) != w_after.get(r, c)));
        assert!(hidden_moved, "history-embedding weights should update");
    }

    #[test]
    fn redundancy_report_fields_are_consistent_and_small_when_independent() {
        // Train on one half of the episodes and score on the other half:
        // the contrastive ratio is only meaningful off the training rows.
        let traces = synthetic_traces(3, 4, 6, 80, 16, false, 11);
        let train: Vec<&EpisodeTrace> = traces[..40].iter().collect();
        let eval: Vec<&EpisodeTrace> = traces[40..].iter().collect();
        let mut rng = stream(11, "redundancy", 0);
        let mut pair_model = ObsReconModel::init(3, 4, 6, 4, 1, &mut rng).unwrap();
        let mut pair_opt = OptimizerState::new(DEFAULT_MI_LR, &pair_model.params);
        let mut group_model = ObsReconModel::init(3, 4, 6, 4, 2, &mut rng).unwrap();
        let mut group_opt = OptimizerState::new(DEFAULT_MI_LR, &group_model.params);
        for s in 0..160 {
            let j = [1, 2][s % 2];
            let b = MiBatch::from_traces(&train, 0, &[j], 128, &mut rng).unwrap();
            train_obs_model(&mut pair_model, &mut pair_opt, &b).unwrap();
            let g = MiBatch::from_traces(&train, 0, &[1, 2], 128, &mut rng).unwrap();
            train_obs_model(&mut group_model, &mut group_opt, &g).unwrap();
        }
        let table = refresh_score_table(&pair_model, &eval, 256, 80, &mut rng).unwrap();
        let batch = MiBatch::from_traces(&eval, 0, &[1, 2], 512, &mut rng).unwrap();
        let report = redundancy_estimate(&group_model, &batch, &table).unwrap();
        assert!(
            (report.residual - (report.groupwise - report.summed_dim)).abs() < 1e-15,
            "residual must equal the difference exactly"
        );
        assert!(
            report.groupwise.abs() <= 0.1 && report.residual.abs() <= 0.05,
            "independent data: groupwise {} residual {}",
            report.groupwise,
            report.residual
        );
        // Oversized groups are rejected.
        let wide = MiBatch {
            actors: vec![1, 2, 3],
            actor_actions: batch.actor_actions.iter().map(|a| vec![a[0]; 3]).collect(),
            ..batch
        };
        assert!(redundancy_estimate(&group_model, &wide, &table).is_err());
    }
}
