//! Experiment orchestration: configuration files, the evaluation matrix
//! (attacks x perturbations x seeds), MI table dumps, ablation grids,
//! versioned binary checkpoints, and the metrics CSV.
//!
//! Everything here is a pure function of (state bytes, config, seed list):
//! evaluation draws all randomness from purpose-named streams keyed by the
//! evaluation seed and cell index, the CSV schema contains no timestamps,
//! and checkpoints round-trip byte-identically.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attackers::{
    fgsm_perturb, mask_budget, rand_obs_perturb, sample_partition, select_mask,
    uniform_available_action, value_min_action, AttackProbState, AttackSpec, GroupPartition,
    MaskSet,
};
use crate::diffcore::{
    collect_grads, forward_on_tape, max_rel_error, numeric_gradient, ModelParams, OptimizerState,
    Tape, Tensor,
};
use crate::envs::{apply_perturbation, DimLabel, Env, EnvSpec, JointAction, PerturbationSpec};
use crate::error::{CkptError, CoreError, Result};
use crate::induced::{
    equivalence_probe, rollout_episode, ActionAttack, EpisodeTrace, EquivalenceReport, InducedEnv,
    ReplayAction,
};
use crate::miest::{
    redundancy_estimate, refresh_score_table, refresh_score_table_observed, train_obs_model,
    ActionReconModel, DimScoreTable, MiBatch, ObsReconModel, RedundancyReport, LOGVAR_MAX,
    LOGVAR_MIN,
};
use crate::qmix::{
    agent_architecture, select_actions, EpsilonSchedule, MixerParams, QmixParams,
};
use crate::rng::{standard_normal, stream};
use crate::stats::mean_and_sample_std;
use crate::train::{train, MetricsRow, ObsStyle, TrainConfig, TrainRun, TrainSink, TrainState};

/// Fewest evaluation episodes per (cell, seed) the config accepts.
pub const MIN_EVAL_EPISODES: usize = 32;

/// Default evaluation episodes per (cell, seed).
pub const DEFAULT_EVAL_EPISODES: usize = 96;

/// Exploration used for the MI-dump probe rollouts; greedy rollouts of a
/// converged policy repeat a handful of action patterns, which starves the
/// action-conditional scores of variety.
const MI_DUMP_EPSILON: f64 = 0.2;

// ── experiment configuration ─────────────────────────────────────────────

fn default_eval_attacks() -> Vec<AttackSpec> {
    vec![AttackSpec::None]
}

fn default_eval_episodes() -> usize {
    DEFAULT_EVAL_EPISODES
}

fn default_eval_seeds() -> Vec<u64> {
    vec![101, 102, 103, 104, 105]
}

/// One experiment: a training run plus the evaluation matrix applied to its
/// checkpoint. Unknown JSON keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Evaluation cells; one cell per attack.
    #[serde(default = "default_eval_attacks")]
    pub eval_attacks: Vec<AttackSpec>,
    /// Additional cells running the unattacked policy on perturbed
    /// environments.
    #[serde(default)]
    pub perturbations: Vec<PerturbationSpec>,
    /// Episodes per (cell, seed).
    #[serde(default = "default_eval_episodes")]
    pub episodes_per_cell: usize,
    /// Evaluation seeds; must not contain the training seed.
    #[serde(default = "default_eval_seeds")]
    pub eval_seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults around a training config: a natural-only evaluation at
    /// 96 episodes x 5 seeds.
    pub fn new(train: TrainConfig, out_dir: PathBuf) -> Self {
        ExperimentConfig {
            train,
            eval_attacks: default_eval_attacks(),
            perturbations: Vec::new(),
            episodes_per_cell: default_eval_episodes(),
            eval_seeds: default_eval_seeds(),
            out_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.episodes_per_cell < MIN_EVAL_EPISODES {
            return Err(CoreError::Config(format!(
                "{} episodes per evaluation cell is below the minimum {MIN_EVAL_EPISODES}",
                self.episodes_per_cell
            )));
        }
        if self.eval_seeds.is_empty() {
            return Err(CoreError::Config("evaluation seed list is empty".into()));
        }
        if self.eval_seeds.contains(&self.train.seed) {
            return Err(CoreError::Config(format!(
                "evaluation seeds overlap the training seed {}",
                self.train.seed
            )));
        }
        let distinct: BTreeSet<u64> = self.eval_seeds.iter().copied().collect();
        if distinct.len() != self.eval_seeds.len() {
            return Err(CoreError::Config("evaluation seeds repeat".into()));
        }
        let n = self.train.env.n_agents();
        for attack in &self.eval_attacks {
            attack
                .validate(n)
                .map_err(|e| CoreError::Config(format!("attack {}: {e}", attack.name())))?;
        }
        for (i, p) in self.perturbations.iter().enumerate() {
            apply_perturbation(&self.train.env, p, &mut stream(0, "config-probe", i as u64))
                .and_then(|spec| spec.validate())
                .map_err(|e| CoreError::Config(format!("perturbation {}: {e}", p.label())))?;
        }
        Ok(())
    }
}

/// Parse and validate an experiment config from a JSON file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

// ── metrics CSV ──────────────────────────────────────────────────────────

/// Fixed column order of the metrics CSV. No timestamps, so identically
/// seeded runs produce identical files.
pub const METRICS_HEADER: &str = "step,episode,phase,partition-size,p-act,p-act-max,\
                                  td-loss,obs-model-nll,action-model-ce,success,return,seed";

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// One CSV line for a metrics row, without the trailing newline. Optional
/// columns render as empty fields; success renders as 0/1.
pub fn format_metrics_row(row: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        row.step,
        row.episode,
        row.phase.as_str(),
        row.partition_size,
        row.p_act,
        row.p_act_max,
        opt_field(row.td_loss),
        opt_field(row.obs_model_nll),
        opt_field(row.action_model_ce),
        u8::from(row.success),
        row.episode_return,
        row.seed,
    )
}

fn check_row(row: &MetricsRow) -> Result<()> {
    if row.episode == 0 {
        return Err(CoreError::Config("metrics rows are 1-based".into()));
    }
    for (what, v) in [
        ("firing probability", row.p_act),
        ("firing-probability cap", row.p_act_max),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CoreError::Config(format!(
                "metrics row {}: {what} {v} outside [0, 1]",
                row.episode
            )));
        }
    }
    if !row.episode_return.is_finite() {
        return Err(CoreError::Config(format!(
            "metrics row {}: non-finite return",
            row.episode
        )));
    }
    Ok(())
}

/// Append-only CSV writer. The header is written exactly once, on creation;
/// every appended row is schema-checked and flushed.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        check_row(row)?;
        writeln!(self.out, "{}", format_metrics_row(row))?;
        self.out.flush()?;
        Ok(())
    }
}

/// Write a finished run's rows in one go.
pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut writer = MetricsWriter::create(path)?;
    for row in rows {
        writer.append(row)?;
    }
    Ok(())
}

/// Training sink that streams rows to `metrics.csv` and saves every state
/// snapshot to `checkpoint.bin` in the output directory. Because the final
/// snapshot is unconditional, an aborted run still leaves its diagnostic
/// state on disk.
pub struct CsvSink {
    writer: MetricsWriter,
    checkpoint_path: PathBuf,
}

impl CsvSink {
    pub fn create(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        Ok(CsvSink {
            writer: MetricsWriter::create(&out_dir.join("metrics.csv"))?,
            checkpoint_path: out_dir.join("checkpoint.bin"),
        })
    }
}

impl TrainSink for CsvSink {
    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.append(row)
    }

    fn snapshot(&mut self, state: &TrainState) -> Result<()> {
        save_checkpoint(state, &self.checkpoint_path)
    }
}

// ── checkpoints ──────────────────────────────────────────────────────────

pub const CKPT_MAGIC: &[u8; 10] = b"ibal-ckpt-";
pub const CKPT_VERSION: &str = "v1";

/// FNV-1a over the serialized body; appended as the final 8 bytes and
/// verified before anything else is parsed.
fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u64(out, bytes.len() as u64);
    out.extend_from_slice(bytes);
}

fn to_json<T: Serialize>(value: &T, context: &str) -> Result<Vec<u8>> {
    serde_json::to_vec(value)
        .map_err(|e| CoreError::Config(format!("cannot serialize {context}: {e}")))
}

/// Every named-tensor section of the state, with the prefix its tensors
/// carry in the file. Save and load walk the same list, so the manifest is
/// complete by construction.
fn section_prefixes() -> [&'static str; 12] {
    [
        "policy/agent/",
        "policy/mixer/w1/",
        "policy/mixer/b1/",
        "policy/mixer/w2/",
        "policy/mixer/b2/",
        "target/agent/",
        "target/mixer/w1/",
        "target/mixer/b1/",
        "target/mixer/w2/",
        "target/mixer/b2/",
        "obs-model/",
        "action-model/",
    ]
}

fn sections(state: &TrainState) -> [(&'static str, &ModelParams); 12] {
    let p = section_prefixes();
    [
        (p[0], &state.policy.agent),
        (p[1], &state.policy.mixer.hyper_w1),
        (p[2], &state.policy.mixer.hyper_b1),
        (p[3], &state.policy.mixer.hyper_w2),
        (p[4], &state.policy.mixer.hyper_b2),
        (p[5], &state.target.agent),
        (p[6], &state.target.mixer.hyper_w1),
        (p[7], &state.target.mixer.hyper_b1),
        (p[8], &state.target.mixer.hyper_w2),
        (p[9], &state.target.mixer.hyper_b2),
        (p[10], &state.obs_model.params),
        (p[11], &state.action_model.params),
    ]
}

fn section_mut<'s>(state: &'s mut TrainState, prefix: &str) -> Option<&'s mut ModelParams> {
    Some(match prefix {
        "policy/agent/" => &mut state.policy.agent,
        "policy/mixer/w1/" => &mut state.policy.mixer.hyper_w1,
        "policy/mixer/b1/" => &mut state.policy.mixer.hyper_b1,
        "policy/mixer/w2/" => &mut state.policy.mixer.hyper_w2,
        "policy/mixer/b2/" => &mut state.policy.mixer.hyper_b2,
        "target/agent/" => &mut state.target.agent,
        "target/mixer/w1/" => &mut state.target.mixer.hyper_w1,
        "target/mixer/b1/" => &mut state.target.mixer.hyper_b1,
        "target/mixer/w2/" => &mut state.target.mixer.hyper_w2,
        "target/mixer/b2/" => &mut state.target.mixer.hyper_b2,
        "obs-model/" => &mut state.obs_model.params,
        "action-model/" => &mut state.action_model.params,
        _ => return None,
    })
}

fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    put_bytes(&mut out, CKPT_VERSION.as_bytes());
    put_bytes(&mut out, &to_json(&state.config, "train config")?);
    put_bytes(&mut out, &to_json(&state.prob_state, "firing-probability state")?);
    put_bytes(&mut out, &to_json(&state.score_table, "score table")?);
    put_u64(&mut out, state.env_steps as u64);
    put_u64(&mut out, state.episodes as u64);
    let all = sections(state);
    let count: usize = all.iter().map(|(_, m)| m.names().count()).sum();
    put_u64(&mut out, count as u64);
    for (prefix, params) in all {
        for name in params.names() {
            let tensor = params.get(name)?;
            put_bytes(&mut out, format!("{prefix}{name}").as_bytes());
            put_u64(&mut out, tensor.rows() as u64);
            put_u64(&mut out, tensor.cols() as u64);
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let checksum = fnv64(&out);
    put_u64(&mut out, checksum);
    Ok(out)
}

/// Bounds-checked cursor over the checkpoint body.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, context: &str) -> Result<&'a [u8], CkptError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CkptError::Truncated {
                context: context.into(),
            })?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn take_u64(&mut self, context: &str) -> Result<u64, CkptError> {
        let raw = self.take(8, context)?;
        Ok(u64::from_le_bytes(raw.try_into().expect("8-byte slice")))
    }

    fn take_blob(&mut self, context: &str) -> Result<&'a [u8], CkptError> {
        let len = self.take_u64(context)? as usize;
        self.take(len, context)
    }

    fn take_string(&mut self, context: &str) -> Result<String, CkptError> {
        String::from_utf8(self.take_blob(context)?.to_vec()).map_err(|_| CkptError::Malformed {
            context: format!("{context}: not UTF-8"),
        })
    }

    fn take_json<T: serde::de::DeserializeOwned>(&mut self, context: &str) -> Result<T, CkptError> {
        let blob = self.take_blob(context)?;
        serde_json::from_slice(blob).map_err(|e| CkptError::Malformed {
            context: format!("{context}: {e}"),
        })
    }

    fn take_f64s(&mut self, count: usize, context: &str) -> Result<Vec<f64>, CkptError> {
        let bytes = count.checked_mul(8).ok_or_else(|| CkptError::Malformed {
            context: format!("{context}: length overflow"),
        })?;
        let raw = self.take(bytes, context)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < CKPT_MAGIC.len() + 8 {
        return Err(CkptError::Truncated {
            context: "header".into(),
        }
        .into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
    if fnv64(body) != stored {
        return Err(CkptError::ChecksumMismatch.into());
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(CKPT_MAGIC.len(), "magic")? != CKPT_MAGIC {
        return Err(CkptError::BadMagic.into());
    }
    let version = r.take_string("version")?;
    if version != CKPT_VERSION {
        return Err(CkptError::VersionMismatch {
            found: version,
            expected: CKPT_VERSION.into(),
        }
        .into());
    }
    let config: TrainConfig = r.take_json("train config")?;
    let prob_state: AttackProbState = r.take_json("firing-probability state")?;
    let score_table: DimScoreTable = r.take_json("score table")?;
    let env_steps = r.take_u64("step counter")? as usize;
    let episodes = r.take_u64("episode counter")? as usize;

    config.validate()?;
    let spec = &config.env;
    let (n, n_actions) = (spec.n_agents(), spec.n_actions());
    let policy = QmixParams::zeros(
        n,
        n_actions,
        spec.obs_dim(),
        spec.state_dim(),
        config.agent_hidden,
        config.mixer_embed,
        config.hyper_hidden,
    )?;
    let target = policy.clone();
    let obs_model = ObsReconModel::zeros(n, n_actions, config.agent_hidden, spec.obs_dim(), 1)?;
    let action_model = ActionReconModel::zeros(n, n_actions, config.agent_hidden)?;
    let mut state = TrainState {
        config,
        policy,
        target,
        obs_model,
        action_model,
        prob_state,
        score_table,
        env_steps,
        episodes,
    };

    let count = r.take_u64("tensor count")?;
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for _ in 0..count {
        let name = r.take_string("tensor name")?;
        let rows = r.take_u64("tensor rows")? as usize;
        let cols = r.take_u64("tensor columns")? as usize;
        let len = rows.checked_mul(cols).ok_or_else(|| CkptError::Malformed {
            context: format!("tensor {name}: dimension overflow"),
        })?;
        let data = r.take_f64s(len, &name)?;
        if !seen.insert(name.clone()) {
            return Err(CkptError::Malformed {
                context: format!("duplicate tensor {name}"),
            }
            .into());
        }
        let unknown = || {
            CoreError::Checkpoint(CkptError::Malformed {
                context: format!("unknown tensor {name}"),
            })
        };
        let prefix = *section_prefixes()
            .iter()
            .find(|p| name.starts_with(*p))
            .ok_or_else(unknown)?;
        let params = section_mut(&mut state, prefix).expect("prefix from the fixed list");
        let tensor = params
            .get_mut(&name[prefix.len()..])
            .map_err(|_| unknown())?;
        if tensor.shape() != (rows, cols) {
            return Err(CkptError::ShapeMismatch {
                name,
                found: format!("{rows}x{cols}"),
                expected: format!("{}x{}", tensor.rows(), tensor.cols()),
            }
            .into());
        }
        tensor.data_mut().copy_from_slice(&data);
    }
    if r.pos != body.len() {
        return Err(CkptError::Malformed {
            context: "trailing bytes after the tensor manifest".into(),
        }
        .into());
    }
    let missing: Vec<String> = sections(&state)
        .iter()
        .flat_map(|(prefix, params)| {
            params
                .names()
                .map(move |name| format!("{prefix}{name}"))
                .collect::<Vec<_>>()
        })
        .filter(|full| !seen.contains(full))
        .collect();
    if !missing.is_empty() {
        return Err(CkptError::Malformed {
            context: format!("missing tensors: {}", missing.join(", ")),
        }
        .into());
    }
    Ok(state)
}

/// Serialize the full learner state to a versioned little-endian binary
/// file with a trailing checksum.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(state)?)?;
    Ok(())
}

/// Load a checkpoint. The checksum is verified before any field is parsed,
/// so a corrupted file is rejected without producing partial state; every
/// failure mode reports its own error variant.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}

// ── evaluation ───────────────────────────────────────────────────────────

/// One evaluation cell: a policy crossed with an attack or a perturbation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalCell {
    pub label: String,
    /// Success percentage, the mean over per-seed success rates.
    pub mean_success: f64,
    /// Sample standard deviation over the per-seed success rates.
    pub std_success: f64,
    /// Mean undiscounted episode return over all episodes.
    pub mean_return: f64,
    /// Total episodes behind the cell (per-seed episodes x seeds).
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
}

#[derive(Clone, Copy)]
enum CellTask<'a> {
    Attack(&'a AttackSpec),
    Perturb(&'a PerturbationSpec),
}

/// How the hand-rolled baseline loop corrupts the observation each step.
#[derive(Clone, Copy)]
enum ObsTamper {
    None,
    /// Gaussian noise of this scale on one uniformly chosen agent.
    Noise(f64),
    /// Gradient-sign perturbation of this budget on one uniformly chosen
    /// agent.
    Gradient(f64),
}

/// How the baseline loop replaces one agent's action after selection.
#[derive(Clone, Copy)]
enum ActTamper {
    None,
    /// With this per-step probability, resample one uniformly chosen
    /// agent's action uniformly over its available actions.
    Uniform(f64),
    /// With this per-step probability, force one uniformly chosen agent to
    /// its lowest-utility available action.
    WorstCase(f64),
}

fn trace_return(trace: &EpisodeTrace) -> f64 {
    trace.transitions.iter().map(|t| t.reward).sum()
}

/// Greedy rollout through the wrapper; used for the natural cell and for
/// perturbed environments.
fn policy_episode(
    state: &TrainState,
    base: Env,
    env_seed: u64,
    policy_rng: &mut ChaCha8Rng,
    attack_rng: &mut ChaCha8Rng,
) -> Result<(bool, f64)> {
    let mut env = InducedEnv::identity(base);
    let trace = rollout_episode(
        &mut env,
        &state.policy,
        0.0,
        state.config.replay_action,
        env_seed,
        policy_rng,
        attack_rng,
    )?;
    Ok((trace.success, trace_return(&trace)))
}

/// One interaction-breaking evaluation episode: fresh partition, the
/// score-table mask, and the action attack at the given firing probability.
fn ib_episode(
    state: &TrainState,
    k_max: usize,
    l_per_g2: usize,
    p_act: Option<f64>,
    env_seed: u64,
    policy_rng: &mut ChaCha8Rng,
    attack_rng: &mut ChaCha8Rng,
    partition_rng: &mut ChaCha8Rng,
) -> Result<(bool, f64)> {
    let spec = &state.config.env;
    let n = spec.n_agents();
    let partition = sample_partition(n, k_max, partition_rng)?;
    let p = p_act.unwrap_or(1.0 / k_max as f64);
    let (mask, attack) = if partition.is_pass_through() {
        (MaskSet::empty(n), None)
    } else {
        let l = mask_budget(l_per_g2, partition.g2.len(), spec.obs_dim());
        let mask = select_mask(&state.score_table, &partition, l)?;
        let attack = ActionAttack {
            model: &state.action_model,
            partition,
            p_act: p,
        };
        (mask, Some(attack))
    };
    let mut env = InducedEnv::wrap(spec.build()?, mask, attack)?;
    let trace = rollout_episode(
        &mut env,
        &state.policy,
        0.0,
        state.config.replay_action,
        env_seed,
        policy_rng,
        attack_rng,
    )?;
    Ok((trace.success, trace_return(&trace)))
}

/// Hand-rolled greedy episode for the baseline attacks, which tamper with
/// one agent per step and need no induced-process bookkeeping. The
/// recurrent previous-action feed follows the training-time convention.
fn baseline_episode(
    state: &TrainState,
    obs_tamper: ObsTamper,
    act_tamper: ActTamper,
    env_seed: u64,
    policy_rng: &mut ChaCha8Rng,
    attack_rng: &mut ChaCha8Rng,
) -> Result<(bool, f64)> {
    let spec = &state.config.env;
    let n = spec.n_agents();
    let policy = &state.policy;
    let mut env = spec.build()?;
    let mut obs = env.reset(env_seed)?;
    let mut hidden = policy.init_hidden();
    let mut prev: Option<JointAction> = None;
    let mut episode_return = 0.0;
    loop {
        let avail = env.all_available_actions();
        let mut seen = obs;
        match obs_tamper {
            ObsTamper::None => {}
            ObsTamper::Noise(sigma) => {
                let victim = attack_rng.gen_range(0..n);
                rand_obs_perturb(seen.agent_mut(victim), sigma, attack_rng);
            }
            ObsTamper::Gradient(eps) => {
                let victim = attack_rng.gen_range(0..n);
                let shifted = fgsm_perturb(
                    policy,
                    seen.agent(victim),
                    prev.as_ref().map(|p| p[victim]),
                    victim,
                    hidden.row(victim),
                    &avail[victim],
                    eps,
                )?;
                *seen.agent_mut(victim) = shifted;
            }
        }
        let (utilities, next_hidden) = policy.utilities_step(&seen, prev.as_ref(), &hidden)?;
        let chosen = select_actions(&utilities, &avail, 0.0, policy_rng)?;
        let mut executed = chosen.clone();
        match act_tamper {
            ActTamper::None => {}
            ActTamper::Uniform(prob) => {
                let victim = attack_rng.gen_range(0..n);
                if attack_rng.gen::<f64>() < prob {
                    executed[victim] = uniform_available_action(&avail[victim], attack_rng)?;
                }
            }
            ActTamper::WorstCase(prob) => {
                let victim = attack_rng.gen_range(0..n);
                if attack_rng.gen::<f64>() < prob {
                    executed[victim] = value_min_action(utilities.row(victim), &avail[victim])?;
                }
            }
        }
        let result = env.step(&executed)?;
        episode_return += result.reward;
        if result.done {
            return Ok((result.success, episode_return));
        }
        obs = result.obs;
        hidden = next_hidden;
        prev = Some(match state.config.replay_action {
            ReplayAction::Intermediate => chosen,
            ReplayAction::Executed => executed,
        });
    }
}

fn run_eval_episode(
    state: &TrainState,
    task: CellTask<'_>,
    env_seed: u64,
    policy_rng: &mut ChaCha8Rng,
    attack_rng: &mut ChaCha8Rng,
    partition_rng: &mut ChaCha8Rng,
    perturb_rng: &mut ChaCha8Rng,
) -> Result<(bool, f64)> {
    let spec = &state.config.env;
    match task {
        CellTask::Attack(attack) => match *attack {
            AttackSpec::None => {
                policy_episode(state, spec.build()?, env_seed, policy_rng, attack_rng)
            }
            AttackSpec::InteractionBreaking {
                k_max,
                l_per_g2,
                p_act,
            } => ib_episode(
                state,
                k_max,
                l_per_g2,
                p_act,
                env_seed,
                policy_rng,
                attack_rng,
                partition_rng,
            ),
            AttackSpec::RandObs { sigma } => baseline_episode(
                state,
                ObsTamper::Noise(sigma),
                ActTamper::None,
                env_seed,
                policy_rng,
                attack_rng,
            ),
            AttackSpec::RandAct { prob } => baseline_episode(
                state,
                ObsTamper::None,
                ActTamper::Uniform(prob),
                env_seed,
                policy_rng,
                attack_rng,
            ),
            AttackSpec::RandCombined { sigma, prob } => baseline_episode(
                state,
                ObsTamper::Noise(sigma),
                ActTamper::Uniform(prob),
                env_seed,
                policy_rng,
                attack_rng,
            ),
            AttackSpec::Fgsm { eps } => baseline_episode(
                state,
                ObsTamper::Gradient(eps),
                ActTamper::None,
                env_seed,
                policy_rng,
                attack_rng,
            ),
            AttackSpec::ValueMin { prob } => baseline_episode(
                state,
                ObsTamper::None,
                ActTamper::WorstCase(prob),
                env_seed,
                policy_rng,
                attack_rng,
            ),
        },
        CellTask::Perturb(p) => {
            let perturbed = apply_perturbation(spec, p, perturb_rng)?;
            policy_episode(state, perturbed.build()?, env_seed, policy_rng, attack_rng)
        }
    }
}

fn run_cell(
    state: &TrainState,
    task: CellTask<'_>,
    episodes_per_seed: usize,
    eval_seeds: &[u64],
    cell_index: u64,
) -> Result<EvalCell> {
    let label = match task {
        CellTask::Attack(a) => a.name().to_string(),
        CellTask::Perturb(p) => p.label(),
    };
    let mut per_seed_success = Vec::with_capacity(eval_seeds.len());
    let mut per_seed_return = Vec::with_capacity(eval_seeds.len());
    for &eval_seed in eval_seeds {
        let mut env_rng = stream(eval_seed, "eval-env", cell_index);
        let mut policy_rng = stream(eval_seed, "eval-policy", cell_index);
        let mut attack_rng = stream(eval_seed, "eval-attack", cell_index);
        let mut partition_rng = stream(eval_seed, "eval-partition", cell_index);
        let mut perturb_rng = stream(eval_seed, "eval-perturb", cell_index);
        let mut hits = 0usize;
        let mut returns = 0.0;
        for _ in 0..episodes_per_seed {
            let env_seed = env_rng.gen::<u64>();
            let (success, episode_return) = run_eval_episode(
                state,
                task,
                env_seed,
                &mut policy_rng,
                &mut attack_rng,
                &mut partition_rng,
                &mut perturb_rng,
            )?;
            hits += usize::from(success);
            returns += episode_return;
        }
        per_seed_success.push(100.0 * hits as f64 / episodes_per_seed as f64);
        per_seed_return.push(returns / episodes_per_seed as f64);
    }
    let (mean_success, std_success) = mean_and_sample_std(&per_seed_success);
    let (mean_return, _) = mean_and_sample_std(&per_seed_return);
    Ok(EvalCell {
        label,
        mean_success,
        std_success,
        mean_return,
        episodes: episodes_per_seed * eval_seeds.len(),
    })
}

/// Evaluate a trained state over the full cell matrix: one cell per attack,
/// then one per perturbation, each averaged over the evaluation seeds at
/// epsilon 0. Interaction-breaking cells sample a fresh partition every
/// episode and default to a firing probability of `1/k_max`. The report is
/// a pure function of (state, config).
pub fn run_eval(state: &TrainState, config: &ExperimentConfig) -> Result<EvalReport> {
    config.validate()?;
    if config.eval_seeds.contains(&state.config.seed) {
        return Err(CoreError::Config(format!(
            "evaluation seeds overlap the checkpoint's training seed {}",
            state.config.seed
        )));
    }
    if config.train.env != state.config.env {
        return Err(CoreError::Config(
            "evaluation config names a different environment than the checkpoint".into(),
        ));
    }
    let mut cells = Vec::new();
    let mut cell_index = 0u64;
    for attack in &config.eval_attacks {
        cells.push(run_cell(
            state,
            CellTask::Attack(attack),
            config.episodes_per_cell,
            &config.eval_seeds,
            cell_index,
        )?);
        cell_index += 1;
    }
    for p in &config.perturbations {
        cells.push(run_cell(
            state,
            CellTask::Perturb(p),
            config.episodes_per_cell,
            &config.eval_seeds,
            cell_index,
        )?);
        cell_index += 1;
    }
    Ok(EvalReport { cells })
}

// ── MI dump ──────────────────────────────────────────────────────────────

/// Per-agent slice of an MI dump. `before` and `after` are score vectors
/// over observation dimensions against the agent's opposite group,
/// normalized jointly across agents so the global maximum is exactly 1
/// unless everything is zero.
#[derive(Clone, Debug, Serialize)]
pub struct MiDumpAgent {
    pub agent: usize,
    /// Layout label per observation dimension.
    pub labels: Vec<DimLabel>,
    /// Score-table MI before masking.
    pub before: Vec<f64>,
    /// Re-estimated MI on the observations the masked policy actually saw.
    pub after: Vec<f64>,
    /// Dimensions the mask selects for this agent, ascending.
    pub selected: Vec<usize>,
    /// Dimensions whose layout label encodes a member of the opposite
    /// group, ascending.
    pub truth: Vec<usize>,
}

/// Table-style dump of the masking evidence for one partition, with pooled
/// precision and recall of the selected dimensions against the layout
/// ground truth.
#[derive(Clone, Debug, Serialize)]
pub struct MiDump {
    pub partition: GroupPartition,
    pub agents: Vec<MiDumpAgent>,
    pub precision: f64,
    pub recall: f64,
}

fn normalize_joint(rows: &mut [Vec<f64>]) {
    let max = rows.iter().flatten().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for row in rows.iter_mut() {
            for v in row {
                *v /= max;
            }
        }
    }
}

/// Build the masking evidence for one partition: the score-table MI per
/// dimension, the selected mask, a post-mask re-estimate from fresh probe
/// rollouts (scored against the masked observations, so selected dimensions
/// collapse to zero), and the overlap with the layout's ground truth.
pub fn mi_dump(
    state: &TrainState,
    partition: &GroupPartition,
    episodes: usize,
    seed: u64,
) -> Result<MiDump> {
    let spec = &state.config.env;
    let n = spec.n_agents();
    if partition.n_agents() != n {
        return Err(CoreError::InvalidArgument(format!(
            "partition over {} agents against an environment with {n}",
            partition.n_agents()
        )));
    }
    if partition.is_pass_through() {
        return Err(CoreError::InvalidArgument(
            "pass-through partition selects no dimensions".into(),
        ));
    }
    if episodes == 0 {
        return Err(CoreError::InvalidArgument(
            "the post-mask estimate needs at least one probe episode".into(),
        ));
    }

    let l = mask_budget(state.config.l_per_g2, partition.g2.len(), spec.obs_dim());
    let selected = select_mask(&state.score_table, partition, l)?;

    let mut env_rng = stream(seed, "mi-dump-env", 0);
    let mut policy_rng = stream(seed, "mi-dump-policy", 0);
    let mut attack_rng = stream(seed, "mi-dump-attack", 0);
    let mut traces = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut env = InducedEnv::wrap(spec.build()?, selected.clone(), None)?;
        traces.push(rollout_episode(
            &mut env,
            &state.policy,
            MI_DUMP_EPSILON,
            state.config.replay_action,
            env_rng.gen(),
            &mut policy_rng,
            &mut attack_rng,
        )?);
    }
    let refs: Vec<&EpisodeTrace> = traces.iter().collect();
    let after_table = refresh_score_table_observed(
        &state.obs_model,
        &refs,
        state.config.mi_batch_limit,
        state.episodes,
        &mut stream(seed, "mi-dump-score", 0),
    )?;

    let opposite = |i: usize| {
        if partition.g1.contains(&i) {
            &partition.g2
        } else {
            &partition.g1
        }
    };
    let mut before: Vec<Vec<f64>> = (0..n)
        .map(|i| state.score_table.aggregate(i, opposite(i)))
        .collect();
    let mut after: Vec<Vec<f64>> = (0..n)
        .map(|i| after_table.aggregate(i, opposite(i)))
        .collect();
    normalize_joint(&mut before);
    normalize_joint(&mut after);

    let mut agents = Vec::with_capacity(n);
    let (mut overlap, mut selected_total, mut truth_total) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let layout = spec.obs_layout(i);
        let truth = layout.encodes_agents(opposite(i));
        let chosen = &selected.dims[i];
        overlap += chosen.intersection(&truth).count();
        selected_total += chosen.len();
        truth_total += truth.len();
        agents.push(MiDumpAgent {
            agent: i,
            labels: layout.labels.clone(),
            before: std::mem::take(&mut before[i]),
            after: std::mem::take(&mut after[i]),
            selected: chosen.iter().copied().collect(),
            truth: truth.into_iter().collect(),
        });
    }
    let precision = if selected_total == 0 {
        0.0
    } else {
        overlap as f64 / selected_total as f64
    };
    let recall = if truth_total == 0 {
        0.0
    } else {
        overlap as f64 / truth_total as f64
    };
    Ok(MiDump {
        partition: partition.clone(),
        agents,
        precision,
        recall,
    })
}

// ── redundancy probe ─────────────────────────────────────────────────────

/// How far the group's joint influence on an observer differs from the sum
/// of its members' individual influences, for every observer outside the
/// group.
///
/// The probe rolls fresh clean episodes, trains a group-conditioned
/// reconstruction model on them, and refreshes a pairwise score table from
/// the checkpoint's own model on the same traces, so the joint and summed
/// estimates see identical data. One report per observer in `g1`.
pub fn redundancy_probe(
    state: &TrainState,
    partition: &GroupPartition,
    episodes: usize,
    train_steps: usize,
    seed: u64,
) -> Result<Vec<(usize, RedundancyReport)>> {
    let spec = &state.config.env;
    let n = spec.n_agents();
    if partition.n_agents() != n {
        return Err(CoreError::InvalidArgument(format!(
            "partition over {} agents against an environment with {n}",
            partition.n_agents()
        )));
    }
    if partition.is_pass_through() {
        return Err(CoreError::InvalidArgument(
            "pass-through partition leaves no group to probe".into(),
        ));
    }
    if episodes == 0 || train_steps == 0 {
        return Err(CoreError::InvalidArgument(
            "the redundancy probe needs at least one episode and one training step".into(),
        ));
    }
    let actors: Vec<usize> = partition.g2.iter().copied().collect();

    let mut env_rng = stream(seed, "redundancy-env", 0);
    let mut policy_rng = stream(seed, "redundancy-policy", 0);
    let mut attack_rng = stream(seed, "redundancy-attack", 0);
    let mut traces = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut env = InducedEnv::identity(spec.build()?);
        traces.push(rollout_episode(
            &mut env,
            &state.policy,
            MI_DUMP_EPSILON,
            state.config.replay_action,
            env_rng.gen(),
            &mut policy_rng,
            &mut attack_rng,
        )?);
    }
    let refs: Vec<&EpisodeTrace> = traces.iter().collect();

    let mut model = ObsReconModel::init(
        n,
        spec.n_actions(),
        state.config.agent_hidden,
        spec.obs_dim(),
        actors.len(),
        &mut stream(seed, "redundancy-model", 0),
    )?;
    let mut opt = OptimizerState::new(state.config.mi_lr, &model.params);
    let mut batch_rng = stream(seed, "redundancy-batch", 0);
    let observers: Vec<usize> = partition.g1.iter().copied().collect();
    for step in 0..train_steps {
        let observer = observers[step % observers.len()];
        let batch = MiBatch::from_traces(
            &refs,
            observer,
            &actors,
            state.config.mi_batch_limit,
            &mut batch_rng,
        )?;
        train_obs_model(&mut model, &mut opt, &batch)?;
    }

    let table = refresh_score_table(
        &state.obs_model,
        &refs,
        state.config.mi_batch_limit,
        state.episodes,
        &mut stream(seed, "redundancy-score", 0),
    )?;

    let mut reports = Vec::with_capacity(observers.len());
    for &observer in &observers {
        let batch = MiBatch::from_traces(
            &refs,
            observer,
            &actors,
            state.config.mi_batch_limit,
            &mut batch_rng,
        )?;
        reports.push((observer, redundancy_estimate(&model, &batch, &table)?));
    }
    Ok(reports)
}

// ── selfcheck ────────────────────────────────────────────────────────────

/// Outcome of the built-in diagnostics: finite-difference gradient errors
/// for all four networks, the exploration and firing-probability schedule
/// checks, and a masked-rollout equivalence probe.
#[derive(Clone, Debug, Serialize)]
pub struct SelfcheckReport {
    pub agent_grad_err: f64,
    pub mixer_grad_err: f64,
    pub obs_model_grad_err: f64,
    pub action_model_grad_err: f64,
    pub epsilon_schedule_ok: bool,
    pub firing_cap_update_ok: bool,
    pub firing_draw_ok: bool,
    pub equivalence: EquivalenceReport,
}

impl SelfcheckReport {
    /// Largest relative gradient error the check accepts.
    pub const GRAD_TOLERANCE: f64 = 1e-4;

    pub fn passed(&self) -> bool {
        self.agent_grad_err < Self::GRAD_TOLERANCE
            && self.mixer_grad_err < Self::GRAD_TOLERANCE
            && self.obs_model_grad_err < Self::GRAD_TOLERANCE
            && self.action_model_grad_err < Self::GRAD_TOLERANCE
            && self.epsilon_schedule_ok
            && self.firing_cap_update_ok
            && self.firing_draw_ok
            && self.equivalence.is_clean()
    }
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| standard_normal(rng)).collect(),
    )
}

/// Max relative error between backprop and central differences for the
/// recurrent agent network, unrolled two steps so the hidden-state path is
/// exercised.
fn agent_gradient_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (obs_dim, n_actions, n_agents, hidden) = (5, 4, 3, 6);
    let arch = agent_architecture(obs_dim, n_actions, n_agents, hidden);
    let input_dim = obs_dim + n_actions + n_agents;
    let mut params = ModelParams::init(arch, rng)?;
    let x1 = random_tensor(1, input_dim, rng);
    let x2 = random_tensor(1, input_dim, rng);
    let graph = |p: &ModelParams, tape: &Tape| -> Result<_> {
        let leaves = p.leaves(tape);
        let h0 = tape.leaf_owned(Tensor::zeros(1, hidden));
        let (o1, h1) = forward_on_tape(tape, &p.arch, &leaves, tape.leaf(&x1), Some(h0))?;
        let (o2, _) = forward_on_tape(tape, &p.arch, &leaves, tape.leaf(&x2), h1)?;
        let both = tape.add(
            tape.add(tape.sum(tape.mul_elem(o1, o1)), tape.sum(o1)),
            tape.add(tape.sum(tape.mul_elem(o2, o2)), tape.sum(o2)),
        );
        Ok((both, leaves))
    };
    let analytic = {
        let tape = Tape::new();
        let (loss, leaves) = graph(&params, &tape)?;
        collect_grads(&tape.backward(loss), &leaves)
    };
    let numeric = numeric_gradient(
        &mut params,
        |p| {
            let tape = Tape::new();
            let (loss, _) = graph(p, &tape).expect("agent graph");
            tape.value(loss).get(0, 0)
        },
        1e-5,
    );
    Ok(max_rel_error(&analytic, &numeric))
}

/// Max relative error between backprop and central differences across all
/// four hypernetworks of the monotonic mixer.
fn mixer_gradient_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n_agents, state_dim, embed, hyper_hidden, batch) = (3, 5, 4, 6, 4);
    let mixer = MixerParams::init(n_agents, state_dim, embed, hyper_hidden, rng)?;
    let q = random_tensor(batch, n_agents, rng);
    let state = random_tensor(batch, state_dim, rng);
    let loss_of = |m: &MixerParams| -> Result<f64> {
        let tape = Tape::new();
        let leaves = m.leaves(&tape);
        let out = m.mix_vars(&tape, &leaves, tape.leaf(&q), tape.leaf(&state))?;
        let loss = tape.add(tape.sum(tape.mul_elem(out, out)), tape.sum(out));
        Ok(tape.value(loss).get(0, 0))
    };

    let prefixes = ["w1/", "b1/", "w2/", "b2/"];
    let component = |m: &MixerParams, idx: usize| -> ModelParams {
        match idx {
            0 => m.hyper_w1.clone(),
            1 => m.hyper_b1.clone(),
            2 => m.hyper_w2.clone(),
            _ => m.hyper_b2.clone(),
        }
    };
    let install = |m: &mut MixerParams, idx: usize, p: ModelParams| match idx {
        0 => m.hyper_w1 = p,
        1 => m.hyper_b1 = p,
        2 => m.hyper_w2 = p,
        _ => m.hyper_b2 = p,
    };

    let analytic = {
        let tape = Tape::new();
        let leaves = mixer.leaves(&tape);
        let out = mixer.mix_vars(&tape, &leaves, tape.leaf(&q), tape.leaf(&state))?;
        let loss = tape.add(tape.sum(tape.mul_elem(out, out)), tape.sum(out));
        let grads = tape.backward(loss);
        let mut all = std::collections::BTreeMap::new();
        for (idx, part) in [&leaves.w1, &leaves.b1, &leaves.w2, &leaves.b2]
            .into_iter()
            .enumerate()
        {
            for (name, grad) in collect_grads(&grads, part) {
                all.insert(format!("{}{name}", prefixes[idx]), grad);
            }
        }
        all
    };

    let h = 1e-5;
    let mut numeric = std::collections::BTreeMap::new();
    for idx in 0..prefixes.len() {
        let names: Vec<String> = component(&mixer, idx).names().cloned().collect();
        for name in names {
            let base = component(&mixer, idx);
            let t = base.get(&name)?;
            let (rows, cols) = (t.rows(), t.cols());
            let mut grad = Tensor::zeros(rows, cols);
            for e in 0..rows * cols {
                let probe = |delta: f64| -> Result<f64> {
                    let mut shifted = mixer.clone();
                    let mut part = component(&mixer, idx);
                    part.get_mut(&name)?.data_mut()[e] += delta;
                    install(&mut shifted, idx, part);
                    loss_of(&shifted)
                };
                grad.data_mut()[e] = (probe(h)? - probe(-h)?) / (2.0 * h);
            }
            numeric.insert(format!("{}{name}", prefixes[idx]), grad);
        }
    }
    Ok(max_rel_error(&analytic, &numeric))
}

/// Max relative error for the conditional-Gaussian observation model under
/// its clamped negative-log-likelihood loss.
fn obs_model_gradient_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n_agents, n_actions, hidden, obs_dim, batch) = (3, 4, 6, 5, 6);
    let model = ObsReconModel::init(n_agents, n_actions, hidden, obs_dim, 1, rng)?;
    let input_dim = model.input_dim();
    let mut params = model.params;
    let inputs = random_tensor(batch, input_dim, rng);
    let targets = random_tensor(batch, obs_dim, rng);
    let graph = |p: &ModelParams, tape: &Tape| -> Result<_> {
        let leaves = p.leaves(tape);
        let out = forward_on_tape(tape, &p.arch, &leaves, tape.leaf(&inputs), None)?.0;
        let mu = tape.slice_cols(out, 0, obs_dim);
        let lv = tape.clamp(tape.slice_cols(out, obs_dim, obs_dim), LOGVAR_MIN, LOGVAR_MAX);
        let diff = tape.sub(mu, tape.leaf(&targets));
        let sq = tape.mul_elem(diff, diff);
        let weighted = tape.mul_elem(sq, tape.exp(tape.neg(lv)));
        let loss = tape.scale(tape.sum(tape.add(lv, weighted)), 0.5 / batch as f64);
        Ok((loss, leaves))
    };
    let analytic = {
        let tape = Tape::new();
        let (loss, leaves) = graph(&params, &tape)?;
        collect_grads(&tape.backward(loss), &leaves)
    };
    let numeric = numeric_gradient(
        &mut params,
        |p| {
            let tape = Tape::new();
            let (loss, _) = graph(p, &tape).expect("observation model graph");
            tape.value(loss).get(0, 0)
        },
        1e-5,
    );
    Ok(max_rel_error(&analytic, &numeric))
}

/// Max relative error for the action-reconstruction model under its masked
/// cross-entropy loss.
fn action_model_gradient_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n_agents, n_actions, hidden, batch) = (3usize, 4usize, 6usize, 6usize);
    let model = ActionReconModel::init(n_agents, n_actions, hidden, rng)?;
    let input_dim = model.input_dim();
    let mut params = model.params;
    let inputs = random_tensor(batch, input_dim, rng);
    let targets: Vec<Vec<usize>> = (0..n_agents)
        .map(|_| (0..batch).map(|_| rng.gen_range(0..n_actions)).collect())
        .collect();
    let masks: Vec<Vec<f64>> = (0..n_agents)
        .map(|j| {
            (0..batch)
                .map(|b| if (b + j) % 3 == 0 { 0.0 } else { 1.0 })
                .collect()
        })
        .collect();
    let n_targets: usize = masks.iter().flatten().filter(|&&m| m > 0.0).count();
    let graph = |p: &ModelParams, tape: &Tape| -> Result<_> {
        let leaves = p.leaves(tape);
        let logits = forward_on_tape(tape, &p.arch, &leaves, tape.leaf(&inputs), None)?.0;
        let mut total = None;
        for j in 0..n_agents {
            let block = tape.slice_cols(logits, j * n_actions, n_actions);
            let lsm = tape.log_softmax_rows(block);
            let picked = tape.gather_cols(lsm, &targets[j]);
            let mask = Tensor::from_vec(batch, 1, masks[j].clone());
            let masked = tape.mul_elem(picked, tape.leaf_owned(mask));
            let s = tape.sum(masked);
            total = Some(match total {
                Some(acc) => tape.add(acc, s),
                None => s,
            });
        }
        let sum = total.expect("at least one agent");
        let loss = tape.scale(tape.neg(sum), 1.0 / n_targets as f64);
        Ok((loss, leaves))
    };
    let analytic = {
        let tape = Tape::new();
        let (loss, leaves) = graph(&params, &tape)?;
        collect_grads(&tape.backward(loss), &leaves)
    };
    let numeric = numeric_gradient(
        &mut params,
        |p| {
            let tape = Tape::new();
            let (loss, _) = graph(p, &tape).expect("action model graph");
            tape.value(loss).get(0, 0)
        },
        1e-5,
    );
    Ok(max_rel_error(&analytic, &numeric))
}

/// Endpoint and monotonicity checks on the exploration schedule.
fn epsilon_schedule_ok() -> bool {
    let sched = EpsilonSchedule::standard();
    if sched.validate().is_err() {
        return false;
    }
    if sched.value(0) != sched.start || sched.value(sched.anneal_steps) != sched.end {
        return false;
    }
    if sched.value(10 * sched.anneal_steps) != sched.end {
        return false;
    }
    let mut prev = f64::INFINITY;
    for step in (0..=sched.anneal_steps).step_by(sched.anneal_steps / 20) {
        let v = sched.value(step);
        if v > prev || !(sched.end..=sched.start).contains(&v) {
            return false;
        }
        prev = v;
    }
    true
}

/// Scripted trace through the firing-probability cap: no growth while the
/// window is filling, geometric growth once the windowed success rate
/// reaches the threshold, and saturation at 1.
fn firing_cap_update_ok() -> Result<bool> {
    let mut state = AttackProbState::with_parameters(0.25, 2.0, 0.6, 4)?;
    let mut expected = Vec::new();
    // Window filling: the cap must hold at 0.25 regardless of outcomes.
    for s in [true, true, false] {
        state.update_pact(s);
        expected.push((state.p_act_max, 0.25));
    }
    // Window full at rate 0.75 >= 0.6: grow by alpha each episode.
    state.update_pact(true);
    expected.push((state.p_act_max, 0.5));
    state.update_pact(true);
    expected.push((state.p_act_max, 1.0));
    // Saturated: min(1, alpha * cap) pins the cap at 1.
    state.update_pact(true);
    expected.push((state.p_act_max, 1.0));
    // A cold streak drops the windowed rate below the threshold and the
    // cap must freeze rather than shrink.
    for _ in 0..3 {
        state.update_pact(false);
    }
    state.update_pact(true);
    expected.push((state.p_act_max, 1.0));
    Ok(expected.iter().all(|(got, want)| got == want))
}

/// Empirical mean of the per-episode firing draw against the midpoint of
/// its uniform support, plus the degenerate endpoints.
fn firing_draw_ok(rng: &mut ChaCha8Rng) -> Result<bool> {
    let disabled = AttackProbState::new(0);
    if disabled.sample_pact(0, rng) != 0.0 {
        return Ok(false);
    }
    let mut floor = AttackProbState::with_parameters(0.1, 2.0, 0.6, 4)?;
    floor.p_act_max = 0.2;
    if floor.sample_pact_from(0.5, rng) != 0.5 {
        return Ok(false);
    }
    let k_max = 4usize;
    let state = AttackProbState::with_parameters(0.8, 2.0, 0.6, 4)?;
    let draws = 10_000;
    let mean: f64 = (0..draws)
        .map(|_| state.sample_pact(k_max, rng))
        .sum::<f64>()
        / draws as f64;
    let midpoint = (1.0 / k_max as f64 + state.p_act_max) / 2.0;
    Ok((mean - midpoint).abs() < 0.01)
}

/// Run every built-in diagnostic: finite-difference gradient checks on the
/// agent, mixer, observation, and action networks, the schedule checks, and
/// a wrapper-vs-direct-composition equivalence probe on `spec` under a
/// nonempty mask and a randomly initialized action attack.
pub fn selfcheck(spec: &EnvSpec, seed: u64) -> Result<SelfcheckReport> {
    spec.validate()?;
    let mut rng = stream(seed, "selfcheck-grad", 0);
    let agent_grad_err = agent_gradient_error(&mut rng)?;
    let mixer_grad_err = mixer_gradient_error(&mut rng)?;
    let obs_model_grad_err = obs_model_gradient_error(&mut rng)?;
    let action_model_grad_err = action_model_gradient_error(&mut rng)?;

    let epsilon_ok = epsilon_schedule_ok();
    let cap_ok = firing_cap_update_ok()?;
    let draw_ok = firing_draw_ok(&mut stream(seed, "selfcheck-draw", 0))?;

    let n = spec.n_agents();
    let hidden = 8;
    let mut init_rng = stream(seed, "selfcheck-probe", 0);
    let policy = QmixParams::with_sizes(
        n,
        spec.n_actions(),
        spec.obs_dim(),
        spec.state_dim(),
        hidden,
        4,
        4,
        &mut init_rng,
    )?;
    let mut mask = MaskSet::empty(n);
    for i in 0..n {
        mask.dims[i].insert(i % spec.obs_dim());
    }
    let action_model = ActionReconModel::init(n, spec.n_actions(), hidden, &mut init_rng)?;
    let partition = GroupPartition::new(n, BTreeSet::from([0]))?;
    let attack = ActionAttack {
        model: &action_model,
        partition,
        p_act: 0.5,
    };
    let seeds: Vec<u64> = (0..4).map(|i| seed.wrapping_add(i)).collect();
    let equivalence = equivalence_probe(spec, &mask, Some(attack), &policy, 0.2, &seeds)?;

    Ok(SelfcheckReport {
        agent_grad_err,
        mixer_grad_err,
        obs_model_grad_err,
        action_model_grad_err,
        epsilon_schedule_ok: epsilon_ok,
        firing_cap_update_ok: cap_ok,
        firing_draw_ok: draw_ok,
        equivalence,
    })
}

// ── ablations ────────────────────────────────────────────────────────────

/// The documented single-component ablations. Serde rejects anything
/// outside this set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AblationVariant {
    /// Freeze the firing probability at `1/k_max` instead of adapting it.
    FixedProb,
    /// Select masked dimensions uniformly at random instead of by MI score.
    RandomMask,
    /// Run the action attack only.
    NoObsAttack,
    /// Run the observation attack only.
    NoActionAttack,
    /// Additive Gaussian noise on the selected dimensions instead of
    /// zero-forcing.
    GaussianObs { sigma: f64 },
    /// Gradient-sign perturbation on the selected dimensions instead of
    /// zero-forcing.
    FgsmObs { eps: f64 },
    /// One run per attacked-group size cap.
    KSweep { values: Vec<usize> },
    /// One run per mask budget.
    LSweep { values: Vec<usize> },
    /// One run per lower endpoint of the firing-probability draw.
    PactMinSweep { values: Vec<f64> },
}

/// Expand an ablation variant into labelled configs, each differing from
/// the base in exactly one field. Every emitted config is validated, so an
/// inapplicable combination (a sweep value over the group-size limit, a
/// fixed probability on top of a configured minimum) is rejected here.
pub fn ablation_configs(
    base: &TrainConfig,
    variant: &AblationVariant,
) -> Result<Vec<(String, TrainConfig)>> {
    base.validate()?;
    let mut out: Vec<(String, TrainConfig)> = Vec::new();
    let mut push = |label: String, config: TrainConfig| {
        out.push((label, config));
    };
    match variant {
        AblationVariant::FixedProb => {
            if base.k_max == 0 {
                return Err(CoreError::InvalidArgument(
                    "a fixed firing probability needs a positive group-size cap".into(),
                ));
            }
            let mut c = base.clone();
            c.fixed_p_act = Some(1.0 / base.k_max as f64);
            push("fixed-prob".into(), c);
        }
        AblationVariant::RandomMask => {
            let mut c = base.clone();
            c.random_mask = true;
            push("random-mask".into(), c);
        }
        AblationVariant::NoObsAttack => {
            let mut c = base.clone();
            c.obs_attack = false;
            push("no-obs-attack".into(), c);
        }
        AblationVariant::NoActionAttack => {
            let mut c = base.clone();
            c.action_attack = false;
            push("no-action-attack".into(), c);
        }
        AblationVariant::GaussianObs { sigma } => {
            let mut c = base.clone();
            c.obs_style = ObsStyle::Gaussian { sigma: *sigma };
            push("gaussian-obs".into(), c);
        }
        AblationVariant::FgsmObs { eps } => {
            let mut c = base.clone();
            c.obs_style = ObsStyle::Fgsm { eps: *eps };
            push("fgsm-obs".into(), c);
        }
        AblationVariant::KSweep { values } => {
            for &k in values {
                let mut c = base.clone();
                c.k_max = k;
                push(format!("k-{k}"), c);
            }
        }
        AblationVariant::LSweep { values } => {
            for &l in values {
                let mut c = base.clone();
                c.l_per_g2 = l;
                push(format!("l-{l}"), c);
            }
        }
        AblationVariant::PactMinSweep { values } => {
            for &p in values {
                let mut c = base.clone();
                c.p_act_min = Some(p);
                push(format!("pact-min-{p}"), c);
            }
        }
    }
    if out.is_empty() {
        return Err(CoreError::InvalidArgument("empty sweep".into()));
    }
    for (label, config) in &out {
        config
            .validate()
            .map_err(|e| CoreError::Config(format!("variant {label}: {e}")))?;
    }
    Ok(out)
}

// ── orchestration ────────────────────────────────────────────────────────

/// Run the experiment's training leg: create the output directory, echo the
/// config to `config.json`, stream metrics to `metrics.csv`, and keep
/// `checkpoint.bin` current with every snapshot (including the final one,
/// which on an aborted run holds the diagnostic state).
pub fn run_training(config: &ExperimentConfig) -> Result<TrainRun> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;
    let echo = serde_json::to_string_pretty(config)
        .map_err(|e| CoreError::Config(format!("cannot serialize config: {e}")))?;
    fs::write(config.out_dir.join("config.json"), echo + "\n")?;
    let mut sink = CsvSink::create(&config.out_dir)?;
    train(&config.train, &mut sink)
}
