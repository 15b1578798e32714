//! Toy cooperative environments behind one interface.
//!
//! Two tasks are provided. [`forage`] is a level-based foraging gridworld:
//! agents carry levels, food items carry levels, and a food is collected when
//! the levels of the agents loading next to it sum to at least the food
//! level. [`skirmish`] is a small two-team combat task against a scripted
//! opponent with focus-fire-nearest behavior.
//!
//! Both are fully deterministic after `reset(seed)`: all placement
//! randomness happens at reset, and `step` is a pure function of the current
//! state and the joint action. Observations are egocentric with a square
//! sight window; every observation dimension carries exactly one
//! [`DimLabel`], which is what the MI-guided attacker is scored against.

pub mod forage;
pub mod skirmish;

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use forage::{ForageEnv, ForageSpec};
pub use skirmish::{SkirmishEnv, SkirmishSpec};

/// One action index per agent, each legal under the agent's availability
/// mask at the time of the step.
pub type JointAction = Vec<usize>;

/// Per-agent observation vectors, all of the same width.
#[derive(Clone, Debug, PartialEq)]
pub struct JointObservation {
    agents: Vec<Vec<f64>>,
}

impl JointObservation {
    pub fn new(agents: Vec<Vec<f64>>) -> Self {
        debug_assert!(agents.windows(2).all(|w| w[0].len() == w[1].len()));
        JointObservation { agents }
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        &self.agents[i]
    }

    pub fn agent_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.agents[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.agents.iter()
    }
}

/// What one step returned: the next joint observation, the shared reward,
/// termination and success flags, the next availability masks, and the next
/// global state vector.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub obs: JointObservation,
    pub reward: f64,
    pub done: bool,
    /// True once the task objective is met (all food collected, or all
    /// opponents defeated). Only meaningful when `done` is set.
    pub success: bool,
    pub avail: Vec<Vec<bool>>,
    pub state: Vec<f64>,
}

/// Label of a single observation dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DimLabel {
    /// The observing agent's own features.
    SelfFeature,
    /// Move-availability features derived from the map geometry.
    Movement,
    /// A block describing teammate `j` (absolute agent index).
    EncodesAgent(usize),
    /// A block describing scripted opponent `e`.
    EncodesEnemy(usize),
    /// A block describing food item `e`.
    EncodesFood(usize),
}

/// Per-agent labeling of observation dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsLayout {
    pub labels: Vec<DimLabel>,
}

impl ObsLayout {
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    /// Dimensions whose block describes any teammate in `group`.
    pub fn encodes_agents(&self, group: &BTreeSet<usize>) -> BTreeSet<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(d, l)| match l {
                DimLabel::EncodesAgent(j) if group.contains(j) => Some(d),
                _ => None,
            })
            .collect()
    }

    pub fn dims_labeled(&self, label: DimLabel) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(d, l)| (*l == label).then_some(d))
            .collect()
    }
}

/// Environment family plus its parameters; the JSON-facing description of a
/// task instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Forage(ForageSpec),
    Skirmish(SkirmishSpec),
}

impl EnvSpec {
    pub fn n_agents(&self) -> usize {
        match self {
            EnvSpec::Forage(s) => s.agent_levels.len(),
            EnvSpec::Skirmish(s) => s.n_allies,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            EnvSpec::Forage(_) => forage::N_ACTIONS,
            EnvSpec::Skirmish(s) => skirmish::FIXED_ACTIONS + s.n_enemies,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            EnvSpec::Forage(s) => s.obs_dim(),
            EnvSpec::Skirmish(s) => s.obs_dim(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            EnvSpec::Forage(s) => s.state_dim(),
            EnvSpec::Skirmish(s) => s.state_dim(),
        }
    }

    pub fn step_limit(&self) -> usize {
        match self {
            EnvSpec::Forage(s) => s.step_limit,
            EnvSpec::Skirmish(s) => s.step_limit,
        }
    }

    pub fn obs_layout(&self, agent: usize) -> ObsLayout {
        match self {
            EnvSpec::Forage(s) => s.obs_layout(agent),
            EnvSpec::Skirmish(s) => s.obs_layout(agent),
        }
    }

    pub fn disabled_agents(&self) -> &BTreeSet<usize> {
        match self {
            EnvSpec::Forage(s) => &s.disabled_agents,
            EnvSpec::Skirmish(s) => &s.disabled_agents,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnvSpec::Forage(s) => s.validate(),
            EnvSpec::Skirmish(s) => s.validate(),
        }
    }

    /// Instantiate the environment. The instance is inert until `reset`.
    pub fn build(&self) -> Result<Env> {
        self.validate()?;
        Ok(match self {
            EnvSpec::Forage(s) => Env::Forage(ForageEnv::new(s.clone())),
            EnvSpec::Skirmish(s) => Env::Skirmish(SkirmishEnv::new(s.clone())),
        })
    }
}

/// A live environment instance.
#[derive(Clone, Debug)]
pub enum Env {
    Forage(ForageEnv),
    Skirmish(SkirmishEnv),
}

macro_rules! dispatch {
    ($self:ident, $env:ident => $body:expr) => {
        match $self {
            Env::Forage($env) => $body,
            Env::Skirmish($env) => $body,
        }
    };
}

impl Env {
    pub fn spec(&self) -> EnvSpec {
        match self {
            Env::Forage(e) => EnvSpec::Forage(e.spec.clone()),
            Env::Skirmish(e) => EnvSpec::Skirmish(e.spec.clone()),
        }
    }

    pub fn n_agents(&self) -> usize {
        dispatch!(self, e => e.n_agents())
    }

    pub fn n_actions(&self) -> usize {
        dispatch!(self, e => e.n_actions())
    }

    pub fn obs_dim(&self) -> usize {
        dispatch!(self, e => e.obs_dim())
    }

    pub fn state_dim(&self) -> usize {
        dispatch!(self, e => e.state_dim())
    }

    /// Seeded placement; returns the initial joint observation.
    pub fn reset(&mut self, seed: u64) -> Result<JointObservation> {
        dispatch!(self, e => e.reset(seed))
    }

    pub fn step(&mut self, actions: &JointAction) -> Result<StepResult> {
        dispatch!(self, e => e.step(actions))
    }

    pub fn available_actions(&self, agent: usize) -> Vec<bool> {
        dispatch!(self, e => e.available_actions(agent))
    }

    pub fn all_available_actions(&self) -> Vec<Vec<bool>> {
        (0..self.n_agents()).map(|i| self.available_actions(i)).collect()
    }

    pub fn observations(&self) -> JointObservation {
        dispatch!(self, e => e.observations())
    }

    pub fn state_vector(&self) -> Vec<f64> {
        dispatch!(self, e => e.state_vector())
    }

    pub fn time(&self) -> usize {
        dispatch!(self, e => e.time())
    }

    pub fn done(&self) -> bool {
        dispatch!(self, e => e.done())
    }

    pub fn success(&self) -> bool {
        dispatch!(self, e => e.success())
    }
}

/// A held-out robustness perturbation applied to a spec before building the
/// environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    /// No change; the natural condition.
    None,
    /// Mark `count` seeded-random agents as permanently inactive: their
    /// executed action is always no-op and they expose only no-op as
    /// available.
    Disable { count: usize },
    /// Scale initial ally health by `1 - percent/100`. Combat task only.
    HealthReduction { percent: f64 },
}

impl PerturbationSpec {
    pub fn label(&self) -> String {
        match self {
            PerturbationSpec::None => "natural".into(),
            PerturbationSpec::Disable { count } => format!("dis-{count}"),
            PerturbationSpec::HealthReduction { percent } => format!("hp-{percent:.0}"),
        }
    }
}

/// Produce a perturbed copy of `spec`. Disable picks the affected agents
/// uniformly without replacement from the caller's stream.
pub fn apply_perturbation(
    spec: &EnvSpec,
    p: &PerturbationSpec,
    rng: &mut ChaCha8Rng,
) -> Result<EnvSpec> {
    let mut out = spec.clone();
    match p {
        PerturbationSpec::None => {}
        PerturbationSpec::Disable { count } => {
            let n = spec.n_agents();
            if *count >= n {
                return Err(CoreError::InvalidArgument(format!(
                    "cannot disable {count} of {n} agents"
                )));
            }
            let picked: BTreeSet<usize> =
                rand::seq::index::sample(rng, n, *count).into_iter().collect();
            match &mut out {
                EnvSpec::Forage(s) => s.disabled_agents = picked,
                EnvSpec::Skirmish(s) => s.disabled_agents = picked,
            }
        }
        PerturbationSpec::HealthReduction { percent } => {
            if !(0.0..100.0).contains(percent) {
                return Err(CoreError::InvalidArgument(format!(
                    "health reduction percent {percent} outside [0, 100)"
                )));
            }
            match &mut out {
                EnvSpec::Forage(_) => {
                    return Err(CoreError::InvalidArgument(
                        "health reduction applies only to the combat task".into(),
                    ))
                }
                EnvSpec::Skirmish(s) => s.health_scale = 1.0 - percent / 100.0,
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn disable_zero_is_identity() {
        let spec = EnvSpec::Forage(ForageSpec::standard(3));
        let mut rng = stream(1, "perturb", 0);
        let out = apply_perturbation(&spec, &PerturbationSpec::Disable { count: 0 }, &mut rng)
            .unwrap();
        assert_eq!(out, spec);
    }

    #[test]
    fn disable_marks_exactly_count_agents() {
        let spec = EnvSpec::Forage(ForageSpec::standard(4));
        let mut rng = stream(2, "perturb", 0);
        let out = apply_perturbation(&spec, &PerturbationSpec::Disable { count: 2 }, &mut rng)
            .unwrap();
        assert_eq!(out.disabled_agents().len(), 2);
    }

    #[test]
    fn disable_all_agents_is_rejected() {
        let spec = EnvSpec::Forage(ForageSpec::standard(3));
        let mut rng = stream(3, "perturb", 0);
        assert!(
            apply_perturbation(&spec, &PerturbationSpec::Disable { count: 3 }, &mut rng).is_err()
        );
    }

    #[test]
    fn health_reduction_scales_initial_health() {
        let spec = EnvSpec::Skirmish(SkirmishSpec::standard(3, 3));
        let mut rng = stream(4, "perturb", 0);
        let out = apply_perturbation(
            &spec,
            &PerturbationSpec::HealthReduction { percent: 15.0 },
            &mut rng,
        )
        .unwrap();
        let EnvSpec::Skirmish(s) = &out else { panic!() };
        assert!((s.health_scale - 0.85).abs() < 1e-12);
        let mut env = out.build().unwrap();
        env.reset(7).unwrap();
        let Env::Skirmish(e) = &env else { panic!() };
        assert!((e.ally_health(0) - 0.85 * s.unit_health).abs() < 1e-12);
    }

    #[test]
    fn health_reduction_rejected_for_forage() {
        let spec = EnvSpec::Forage(ForageSpec::standard(3));
        let mut rng = stream(5, "perturb", 0);
        assert!(apply_perturbation(
            &spec,
            &PerturbationSpec::HealthReduction { percent: 10.0 },
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn spec_json_roundtrip_and_unknown_keys_rejected() {
        let spec = EnvSpec::Forage(ForageSpec::standard(3));
        let text = serde_json::to_string(&spec).unwrap();
        let back: EnvSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let bad = text.replace("\"sight\"", "\"sigth\"");
        assert!(serde_json::from_str::<EnvSpec>(&bad).is_err());
    }
}
