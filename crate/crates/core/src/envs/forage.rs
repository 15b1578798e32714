//! Level-based foraging gridworld.
//!
//! Agents and food items live on a rectangular grid. Each carries a level.
//! A food item is collected when the levels of the agents standing in its
//! four-neighborhood and choosing `LOAD` in the same step sum to at least
//! the food level. The shared reward for a collected item is its level
//! divided by the total food level, so a fully cleared episode returns 1.0.
//! The episode succeeds when every item has been collected, and terminates
//! at the step limit otherwise.
//!
//! Step resolution order, all ties broken by ascending index:
//! 1. inactive (disabled) agents are coerced to no-op;
//! 2. loads are evaluated per food item against pre-move positions;
//! 3. moves resolve sequentially; a move into an occupied cell (live food or
//!    another agent's current position) fails and the agent stays;
//! 4. time advances, then termination is checked.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::stream;

use super::{DimLabel, JointAction, JointObservation, ObsLayout, StepResult};

/// Action indices.
pub mod actions {
    pub const NOOP: usize = 0;
    pub const NORTH: usize = 1;
    pub const SOUTH: usize = 2;
    pub const EAST: usize = 3;
    pub const WEST: usize = 4;
    pub const LOAD: usize = 5;
}

pub const N_ACTIONS: usize = 6;

/// `(dx, dy)` for the four moves, indexed by `action - 1`. North decreases
/// `y`.
const MOVES: [(i64, i64); 4] = [(0, -1), (0, 1), (1, 0), (-1, 0)];

/// Parameters of a foraging task instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForageSpec {
    pub width: usize,
    pub height: usize,
    /// One level per agent; the vector length is the team size.
    pub agent_levels: Vec<u32>,
    /// One level per food item.
    pub food_levels: Vec<u32>,
    /// Chebyshev sight radius of the egocentric observation window.
    pub sight: usize,
    pub step_limit: usize,
    /// Agents whose executed action is forced to no-op (robustness
    /// perturbation). Empty by default.
    #[serde(default)]
    pub disabled_agents: BTreeSet<usize>,
}

impl ForageSpec {
    /// The default desk configuration: 9x9 grid, three foods of levels
    /// 1/2/2, sight 3.
    pub fn standard(n_agents: usize) -> Self {
        ForageSpec {
            width: 9,
            height: 9,
            agent_levels: vec![1; n_agents],
            food_levels: vec![1, 2, 2],
            sight: 3,
            step_limit: 50,
            disabled_agents: BTreeSet::new(),
        }
    }

    /// A deliberately small instance used by the learning sanity checks:
    /// 5x5 grid, two foods (one solo, one requiring a pair), near-full
    /// sight.
    pub fn small(n_agents: usize) -> Self {
        ForageSpec {
            width: 5,
            height: 5,
            agent_levels: vec![1; n_agents],
            food_levels: vec![1, 2],
            sight: 4,
            step_limit: 25,
            disabled_agents: BTreeSet::new(),
        }
    }

    /// The large layout from the published experiments: 20x20 grid with six
    /// food items.
    pub fn large(n_agents: usize) -> Self {
        ForageSpec {
            width: 20,
            height: 20,
            agent_levels: vec![1; n_agents],
            food_levels: vec![1, 1, 2, 2, 2, 3],
            sight: 3,
            step_limit: 100,
            disabled_agents: BTreeSet::new(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.agent_levels.len()
    }

    pub fn n_foods(&self) -> usize {
        self.food_levels.len()
    }

    fn max_agent_level(&self) -> f64 {
        f64::from(*self.agent_levels.iter().max().unwrap_or(&1))
    }

    fn max_food_level(&self) -> f64 {
        f64::from(*self.food_levels.iter().max().unwrap_or(&1))
    }

    /// self(3) + 4 per teammate + 4 per food + movement(4).
    pub fn obs_dim(&self) -> usize {
        3 + 4 * (self.n_agents() - 1) + 4 * self.n_foods() + 4
    }

    /// agents(3 each) + foods(4 each) + time.
    pub fn state_dim(&self) -> usize {
        3 * self.n_agents() + 4 * self.n_foods() + 1
    }

    pub fn obs_layout(&self, agent: usize) -> ObsLayout {
        assert!(agent < self.n_agents());
        let mut labels = vec![DimLabel::SelfFeature; 3];
        for j in 0..self.n_agents() {
            if j == agent {
                continue;
            }
            labels.extend([DimLabel::EncodesAgent(j); 4]);
        }
        for e in 0..self.n_foods() {
            labels.extend([DimLabel::EncodesFood(e); 4]);
        }
        labels.extend([DimLabel::Movement; 4]);
        ObsLayout { labels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents() < 2 {
            return Err(CoreError::Env("need at least two agents".into()));
        }
        if self.food_levels.is_empty() {
            return Err(CoreError::Env("need at least one food item".into()));
        }
        if self.width < 2 || self.height < 2 {
            return Err(CoreError::Env("grid too small".into()));
        }
        if self.n_agents() + self.n_foods() > self.width * self.height {
            return Err(CoreError::Env("more entities than grid cells".into()));
        }
        if self.sight == 0 || self.step_limit == 0 {
            return Err(CoreError::Env("sight and step limit must be positive".into()));
        }
        if self.agent_levels.iter().chain(&self.food_levels).any(|&l| l == 0) {
            return Err(CoreError::Env("levels must be positive".into()));
        }
        if self.disabled_agents.iter().any(|&a| a >= self.n_agents()) {
            return Err(CoreError::Env("disabled agent index out of range".into()));
        }
        // Every food must be collectible by some subset of active agents.
        let active_sum: u32 = self
            .agent_levels
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.disabled_agents.contains(i))
            .map(|(_, &l)| l)
            .sum();
        if self.food_levels.iter().any(|&f| f > active_sum) {
            return Err(CoreError::Env(
                "a food level exceeds the active agents' total level".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Food {
    x: i64,
    y: i64,
    level: u32,
    alive: bool,
}

/// Live foraging episode state.
#[derive(Clone, Debug)]
pub struct ForageEnv {
    pub(crate) spec: ForageSpec,
    positions: Vec<(i64, i64)>,
    foods: Vec<Food>,
    time: usize,
    done: bool,
    success: bool,
    started: bool,
}

impl ForageEnv {
    pub fn new(spec: ForageSpec) -> Self {
        ForageEnv {
            spec,
            positions: Vec::new(),
            foods: Vec::new(),
            time: 0,
            done: false,
            success: false,
            started: false,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.spec.n_agents()
    }

    pub fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.obs_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn success(&self) -> bool {
        self.success
    }

    /// Place agents and foods on distinct cells, uniformly at random from
    /// the reset stream.
    pub fn reset(&mut self, seed: u64) -> Result<JointObservation> {
        self.spec.validate()?;
        let (n, m) = (self.spec.n_agents(), self.spec.n_foods());
        let cells = self.spec.width * self.spec.height;
        let mut rng = stream(seed, "forage-reset", 0);
        let picks = rand::seq::index::sample(&mut rng, cells, n + m);
        let as_xy = |c: usize| ((c % self.spec.width) as i64, (c / self.spec.width) as i64);
        self.positions = picks.iter().take(n).map(as_xy).collect();
        self.foods = picks
            .iter()
            .skip(n)
            .zip(&self.spec.food_levels)
            .map(|(c, &level)| {
                let (x, y) = as_xy(c);
                Food { x, y, level, alive: true }
            })
            .collect();
        self.time = 0;
        self.done = false;
        self.success = false;
        self.started = true;
        Ok(self.observations())
    }

    fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.spec.width as i64 && y < self.spec.height as i64
    }

    fn occupied(&self, x: i64, y: i64) -> bool {
        self.positions.iter().any(|&(px, py)| (px, py) == (x, y))
            || self.foods.iter().any(|f| f.alive && (f.x, f.y) == (x, y))
    }

    pub fn available_actions(&self, agent: usize) -> Vec<bool> {
        assert!(agent < self.n_agents());
        let mut avail = vec![false; N_ACTIONS];
        avail[actions::NOOP] = true;
        if self.spec.disabled_agents.contains(&agent) {
            return avail;
        }
        let (x, y) = self.positions[agent];
        for (k, (dx, dy)) in MOVES.iter().enumerate() {
            avail[1 + k] = self.in_bounds(x + dx, y + dy);
        }
        avail[actions::LOAD] = true;
        avail
    }

    pub fn step(&mut self, joint: &JointAction) -> Result<StepResult> {
        if !self.started || self.done {
            return Err(CoreError::Env("step on a finished or unreset episode".into()));
        }
        let n = self.n_agents();
        if joint.len() != n {
            return Err(CoreError::Env(format!(
                "joint action has {} entries for {} agents",
                joint.len(),
                n
            )));
        }
        let mut acts = joint.clone();
        for (i, a) in acts.iter_mut().enumerate() {
            if *a >= N_ACTIONS {
                return Err(CoreError::Env(format!("agent {i}: action {a} out of range")));
            }
            // Inactive agents stay put whatever was submitted.
            if self.spec.disabled_agents.contains(&i) {
                *a = actions::NOOP;
            } else if !self.available_actions(i)[*a] {
                return Err(CoreError::Env(format!(
                    "agent {i}: action {a} unavailable"
                )));
            }
        }

        // Loads against pre-move positions, per food in ascending order. A
        // loading agent counts toward every adjacent food.
        let total_level: f64 = self.spec.food_levels.iter().map(|&l| f64::from(l)).sum();
        let mut reward = 0.0;
        for f in 0..self.foods.len() {
            if !self.foods[f].alive {
                continue;
            }
            let (fx, fy) = (self.foods[f].x, self.foods[f].y);
            let mut level_sum = 0u32;
            for i in 0..n {
                if acts[i] != actions::LOAD {
                    continue;
                }
                let (x, y) = self.positions[i];
                if (x - fx).abs() + (y - fy).abs() == 1 {
                    level_sum += self.spec.agent_levels[i];
                }
            }
            if level_sum >= self.foods[f].level {
                self.foods[f].alive = false;
                reward += f64::from(self.foods[f].level) / total_level;
            }
        }

        // Sequential moves.
        for i in 0..n {
            let a = acts[i];
            if !(actions::NORTH..=actions::WEST).contains(&a) {
                continue;
            }
            let (dx, dy) = MOVES[a - 1];
            let (x, y) = self.positions[i];
            let (tx, ty) = (x + dx, y + dy);
            if self.in_bounds(tx, ty) && !self.occupied(tx, ty) {
                self.positions[i] = (tx, ty);
            }
        }

        self.time += 1;
        self.success = self.foods.iter().all(|f| !f.alive);
        self.done = self.success || self.time >= self.spec.step_limit;

        Ok(StepResult {
            obs: self.observations(),
            reward,
            done: self.done,
            success: self.success,
            avail: (0..n).map(|i| self.available_actions(i)).collect(),
            state: self.state_vector(),
        })
    }

    pub fn observations(&self) -> JointObservation {
        JointObservation::new((0..self.n_agents()).map(|i| self.observe(i)).collect())
    }

    fn observe(&self, agent: usize) -> Vec<f64> {
        let spec = &self.spec;
        let (x, y) = self.positions[agent];
        let sight = spec.sight as i64;
        let mut o = Vec::with_capacity(spec.obs_dim());
        // Self: absolute position and level.
        o.push(x as f64 / (spec.width - 1) as f64);
        o.push(y as f64 / (spec.height - 1) as f64);
        o.push(f64::from(spec.agent_levels[agent]) / spec.max_agent_level());
        // Teammates: visible flag, relative offset, level fraction.
        for j in 0..self.n_agents() {
            if j == agent {
                continue;
            }
            let (jx, jy) = self.positions[j];
            let (dx, dy) = (jx - x, jy - y);
            if dx.abs() <= sight && dy.abs() <= sight {
                o.push(1.0);
                o.push(dx as f64 / sight as f64);
                o.push(dy as f64 / sight as f64);
                o.push(f64::from(spec.agent_levels[j]) / spec.max_agent_level());
            } else {
                o.extend([0.0; 4]);
            }
        }
        // Foods: collected or out-of-window items are all zeros.
        for f in &self.foods {
            let (dx, dy) = (f.x - x, f.y - y);
            if f.alive && dx.abs() <= sight && dy.abs() <= sight {
                o.push(1.0);
                o.push(dx as f64 / sight as f64);
                o.push(dy as f64 / sight as f64);
                o.push(f64::from(f.level) / spec.max_food_level());
            } else {
                o.extend([0.0; 4]);
            }
        }
        // Movement legality, mirroring the availability mask.
        let avail = self.available_actions(agent);
        for k in 0..4 {
            o.push(if avail[1 + k] { 1.0 } else { 0.0 });
        }
        debug_assert_eq!(o.len(), spec.obs_dim());
        o
    }

    pub fn state_vector(&self) -> Vec<f64> {
        let spec = &self.spec;
        let mut s = Vec::with_capacity(spec.state_dim());
        for (i, &(x, y)) in self.positions.iter().enumerate() {
            s.push(x as f64 / (spec.width - 1) as f64);
            s.push(y as f64 / (spec.height - 1) as f64);
            s.push(f64::from(spec.agent_levels[i]) / spec.max_agent_level());
        }
        for f in &self.foods {
            s.push(if f.alive { 1.0 } else { 0.0 });
            s.push(f.x as f64 / (spec.width - 1) as f64);
            s.push(f.y as f64 / (spec.height - 1) as f64);
            s.push(f64::from(f.level) / spec.max_food_level());
        }
        s.push(self.time as f64 / spec.step_limit as f64);
        debug_assert_eq!(s.len(), spec.state_dim());
        s
    }

    // Test and probe helpers.

    pub fn agent_position(&self, i: usize) -> (i64, i64) {
        self.positions[i]
    }

    pub fn foods_alive(&self) -> usize {
        self.foods.iter().filter(|f| f.alive).count()
    }

    #[cfg(test)]
    pub(crate) fn force_layout(&mut self, positions: Vec<(i64, i64)>, foods: Vec<(i64, i64, u32)>) {
        assert_eq!(positions.len(), self.spec.n_agents());
        assert_eq!(foods.len(), self.spec.n_foods());
        self.positions = positions;
        self.foods = foods
            .into_iter()
            .map(|(x, y, level)| Food { x, y, level, alive: true })
            .collect();
        self.time = 0;
        self.done = false;
        self.success = false;
        self.started = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec3() -> ForageSpec {
        ForageSpec::standard(3)
    }

    #[test]
    fn reset_is_deterministic_and_entities_distinct() {
        let mut a = ForageEnv::new(spec3());
        let mut b = ForageEnv::new(spec3());
        let oa = a.reset(42).unwrap();
        let ob = b.reset(42).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a.positions, b.positions);
        let mut cells: Vec<(i64, i64)> = a.positions.clone();
        cells.extend(a.foods.iter().map(|f| (f.x, f.y)));
        cells.sort_unstable();
        cells.dedup();
        assert_eq!(cells.len(), 3 + 3, "entities share a cell");
    }

    #[test]
    fn six_food_spec_spawns_six_items() {
        let spec = ForageSpec::large(5);
        assert_eq!(spec.n_foods(), 6);
        let mut env = ForageEnv::new(spec);
        env.reset(7).unwrap();
        assert_eq!(env.foods_alive(), 6);
    }

    #[test]
    fn noop_step_changes_nothing_but_time() {
        let mut env = ForageEnv::new(spec3());
        env.reset(1).unwrap();
        let before = env.positions.clone();
        let r = env.step(&vec![actions::NOOP; 3]).unwrap();
        assert_eq!(env.positions, before);
        assert_eq!(r.reward, 0.0);
        assert_eq!(env.time(), 1);
    }

    #[test]
    fn joint_load_collects_food_that_needs_both_levels() {
        let mut spec = spec3();
        spec.agent_levels = vec![2, 1, 1];
        spec.food_levels = vec![3, 1, 1];
        let mut env = ForageEnv::new(spec);
        env.reset(1).unwrap();
        // Food 0 (level 3) at (4,4); agents with levels 2 and 1 adjacent.
        env.force_layout(
            vec![(3, 4), (5, 4), (0, 0)],
            vec![(4, 4, 3), (8, 8, 1), (8, 0, 1)],
        );
        let r = env
            .step(&vec![actions::LOAD, actions::LOAD, actions::NOOP])
            .unwrap();
        assert_eq!(env.foods_alive(), 2);
        assert!((r.reward - 3.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn lone_load_below_food_level_fails() {
        let mut spec = spec3();
        spec.food_levels = vec![2, 1, 1];
        let mut env = ForageEnv::new(spec);
        env.reset(1).unwrap();
        env.force_layout(
            vec![(3, 4), (0, 0), (0, 1)],
            vec![(4, 4, 2), (8, 8, 1), (8, 0, 1)],
        );
        let r = env
            .step(&vec![actions::LOAD, actions::NOOP, actions::NOOP])
            .unwrap();
        assert_eq!(env.foods_alive(), 3);
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn edge_moves_are_unavailable() {
        let mut env = ForageEnv::new(spec3());
        env.reset(1).unwrap();
        env.force_layout(vec![(0, 0), (4, 4), (8, 8)], vec![(2, 2, 1), (3, 3, 2), (5, 5, 2)]);
        let avail = env.available_actions(0);
        assert!(!avail[actions::NORTH], "north leaves the grid from y=0");
        assert!(!avail[actions::WEST], "west leaves the grid from x=0");
        assert!(avail[actions::SOUTH] && avail[actions::EAST]);
        let a2 = env.available_actions(2);
        assert!(!a2[actions::SOUTH] && !a2[actions::EAST]);
    }

    #[test]
    fn unavailable_action_is_a_structured_error() {
        let mut env = ForageEnv::new(spec3());
        env.reset(1).unwrap();
        env.force_layout(vec![(0, 0), (4, 4), (8, 8)], vec![(2, 2, 1), (3, 3, 2), (5, 5, 2)]);
        let err = env
            .step(&vec![actions::NORTH, actions::NOOP, actions::NOOP])
            .unwrap_err();
        assert!(err.to_string().contains("unavailable"));
    }

    #[test]
    fn disabled_agent_stays_put_for_any_submitted_action() {
        let mut spec = spec3();
        spec.disabled_agents = BTreeSet::from([1]);
        let mut env = ForageEnv::new(spec);
        env.reset(1).unwrap();
        env.force_layout(vec![(0, 0), (4, 4), (8, 8)], vec![(2, 2, 1), (3, 3, 2), (5, 5, 2)]);
        assert_eq!(
            env.available_actions(1),
            vec![true, false, false, false, false, false]
        );
        env.step(&vec![actions::NOOP, actions::SOUTH, actions::NOOP])
            .unwrap();
        assert_eq!(env.agent_position(1), (4, 4));
    }

    #[test]
    fn out_of_sight_changes_leave_observation_unchanged() {
        let mut env = ForageEnv::new(spec3());
        env.reset(1).unwrap();
        env.force_layout(vec![(0, 0), (8, 8), (4, 0)], vec![(2, 2, 1), (3, 3, 2), (5, 5, 2)]);
        let before = env.observe(0);
        // Teleport the far agent to another far cell: still outside the
        // sight-3 window of agent 0.
        env.positions[1] = (8, 5);
        let after = env.observe(0);
        assert_eq!(before, after);
    }

    #[test]
    fn blocked_move_keeps_agent_in_place() {
        let mut env = ForageEnv::new(spec3());
        env.reset(1).unwrap();
        env.force_layout(vec![(3, 4), (4, 4), (8, 8)], vec![(2, 2, 1), (3, 3, 2), (5, 5, 2)]);
        env.step(&vec![actions::EAST, actions::NOOP, actions::NOOP])
            .unwrap();
        assert_eq!(env.agent_position(0), (3, 4), "cell occupied by teammate");
    }

    #[test]
    fn termination_at_step_limit_without_success() {
        let mut spec = spec3();
        spec.step_limit = 3;
        let mut env = ForageEnv::new(spec);
        env.reset(2).unwrap();
        let mut last = None;
        for _ in 0..3 {
            last = Some(env.step(&vec![actions::NOOP; 3]).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done && !last.success);
        assert!(env.step(&vec![actions::NOOP; 3]).is_err());
    }

    #[test]
    fn layout_covers_every_dimension_once() {
        let spec = spec3();
        let layout = spec.obs_layout(1);
        assert_eq!(layout.dim(), spec.obs_dim());
        assert_eq!(layout.dims_labeled(DimLabel::SelfFeature).len(), 3);
        assert_eq!(layout.dims_labeled(DimLabel::Movement).len(), 4);
        assert_eq!(layout.dims_labeled(DimLabel::EncodesAgent(0)).len(), 4);
        assert_eq!(layout.dims_labeled(DimLabel::EncodesAgent(2)).len(), 4);
        assert!(layout.dims_labeled(DimLabel::EncodesAgent(1)).is_empty());
    }

    #[test]
    fn infeasible_placement_is_rejected() {
        let mut spec = spec3();
        spec.width = 2;
        spec.height = 2;
        spec.food_levels = vec![1, 1];
        let mut env = ForageEnv::new(spec);
        assert!(env.reset(1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Trajectories are a pure function of (spec, seed, actions), and
        /// observations stay finite.
        #[test]
        fn trajectories_are_deterministic(seed in 0u64..1000, steps in 1usize..30) {
            let run = || {
                let mut env = ForageEnv::new(spec3());
                env.reset(seed).unwrap();
                let mut rng = stream(seed, "proptest-actions", 1);
                let mut log = Vec::new();
                for _ in 0..steps {
                    if env.done() {
                        break;
                    }
                    let joint: Vec<usize> = (0..3)
                        .map(|i| {
                            let avail = env.available_actions(i);
                            let legal: Vec<usize> =
                                (0..N_ACTIONS).filter(|&a| avail[a]).collect();
                            use rand::Rng;
                            legal[rng.gen_range(0..legal.len())]
                        })
                        .collect();
                    let r = env.step(&joint).unwrap();
                    prop_assert!(r.obs.iter().all(|o| o.iter().all(|v| v.is_finite())));
                    log.push((joint, r.reward.to_bits(), r.done));
                }
                Ok(log)
            };
            let a = run()?;
            let b = run()?;
            prop_assert_eq!(a, b);
        }
    }
}
