//! Small two-team combat gridworld with a scripted opponent.
//!
//! Symmetric teams of marine-like units (optionally with one healer per
//! side) fight on a rectangular arena. Controlled units move one cell, stop,
//! or attack an opponent in range; the scripted opponents focus-fire the
//! nearest living controlled unit, moving toward it when out of range.
//! The shared reward is the health damage dealt to opponents plus a kill
//! bonus per opponent removed and a win bonus for wiping the team, all
//! scaled so that a flawless episode returns 20.
//!
//! Step resolution order, ties broken by ascending index:
//! 1. inactive (disabled) units are coerced to no-op;
//! 2. controlled moves resolve sequentially (occupied target cell = stay);
//! 3. controlled attacks apply sequentially; targets already dead this step
//!    absorb nothing;
//! 4. controlled healers each heal the lowest-health damaged teammate in
//!    range;
//! 5. scripted opponents act in index order (attack if in range, else step
//!    toward the nearest controlled unit), then opponent healers heal;
//! 6. time advances; the episode ends on a wiped team or the step limit.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::stream;

use super::{DimLabel, JointAction, JointObservation, ObsLayout, StepResult};

/// Action indices below the per-opponent attack actions.
pub mod actions {
    pub const NOOP: usize = 0;
    pub const STOP: usize = 1;
    pub const NORTH: usize = 2;
    pub const SOUTH: usize = 3;
    pub const EAST: usize = 4;
    pub const WEST: usize = 5;
    pub const ATTACK_BASE: usize = 6;
}

pub const FIXED_ACTIONS: usize = 6;

const MOVES: [(i64, i64); 4] = [(0, -1), (0, 1), (1, 0), (-1, 0)];

/// Parameters of a skirmish task instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkirmishSpec {
    pub width: usize,
    pub height: usize,
    pub n_allies: usize,
    pub n_enemies: usize,
    pub unit_health: f64,
    pub attack_power: f64,
    /// Chebyshev attack range.
    pub attack_range: usize,
    /// Chebyshev sight radius.
    pub sight: usize,
    pub step_limit: usize,
    /// When set, the last unit of each team is a healer: it cannot attack
    /// and instead heals the lowest-health damaged teammate in range each
    /// step.
    #[serde(default)]
    pub healer: bool,
    #[serde(default = "default_heal_power")]
    pub heal_power: f64,
    /// Initial controlled-team health multiplier; the health-reduction
    /// perturbation lowers this below 1.
    #[serde(default = "default_health_scale")]
    pub health_scale: f64,
    #[serde(default)]
    pub disabled_agents: BTreeSet<usize>,
    #[serde(default = "default_reward_kill")]
    pub reward_kill: f64,
    #[serde(default = "default_reward_win")]
    pub reward_win: f64,
    /// Override for the reward normalization factor; `None` scales the
    /// maximum episode return to 20.
    #[serde(default)]
    pub reward_scale: Option<f64>,
}

fn default_heal_power() -> f64 {
    1.0
}

fn default_health_scale() -> f64 {
    1.0
}

fn default_reward_kill() -> f64 {
    10.0
}

fn default_reward_win() -> f64 {
    200.0
}

impl SkirmishSpec {
    /// Symmetric marines on a 10x10 arena.
    pub fn standard(n_allies: usize, n_enemies: usize) -> Self {
        SkirmishSpec {
            width: 10,
            height: 10,
            n_allies,
            n_enemies,
            unit_health: 10.0,
            attack_power: 2.0,
            attack_range: 2,
            sight: 4,
            step_limit: 40,
            healer: false,
            heal_power: default_heal_power(),
            health_scale: default_health_scale(),
            disabled_agents: BTreeSet::new(),
            reward_kill: default_reward_kill(),
            reward_win: default_reward_win(),
            reward_scale: None,
        }
    }

    pub fn n_actions(&self) -> usize {
        FIXED_ACTIONS + self.n_enemies
    }

    fn type_dims(&self) -> usize {
        if self.healer {
            2
        } else {
            0
        }
    }

    /// movement(4) + per-opponent block + per-teammate block + self block.
    pub fn obs_dim(&self) -> usize {
        let block = 4 + self.type_dims();
        4 + self.n_enemies * block + (self.n_allies - 1) * block + 3 + self.type_dims()
    }

    /// (alive, x, y, health) per unit on both teams, plus time.
    pub fn state_dim(&self) -> usize {
        4 * (self.n_allies + self.n_enemies) + 1
    }

    pub fn obs_layout(&self, agent: usize) -> ObsLayout {
        assert!(agent < self.n_allies);
        let block = 4 + self.type_dims();
        let mut labels = vec![DimLabel::Movement; 4];
        for e in 0..self.n_enemies {
            labels.extend(std::iter::repeat(DimLabel::EncodesEnemy(e)).take(block));
        }
        for j in 0..self.n_allies {
            if j == agent {
                continue;
            }
            labels.extend(std::iter::repeat(DimLabel::EncodesAgent(j)).take(block));
        }
        labels.extend(std::iter::repeat(DimLabel::SelfFeature).take(3 + self.type_dims()));
        ObsLayout { labels }
    }

    /// Reward normalization factor: maximum raw return mapped to 20 unless
    /// overridden. Healing can relocate health, so comps with healers may
    /// slightly exceed the nominal maximum.
    pub fn scale(&self) -> f64 {
        self.reward_scale.unwrap_or_else(|| {
            20.0 / (self.n_enemies as f64 * self.unit_health
                + self.reward_kill * self.n_enemies as f64
                + self.reward_win)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_allies < 2 || self.n_enemies < 1 {
            return Err(CoreError::Env("need at least two allies and one enemy".into()));
        }
        if self.width < 4 || self.height < 2 {
            return Err(CoreError::Env("arena too small".into()));
        }
        let half = (self.width / 2) * self.height;
        if self.n_allies > half || self.n_enemies > self.width.div_ceil(2) * self.height {
            return Err(CoreError::Env("more units than spawn cells".into()));
        }
        if self.unit_health <= 0.0 || self.attack_power <= 0.0 {
            return Err(CoreError::Env("health and attack power must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.health_scale) || self.health_scale == 0.0 {
            return Err(CoreError::Env("health scale must be in (0, 1]".into()));
        }
        if self.attack_range == 0 || self.sight == 0 || self.step_limit == 0 {
            return Err(CoreError::Env("range, sight, step limit must be positive".into()));
        }
        if self.disabled_agents.iter().any(|&a| a >= self.n_allies) {
            return Err(CoreError::Env("disabled agent index out of range".into()));
        }
        if self.healer && (self.n_allies < 2 || self.n_enemies < 2) {
            return Err(CoreError::Env("healer comps need at least two units per side".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Unit {
    x: i64,
    y: i64,
    health: f64,
    max_health: f64,
    alive: bool,
    healer: bool,
}

/// Live skirmish episode state.
#[derive(Clone, Debug)]
pub struct SkirmishEnv {
    pub(crate) spec: SkirmishSpec,
    allies: Vec<Unit>,
    enemies: Vec<Unit>,
    time: usize,
    done: bool,
    success: bool,
    started: bool,
}

impl SkirmishEnv {
    pub fn new(spec: SkirmishSpec) -> Self {
        SkirmishEnv {
            spec,
            allies: Vec::new(),
            enemies: Vec::new(),
            time: 0,
            done: false,
            success: false,
            started: false,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.spec.n_allies
    }

    pub fn n_actions(&self) -> usize {
        self.spec.n_actions()
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

    pub fn ally_health(&self, i: usize) -> f64 {
        self.allies[i].health
    }

    pub fn enemies_alive(&self) -> usize {
        self.enemies.iter().filter(|u| u.alive).count()
    }

    /// Allies spawn on the left half of the arena, opponents on the right,
    /// each uniformly without replacement from the reset stream.
    pub fn reset(&mut self, seed: u64) -> Result<JointObservation> {
        self.spec.validate()?;
        let mut rng = stream(seed, "skirmish-reset", 0);
        let s = &self.spec;
        let left_cols = s.width / 2;
        let right_cols = s.width - left_cols;
        let make = |cells: rand::seq::index::IndexVec,
                    cols: usize,
                    x0: i64,
                    count: usize,
                    max_health: f64,
                    healer_comp: bool| {
            cells
                .iter()
                .take(count)
                .enumerate()
                .map(|(i, c)| Unit {
                    x: x0 + (c % cols) as i64,
                    y: (c / cols) as i64,
                    health: max_health,
                    max_health,
                    alive: true,
                    healer: healer_comp && i == count - 1,
                })
                .collect::<Vec<_>>()
        };
        let ally_cells = rand::seq::index::sample(&mut rng, left_cols * s.height, s.n_allies);
        self.allies = make(
            ally_cells,
            left_cols,
            0,
            s.n_allies,
            s.unit_health * s.health_scale,
            s.healer,
        );
        let enemy_cells = rand::seq::index::sample(&mut rng, right_cols * s.height, s.n_enemies);
        self.enemies = make(
            enemy_cells,
            right_cols,
            left_cols as i64,
            s.n_enemies,
            s.unit_health,
            s.healer,
        );
        self.time = 0;
        self.done = false;
        self.success = false;
        self.started = true;
        Ok(self.observations())
    }

    fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.spec.width as i64 && y < self.spec.height as i64
    }

    fn cell_free(&self, x: i64, y: i64) -> bool {
        !self
            .allies
            .iter()
            .chain(&self.enemies)
            .any(|u| u.alive && (u.x, u.y) == (x, y))
    }

    fn chebyshev(a: (i64, i64), b: (i64, i64)) -> i64 {
        (a.0 - b.0).abs().max((a.1 - b.1).abs())
    }

    pub fn available_actions(&self, agent: usize) -> Vec<bool> {
        assert!(agent < self.n_agents());
        let mut avail = vec![false; self.n_actions()];
        let u = &self.allies[agent];
        if !u.alive || self.spec.disabled_agents.contains(&agent) {
            avail[actions::NOOP] = true;
            return avail;
        }
        avail[actions::STOP] = true;
        for (k, (dx, dy)) in MOVES.iter().enumerate() {
            avail[actions::NORTH + k] = self.in_bounds(u.x + dx, u.y + dy);
        }
        if !u.healer {
            for (e, enemy) in self.enemies.iter().enumerate() {
                avail[actions::ATTACK_BASE + e] = enemy.alive
                    && Self::chebyshev((u.x, u.y), (enemy.x, enemy.y))
                        <= self.spec.attack_range as i64;
            }
        }
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
            if *a >= self.n_actions() {
                return Err(CoreError::Env(format!("agent {i}: action {a} out of range")));
            }
            if self.spec.disabled_agents.contains(&i) {
                *a = actions::NOOP;
            } else if !self.available_actions(i)[*a] {
                return Err(CoreError::Env(format!("agent {i}: action {a} unavailable")));
            }
        }

        // Controlled moves.
        for i in 0..n {
            let a = acts[i];
            if !(actions::NORTH..=actions::WEST).contains(&a) {
                continue;
            }
            let (dx, dy) = MOVES[a - actions::NORTH];
            let (tx, ty) = (self.allies[i].x + dx, self.allies[i].y + dy);
            if self.in_bounds(tx, ty) && self.cell_free(tx, ty) {
                self.allies[i].x = tx;
                self.allies[i].y = ty;
            }
        }

        // Controlled attacks.
        let mut damage = 0.0;
        let mut kills = 0usize;
        for i in 0..n {
            let a = acts[i];
            if a < actions::ATTACK_BASE {
                continue;
            }
            let e = a - actions::ATTACK_BASE;
            let target = &mut self.enemies[e];
            if !target.alive {
                continue; // died earlier this step
            }
            let dealt = self.spec.attack_power.min(target.health);
            target.health -= dealt;
            damage += dealt;
            if target.health <= 0.0 {
                target.alive = false;
                target.health = 0.0;
                kills += 1;
            }
        }

        // Controlled healer support.
        self.run_heals(true);

        let win = self.enemies.iter().all(|u| !u.alive);
        if !win {
            self.run_opponent_script();
            self.run_heals(false);
        }

        self.time += 1;
        let lose = self.allies.iter().all(|u| !u.alive);
        self.success = win;
        self.done = win || lose || self.time >= self.spec.step_limit;

        let raw = damage
            + self.spec.reward_kill * kills as f64
            + if win { self.spec.reward_win } else { 0.0 };
        let reward = raw * self.spec.scale();

        Ok(StepResult {
            obs: self.observations(),
            reward,
            done: self.done,
            success: self.success,
            avail: (0..n).map(|i| self.available_actions(i)).collect(),
            state: self.state_vector(),
        })
    }

    /// Each living healer on the given side heals the lowest-health damaged
    /// teammate within attack range (ties to the lowest index).
    fn run_heals(&mut self, ally_side: bool) {
        let side = if ally_side { &self.allies } else { &self.enemies };
        let mut orders: Vec<(usize, usize)> = Vec::new();
        for (h, unit) in side.iter().enumerate() {
            if !unit.alive || !unit.healer {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, mate) in side.iter().enumerate() {
                if j == h || !mate.alive || mate.health >= mate.max_health {
                    continue;
                }
                if Self::chebyshev((unit.x, unit.y), (mate.x, mate.y))
                    > self.spec.attack_range as i64
                {
                    continue;
                }
                if best.map_or(true, |(_, bh)| mate.health < bh) {
                    best = Some((j, mate.health));
                }
            }
            if let Some((j, _)) = best {
                orders.push((h, j));
            }
        }
        let side = if ally_side { &mut self.allies } else { &mut self.enemies };
        for (_, j) in orders {
            let mate = &mut side[j];
            mate.health = (mate.health + self.spec.heal_power).min(mate.max_health);
        }
    }

    /// Focus-fire-nearest opponent behavior: attack the nearest living
    /// controlled unit when in range, otherwise step toward it along the
    /// axis with the larger gap (x first on ties; blocked moves try the
    /// other axis). Opponent healers hold position.
    fn run_opponent_script(&mut self) {
        for e in 0..self.enemies.len() {
            if !self.enemies[e].alive {
                continue;
            }
            let (ex, ey) = (self.enemies[e].x, self.enemies[e].y);
            let mut target: Option<(usize, i64)> = None;
            for (i, ally) in self.allies.iter().enumerate() {
                if !ally.alive {
                    continue;
                }
                let d2 = (ally.x - ex).pow(2) + (ally.y - ey).pow(2);
                if target.map_or(true, |(_, bd)| d2 < bd) {
                    target = Some((i, d2));
                }
            }
            let Some((ti, _)) = target else { return };
            if self.enemies[e].healer {
                continue;
            }
            let (tx, ty) = (self.allies[ti].x, self.allies[ti].y);
            if Self::chebyshev((ex, ey), (tx, ty)) <= self.spec.attack_range as i64 {
                let victim = &mut self.allies[ti];
                let dealt = self.spec.attack_power.min(victim.health);
                victim.health -= dealt;
                if victim.health <= 0.0 {
                    victim.alive = false;
                    victim.health = 0.0;
                }
            } else {
                let (dx, dy) = (tx - ex, ty - ey);
                let step_x = (dx.signum(), 0);
                let step_y = (0, dy.signum());
                let order = if dx.abs() >= dy.abs() {
                    [step_x, step_y]
                } else {
                    [step_y, step_x]
                };
                for (mx, my) in order {
                    if mx == 0 && my == 0 {
                        continue;
                    }
                    let (nx, ny) = (ex + mx, ey + my);
                    if self.in_bounds(nx, ny) && self.cell_free(nx, ny) {
                        self.enemies[e].x = nx;
                        self.enemies[e].y = ny;
                        break;
                    }
                }
            }
        }
    }

    pub fn observations(&self) -> JointObservation {
        JointObservation::new((0..self.n_agents()).map(|i| self.observe(i)).collect())
    }

    fn entity_block(&self, o: &mut Vec<f64>, from: (i64, i64), u: &Unit) {
        let sight = self.spec.sight as i64;
        let (dx, dy) = (u.x - from.0, u.y - from.1);
        if u.alive && dx.abs() <= sight && dy.abs() <= sight {
            o.push(1.0);
            o.push(dx as f64 / sight as f64);
            o.push(dy as f64 / sight as f64);
            o.push(u.health / self.spec.unit_health);
            if self.spec.healer {
                o.push(if u.healer { 0.0 } else { 1.0 });
                o.push(if u.healer { 1.0 } else { 0.0 });
            }
        } else {
            o.extend(std::iter::repeat(0.0).take(4 + self.spec.type_dims()));
        }
    }

    fn observe(&self, agent: usize) -> Vec<f64> {
        let spec = &self.spec;
        let me = &self.allies[agent];
        let mut o = Vec::with_capacity(spec.obs_dim());
        if !me.alive {
            return vec![0.0; spec.obs_dim()];
        }
        let avail = self.available_actions(agent);
        for k in 0..4 {
            o.push(if avail[actions::NORTH + k] { 1.0 } else { 0.0 });
        }
        for u in &self.enemies {
            self.entity_block(&mut o, (me.x, me.y), u);
        }
        for (j, u) in self.allies.iter().enumerate() {
            if j == agent {
                continue;
            }
            self.entity_block(&mut o, (me.x, me.y), u);
        }
        o.push(me.health / spec.unit_health);
        o.push(me.x as f64 / (spec.width - 1) as f64);
        o.push(me.y as f64 / (spec.height - 1) as f64);
        if spec.healer {
            o.push(if me.healer { 0.0 } else { 1.0 });
            o.push(if me.healer { 1.0 } else { 0.0 });
        }
        debug_assert_eq!(o.len(), spec.obs_dim());
        o
    }

    pub fn state_vector(&self) -> Vec<f64> {
        let spec = &self.spec;
        let mut s = Vec::with_capacity(spec.state_dim());
        for u in self.allies.iter().chain(&self.enemies) {
            if u.alive {
                s.push(1.0);
                s.push(u.x as f64 / (spec.width - 1) as f64);
                s.push(u.y as f64 / (spec.height - 1) as f64);
                s.push(u.health / spec.unit_health);
            } else {
                s.extend([0.0; 4]);
            }
        }
        s.push(self.time as f64 / spec.step_limit as f64);
        debug_assert_eq!(s.len(), spec.state_dim());
        s
    }

    #[cfg(test)]
    pub(crate) fn force_layout(&mut self, allies: Vec<(i64, i64)>, enemies: Vec<(i64, i64)>) {
        assert_eq!(allies.len(), self.spec.n_allies);
        assert_eq!(enemies.len(), self.spec.n_enemies);
        let spec = self.spec.clone();
        let unit = |(x, y): (i64, i64), max_health: f64, healer: bool| Unit {
            x,
            y,
            health: max_health,
            max_health,
            alive: true,
            healer,
        };
        self.allies = allies
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                unit(
                    p,
                    spec.unit_health * spec.health_scale,
                    spec.healer && i == spec.n_allies - 1,
                )
            })
            .collect();
        self.enemies = enemies
            .into_iter()
            .enumerate()
            .map(|(i, p)| unit(p, spec.unit_health, spec.healer && i == spec.n_enemies - 1))
            .collect();
        self.time = 0;
        self.done = false;
        self.success = false;
        self.started = true;
    }

    #[cfg(test)]
    pub(crate) fn set_enemy_health(&mut self, e: usize, health: f64) {
        self.enemies[e].health = health;
    }

    #[cfg(test)]
    pub(crate) fn kill_ally(&mut self, i: usize) {
        self.allies[i].alive = false;
        self.allies[i].health = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec2v2() -> SkirmishSpec {
        SkirmishSpec::standard(2, 2)
    }

    #[test]
    fn reset_is_deterministic_and_sides_split() {
        let mut a = SkirmishEnv::new(spec2v2());
        let mut b = SkirmishEnv::new(spec2v2());
        assert_eq!(a.reset(9).unwrap(), b.reset(9).unwrap());
        assert!(a.allies.iter().all(|u| u.x < 5));
        assert!(a.enemies.iter().all(|u| u.x >= 5));
    }

    #[test]
    fn attack_reward_counts_damage_and_kill_bonus() {
        let mut spec = spec2v2();
        spec.reward_scale = Some(1.0); // report raw reward
        let mut env = SkirmishEnv::new(spec);
        env.reset(1).unwrap();
        env.force_layout(vec![(4, 4), (4, 5)], vec![(5, 4), (9, 9)]);
        env.set_enemy_health(0, 3.0);
        // Two attacks of power 2 on a 3-health enemy: 3 damage, one kill.
        let r = env
            .step(&vec![actions::ATTACK_BASE, actions::ATTACK_BASE])
            .unwrap();
        assert!((r.reward - (3.0 + 10.0)).abs() < 1e-12);
        assert_eq!(env.enemies_alive(), 1);
    }

    #[test]
    fn winning_return_is_twenty_for_marine_comps() {
        let mut spec = spec2v2();
        spec.unit_health = 2.0; // one hit per enemy
        let mut env = SkirmishEnv::new(spec);
        env.reset(1).unwrap();
        env.force_layout(vec![(4, 4), (4, 5)], vec![(5, 4), (5, 5)]);
        let r = env
            .step(&vec![actions::ATTACK_BASE, actions::ATTACK_BASE + 1])
            .unwrap();
        assert!(r.done && r.success);
        assert!((r.reward - 20.0).abs() < 1e-9, "reward {}", r.reward);
    }

    #[test]
    fn dead_unit_has_only_noop_and_zero_observation() {
        let mut env = SkirmishEnv::new(spec2v2());
        env.reset(1).unwrap();
        env.force_layout(vec![(0, 0), (0, 9)], vec![(9, 0), (9, 9)]);
        env.kill_ally(0);
        let avail = env.available_actions(0);
        assert!(avail[actions::NOOP]);
        assert!(avail[1..].iter().all(|&a| !a));
        assert!(env.observe(0).iter().all(|&v| v == 0.0));
        // Living units never expose no-op.
        assert!(!env.available_actions(1)[actions::NOOP]);
    }

    #[test]
    fn out_of_range_attack_unavailable() {
        let mut env = SkirmishEnv::new(spec2v2());
        env.reset(1).unwrap();
        env.force_layout(vec![(0, 0), (0, 9)], vec![(9, 0), (9, 9)]);
        let avail = env.available_actions(0);
        assert!(!avail[actions::ATTACK_BASE]);
        assert!(!avail[actions::ATTACK_BASE + 1]);
    }

    #[test]
    fn script_closes_distance_then_attacks() {
        let mut spec = spec2v2();
        spec.reward_scale = Some(1.0);
        let mut env = SkirmishEnv::new(spec);
        env.reset(1).unwrap();
        env.force_layout(vec![(0, 0), (0, 9)], vec![(9, 0), (9, 9)]);
        let d_before = (env.enemies[0].x - 0).abs();
        env.step(&vec![actions::STOP, actions::STOP]).unwrap();
        let d_after = (env.enemies[0].x - 0).abs();
        assert_eq!(d_after, d_before - 1, "enemy should approach");
        // Close the gap until in range, then expect ally 0 to take damage.
        for _ in 0..12 {
            if env.done() {
                break;
            }
            env.step(&vec![actions::STOP, actions::STOP]).unwrap();
        }
        assert!(env.ally_health(0) < env.allies[0].max_health);
    }

    #[test]
    fn healer_restores_damaged_teammate() {
        let mut spec = spec2v2();
        spec.n_allies = 3;
        spec.healer = true;
        spec.reward_scale = Some(1.0);
        let mut env = SkirmishEnv::new(spec);
        env.reset(1).unwrap();
        env.force_layout(vec![(0, 0), (1, 0), (1, 1)], vec![(9, 0), (9, 9)]);
        env.allies[0].health = 5.0;
        env.step(&vec![actions::STOP, actions::STOP, actions::STOP])
            .unwrap();
        assert!((env.ally_health(0) - 6.0).abs() < 1e-12);
        // Healers never expose attack actions.
        let avail = env.available_actions(2);
        assert!(avail[actions::ATTACK_BASE..].iter().all(|&a| !a));
    }

    #[test]
    fn out_of_sight_changes_leave_observation_unchanged() {
        let mut env = SkirmishEnv::new(spec2v2());
        env.reset(1).unwrap();
        env.force_layout(vec![(0, 0), (0, 1)], vec![(9, 0), (9, 9)]);
        let before = env.observe(0);
        env.enemies[1].x = 8; // still beyond sight 4 from (0,0)
        let after = env.observe(0);
        assert_eq!(before, after);
    }

    #[test]
    fn layout_blocks_cover_dimension_count() {
        let spec = spec2v2();
        let layout = spec.obs_layout(0);
        assert_eq!(layout.dim(), spec.obs_dim());
        assert_eq!(layout.dims_labeled(DimLabel::Movement).len(), 4);
        assert_eq!(layout.dims_labeled(DimLabel::EncodesEnemy(0)).len(), 4);
        assert_eq!(layout.dims_labeled(DimLabel::EncodesAgent(1)).len(), 4);
        assert_eq!(layout.dims_labeled(DimLabel::SelfFeature).len(), 3);
    }

    #[test]
    fn step_limit_terminates_without_success() {
        let mut spec = spec2v2();
        spec.step_limit = 2;
        let mut env = SkirmishEnv::new(spec);
        env.reset(3).unwrap();
        env.force_layout(vec![(0, 0), (0, 9)], vec![(9, 0), (9, 9)]);
        env.step(&vec![actions::STOP, actions::STOP]).unwrap();
        let r = env.step(&vec![actions::STOP, actions::STOP]).unwrap();
        assert!(r.done && !r.success);
    }
}
