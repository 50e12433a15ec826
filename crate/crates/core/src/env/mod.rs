//! RoleArena: a deterministic grid team-combat Dec-POMDP with heterogeneous
//! unit classes.
//!
//! Cells are addressed as `(row, col)`. Allies spawn in the two leftmost
//! columns and enemies in the two rightmost, filled row-major by roster
//! index. The `x` axis is the column, `y` the row.

mod trace;

pub use trace::{read_trace, TraceHeader, TraceRecord, TraceWriter, TRACE_SCHEMA, TRACE_VERSION};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UnitClass {
    Heavy,
    Striker,
    Healer,
    EnemyGrunt,
    EnemyBrute,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct UnitStats {
    pub max_health: i32,
    pub attack_power: i32,
    pub attack_range: i32,
    pub move_speed: i32,
    pub heal_power: i32,
}

impl UnitClass {
    pub const ALL: [UnitClass; 5] = [
        UnitClass::Heavy,
        UnitClass::Striker,
        UnitClass::Healer,
        UnitClass::EnemyGrunt,
        UnitClass::EnemyBrute,
    ];
    pub const COUNT: usize = 5;

    pub fn stats(self) -> UnitStats {
        let (max_health, attack_power, attack_range, heal_power) = match self {
            UnitClass::Heavy => (12, 3, 1, 0),
            UnitClass::Striker => (6, 2, 2, 0),
            UnitClass::Healer => (6, 0, 2, 2),
            UnitClass::EnemyGrunt => (6, 2, 1, 0),
            UnitClass::EnemyBrute => (12, 3, 1, 0),
        };
        UnitStats {
            max_health,
            attack_power,
            attack_range,
            move_speed: 1,
            heal_power,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_enemy(self) -> bool {
        matches!(self, UnitClass::EnemyGrunt | UnitClass::EnemyBrute)
    }

    pub fn can_heal(self) -> bool {
        self.stats().heal_power > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub ally_roster: Vec<UnitClass>,
    pub enemy_roster: Vec<UnitClass>,
    pub sight_range: usize,
    pub episode_limit: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        use UnitClass::*;
        Self {
            grid_size: 8,
            ally_roster: vec![Heavy, Heavy, Striker, Striker, Striker, Healer],
            enemy_roster: vec![EnemyGrunt, EnemyGrunt, EnemyGrunt, EnemyGrunt, EnemyBrute, EnemyBrute],
            sight_range: 4,
            episode_limit: 60,
            seed: 0,
        }
    }
}

/// Named environment presets.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Two heavies, three strikers and a healer against four grunts and two
    /// brutes on an 8×8 grid.
    Default,
    /// Three strikers against two grunts on a 6×6 grid.
    Easy,
}

impl Preset {
    pub fn config(self) -> EnvConfig {
        match self {
            Preset::Default => EnvConfig::default(),
            Preset::Easy => EnvConfig {
                grid_size: 6,
                ally_roster: vec![UnitClass::Striker; 3],
                enemy_roster: vec![UnitClass::EnemyGrunt; 2],
                ..EnvConfig::default()
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Default => "default",
            Preset::Easy => "easy",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Preset::Default),
            "easy" => Ok(Preset::Easy),
            other => Err(Error::config(
                "preset",
                format!("unknown preset {other:?}; valid: default, easy"),
            )),
        }
    }
}

impl EnvConfig {
    pub fn n_agents(&self) -> usize {
        self.ally_roster.len()
    }

    pub fn n_enemies(&self) -> usize {
        self.enemy_roster.len()
    }

    /// `STAY, UP, DOWN, LEFT, RIGHT`, one attack per enemy slot and one heal
    /// per ally slot. Heal slots exist for every roster so that all agents
    /// share one action space; only healers ever have them available.
    pub fn n_actions(&self) -> usize {
        N_MOVES + self.n_enemies() + self.n_agents()
    }

    /// Per-slot width of the ally/enemy features: visible, dx, dy, health,
    /// class one-hot.
    const SLOT_DIM: usize = 4 + UnitClass::COUNT;

    pub fn obs_dim(&self) -> usize {
        3 + UnitClass::COUNT + (self.n_agents() - 1 + self.n_enemies()) * Self::SLOT_DIM
    }

    pub fn state_dim(&self) -> usize {
        (self.n_agents() + self.n_enemies()) * (3 + UnitClass::COUNT) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::config("grid_size", "must be positive"));
        }
        if self.ally_roster.len() < 2 {
            return Err(Error::config("ally_roster", "needs at least two agents"));
        }
        if self.enemy_roster.is_empty() {
            return Err(Error::config("enemy_roster", "needs at least one enemy"));
        }
        if let Some(c) = self.ally_roster.iter().find(|c| c.is_enemy()) {
            return Err(Error::config("ally_roster", format!("{c:?} is an enemy class")));
        }
        if let Some(c) = self.enemy_roster.iter().find(|c| !c.is_enemy()) {
            return Err(Error::config("enemy_roster", format!("{c:?} is not an enemy class")));
        }
        if self.sight_range == 0 || self.sight_range > self.grid_size {
            return Err(Error::config("sight_range", "must lie in 1..=grid_size"));
        }
        if self.episode_limit == 0 {
            return Err(Error::config("episode_limit", "must be positive"));
        }
        let spawn_cells = 2 * self.grid_size;
        if self.grid_size < 4 {
            return Err(Error::config("grid_size", "spawn columns overlap below 4"));
        }
        if self.ally_roster.len() > spawn_cells {
            return Err(Error::config(
                "ally_roster",
                format!(
                    "{} allies do not fit {} spawn cells",
                    self.ally_roster.len(),
                    spawn_cells
                ),
            ));
        }
        if self.enemy_roster.len() > spawn_cells {
            return Err(Error::config(
                "enemy_roster",
                format!(
                    "{} enemies do not fit {} spawn cells",
                    self.enemy_roster.len(),
                    spawn_cells
                ),
            ));
        }
        Ok(())
    }
}

pub const N_MOVES: usize = 5;
pub const STAY: usize = 0;
pub const UP: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;
pub const RIGHT: usize = 4;

pub const LIVING_PENALTY: f64 = 0.02;
pub const KILL_BONUS: f64 = 2.0;
pub const WIN_BONUS: f64 = 20.0;
const DAMAGE_SCALE: f64 = 0.05 * 20.0;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub row: i32,
    pub col: i32,
}

impl Pos {
    pub fn chebyshev(self, other: Pos) -> i32 {
        (self.row - other.row).abs().max((self.col - other.col).abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub class: UnitClass,
    pub health: i32,
    pub pos: Pos,
}

impl Unit {
    pub fn alive(&self) -> bool {
        self.health > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observations: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub won: bool,
    /// True when the episode ended only because the step limit was reached.
    pub truncated: bool,
    pub available_actions: Vec<Vec<bool>>,
}

/// A running RoleArena episode.
#[derive(Clone, Debug)]
pub struct RoleArena {
    config: EnvConfig,
    episode_seed: u64,
    allies: Vec<Unit>,
    enemies: Vec<Unit>,
    t: usize,
    terminated: bool,
}

impl RoleArena {
    /// Starts a fresh episode. Placement and dynamics are fully determined by
    /// the config; `episode_seed` is carried for bookkeeping only.
    pub fn reset(config: &EnvConfig, episode_seed: u64) -> Result<(Self, StepResult)> {
        config.validate()?;
        let g = config.grid_size as i32;
        let allies = config
            .ally_roster
            .iter()
            .enumerate()
            .map(|(i, &class)| Unit {
                class,
                health: class.stats().max_health,
                pos: Pos {
                    row: (i / 2) as i32,
                    col: (i % 2) as i32,
                },
            })
            .collect();
        let enemies = config
            .enemy_roster
            .iter()
            .enumerate()
            .map(|(j, &class)| Unit {
                class,
                health: class.stats().max_health,
                pos: Pos {
                    row: (j / 2) as i32,
                    col: g - 1 - (j % 2) as i32,
                },
            })
            .collect();
        let env = Self {
            config: config.clone(),
            episode_seed,
            allies,
            enemies,
            t: 0,
            terminated: false,
        };
        let result = env.result(0.0, false, false);
        Ok((env, result))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn episode_seed(&self) -> u64 {
        self.episode_seed
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn allies(&self) -> &[Unit] {
        &self.allies
    }

    pub fn enemies(&self) -> &[Unit] {
        &self.enemies
    }

    /// Test hook: overwrite a unit's health (clamped to its class range).
    pub fn set_health(&mut self, enemy: bool, index: usize, health: i32) {
        let unit = if enemy {
            &mut self.enemies[index]
        } else {
            &mut self.allies[index]
        };
        unit.health = health.clamp(0, unit.class.stats().max_health);
    }

    /// Test hook: move a unit.
    pub fn set_position(&mut self, enemy: bool, index: usize, pos: Pos) {
        let unit = if enemy {
            &mut self.enemies[index]
        } else {
            &mut self.allies[index]
        };
        unit.pos = pos;
    }

    fn occupied(&self, pos: Pos) -> bool {
        self.allies
            .iter()
            .chain(&self.enemies)
            .any(|u| u.alive() && u.pos == pos)
    }

    fn in_grid(&self, pos: Pos) -> bool {
        let g = self.config.grid_size as i32;
        (0..g).contains(&pos.row) && (0..g).contains(&pos.col)
    }

    fn move_target(pos: Pos, action: usize) -> Pos {
        match action {
            UP => Pos {
                row: pos.row - 1,
                ..pos
            },
            DOWN => Pos {
                row: pos.row + 1,
                ..pos
            },
            LEFT => Pos {
                col: pos.col - 1,
                ..pos
            },
            RIGHT => Pos {
                col: pos.col + 1,
                ..pos
            },
            _ => pos,
        }
    }

    pub fn available_actions(&self, agent: usize) -> Vec<bool> {
        let n = self.config.n_agents();
        let m = self.config.n_enemies();
        let mut mask = vec![false; self.config.n_actions()];
        mask[STAY] = true;
        let unit = &self.allies[agent];
        if !unit.alive() {
            return mask;
        }
        for a in [UP, DOWN, LEFT, RIGHT] {
            mask[a] = self.in_grid(Self::move_target(unit.pos, a));
        }
        let stats = unit.class.stats();
        if stats.attack_power > 0 {
            for (j, e) in self.enemies.iter().enumerate() {
                mask[N_MOVES + j] = e.alive() && unit.pos.chebyshev(e.pos) <= stats.attack_range;
            }
        }
        if stats.heal_power > 0 {
            for (i, other) in self.allies.iter().enumerate() {
                mask[N_MOVES + m + i] = i != agent
                    && other.alive()
                    && other.health < other.class.stats().max_health
                    && unit.pos.chebyshev(other.pos) <= stats.attack_range;
            }
        }
        debug_assert_eq!(mask.len(), N_MOVES + m + n);
        mask
    }

    pub fn step(&mut self, joint_action: &[usize]) -> Result<StepResult> {
        if self.terminated {
            return Err(Error::EpisodeTerminated);
        }
        let n = self.config.n_agents();
        let m = self.config.n_enemies();
        if joint_action.len() != n {
            return Err(Error::InvalidArgument(format!(
                "joint action has {} entries for {n} agents",
                joint_action.len()
            )));
        }
        for (agent, &action) in joint_action.iter().enumerate() {
            let mask = self.available_actions(agent);
            if action >= mask.len() || !mask[action] {
                return Err(Error::UnavailableAction { agent, action });
            }
        }

        // (1) ally moves in agent order; blocked moves are no-ops.
        for (i, &action) in joint_action.iter().enumerate() {
            if (UP..=RIGHT).contains(&action) {
                let target = Self::move_target(self.allies[i].pos, action);
                if !self.occupied(target) {
                    self.allies[i].pos = target;
                }
            }
        }

        // (2) ally attacks and heals, all decided by the start-of-step mask.
        let enemy_hp_before: Vec<i32> = self.enemies.iter().map(|e| e.health).collect();
        let mut enemy_damage = vec![0i32; m];
        let mut ally_heal = vec![0i32; n];
        for (i, &action) in joint_action.iter().enumerate() {
            let stats = self.allies[i].class.stats();
            if (N_MOVES..N_MOVES + m).contains(&action) {
                enemy_damage[action - N_MOVES] += stats.attack_power;
            } else if action >= N_MOVES + m {
                ally_heal[action - N_MOVES - m] += stats.heal_power;
            }
        }
        for (e, dmg) in self.enemies.iter_mut().zip(&enemy_damage) {
            e.health = (e.health - dmg).max(0);
        }
        for (a, heal) in self.allies.iter_mut().zip(&ally_heal) {
            if a.alive() {
                a.health = (a.health + heal).min(a.class.stats().max_health);
            }
        }

        // (3) scripted enemies: every enemy alive at the start of the step acts.
        let mut ally_damage = vec![0i32; n];
        for (j, &hp) in enemy_hp_before.iter().enumerate() {
            if hp <= 0 {
                continue;
            }
            let epos = self.enemies[j].pos;
            let stats = self.enemies[j].class.stats();
            let nearest = self
                .allies
                .iter()
                .enumerate()
                .filter(|(_, a)| a.alive())
                .min_by_key(|(i, a)| (a.pos.chebyshev(epos), *i));
            let Some((target, ally)) = nearest else { continue };
            if ally.pos.chebyshev(epos) <= stats.attack_range {
                ally_damage[target] += stats.attack_power;
            } else {
                let next = self.enemy_step(epos, ally.pos, j);
                self.enemies[j].pos = next;
            }
        }

        // (4) deaths.
        for (a, dmg) in self.allies.iter_mut().zip(&ally_damage) {
            a.health = (a.health - dmg).max(0);
        }

        let removed: i32 = enemy_hp_before
            .iter()
            .zip(&self.enemies)
            .map(|(before, e)| before - e.health)
            .sum();
        let kills = enemy_hp_before
            .iter()
            .zip(&self.enemies)
            .filter(|(&before, e)| before > 0 && !e.alive())
            .count();
        let total_max: i32 = self.enemies.iter().map(|e| e.class.stats().max_health).sum();

        self.t += 1;
        let won = self.enemies.iter().all(|e| !e.alive());
        let lost = self.allies.iter().all(|a| !a.alive());
        let truncated = !won && !lost && self.t >= self.config.episode_limit;
        self.terminated = won || lost || truncated;

        let mut reward = DAMAGE_SCALE * removed as f64 / total_max as f64 + KILL_BONUS * kills as f64 - LIVING_PENALTY;
        if won {
            reward += WIN_BONUS;
        }
        Ok(self.result(reward, won, truncated))
    }

    /// One cell toward `target`, closing the larger coordinate gap first
    /// (ties prefer the column axis). Falls back to the other axis when the
    /// preferred cell is occupied.
    fn enemy_step(&self, from: Pos, target: Pos, _enemy: usize) -> Pos {
        let dc = target.col - from.col;
        let dr = target.row - from.row;
        let col_step = Pos {
            col: from.col + dc.signum(),
            ..from
        };
        let row_step = Pos {
            row: from.row + dr.signum(),
            ..from
        };
        let order = if dc.abs() >= dr.abs() {
            [(dc != 0, col_step), (dr != 0, row_step)]
        } else {
            [(dr != 0, row_step), (dc != 0, col_step)]
        };
        for (valid, p) in order {
            if valid && !self.occupied(p) {
                return p;
            }
        }
        from
    }

    fn result(&self, reward: f64, won: bool, truncated: bool) -> StepResult {
        let n = self.config.n_agents();
        StepResult {
            observations: (0..n).map(|i| self.observation(i)).collect(),
            state: self.state(),
            reward,
            terminated: self.terminated,
            won,
            truncated,
            available_actions: (0..n).map(|i| self.available_actions(i)).collect(),
        }
    }

    fn norm_coord(&self, v: i32) -> f64 {
        let g = self.config.grid_size;
        if g <= 1 {
            0.0
        } else {
            v as f64 / (g - 1) as f64
        }
    }

    fn push_slot(&self, out: &mut Vec<f64>, me: Pos, unit: &Unit) {
        let sight = self.config.sight_range as i32;
        if unit.alive() && me.chebyshev(unit.pos) <= sight {
            out.push(1.0);
            out.push((unit.pos.col - me.col) as f64 / sight as f64);
            out.push((unit.pos.row - me.row) as f64 / sight as f64);
            out.push(unit.health as f64 / unit.class.stats().max_health as f64);
            push_one_hot(out, unit.class);
        } else {
            out.extend(std::iter::repeat_n(0.0, EnvConfig::SLOT_DIM));
        }
    }

    pub fn observation(&self, agent: usize) -> Vec<f64> {
        let dim = self.config.obs_dim();
        let me = &self.allies[agent];
        if !me.alive() {
            return vec![0.0; dim];
        }
        let mut out = Vec::with_capacity(dim);
        out.push(me.health as f64 / me.class.stats().max_health as f64);
        out.push(self.norm_coord(me.pos.col));
        out.push(self.norm_coord(me.pos.row));
        push_one_hot(&mut out, me.class);
        for (i, other) in self.allies.iter().enumerate() {
            if i != agent {
                self.push_slot(&mut out, me.pos, other);
            }
        }
        for e in &self.enemies {
            self.push_slot(&mut out, me.pos, e);
        }
        debug_assert_eq!(out.len(), dim);
        out
    }

    pub fn state(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.config.state_dim());
        for u in self.allies.iter().chain(&self.enemies) {
            if u.alive() {
                out.push(u.health as f64 / u.class.stats().max_health as f64);
                out.push(self.norm_coord(u.pos.col));
                out.push(self.norm_coord(u.pos.row));
            } else {
                out.extend([0.0; 3]);
            }
            push_one_hot(&mut out, u.class);
        }
        out.push(self.t as f64 / self.config.episode_limit as f64);
        out
    }

    /// Plain-text rendering: `H`/`S`/`M` for heavy/striker/healer (medic),
    /// `g`/`b` for grunt/brute, `.` for empty cells. Dead units are omitted.
    pub fn render(&self) -> String {
        let g = self.config.grid_size;
        let mut grid = vec![vec!['.'; g]; g];
        for u in self.allies.iter().chain(&self.enemies).filter(|u| u.alive()) {
            let ch = match u.class {
                UnitClass::Heavy => 'H',
                UnitClass::Striker => 'S',
                UnitClass::Healer => 'M',
                UnitClass::EnemyGrunt => 'g',
                UnitClass::EnemyBrute => 'b',
            };
            grid[u.pos.row as usize][u.pos.col as usize] = ch;
        }
        let mut s = String::with_capacity(g * (g + 1));
        for row in grid {
            s.extend(row);
            s.push('\n');
        }
        s
    }
}

fn push_one_hot(out: &mut Vec<f64>, class: UnitClass) {
    for c in UnitClass::ALL {
        out.push(if c == class { 1.0 } else { 0.0 });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn easy() -> EnvConfig {
        Preset::Easy.config()
    }

    #[test]
    fn reset_places_units_deterministically() {
        let cfg = EnvConfig::default();
        let (env, r) = RoleArena::reset(&cfg, 0).unwrap();
        assert_eq!(env.allies()[0].pos, Pos { row: 0, col: 0 });
        assert_eq!(env.allies()[1].pos, Pos { row: 0, col: 1 });
        assert_eq!(env.allies()[2].pos, Pos { row: 1, col: 0 });
        assert_eq!(env.enemies()[0].pos, Pos { row: 0, col: 7 });
        assert_eq!(env.enemies()[1].pos, Pos { row: 0, col: 6 });
        assert_eq!(r.reward, 0.0);
        assert!(!r.terminated);
        for o in &r.observations {
            assert_eq!(o[0], 1.0);
            assert_eq!(o.len(), cfg.obs_dim());
        }
        assert_eq!(r.state.len(), cfg.state_dim());
    }

    #[test]
    fn reset_twice_is_identical() {
        let cfg = EnvConfig::default();
        let (_, a) = RoleArena::reset(&cfg, 7).unwrap();
        let (_, b) = RoleArena::reset(&cfg, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn rejects_rosters_that_do_not_fit() {
        let cfg = EnvConfig {
            grid_size: 4,
            ally_roster: vec![UnitClass::Striker; 9],
            sight_range: 4,
            ..EnvConfig::default()
        };
        assert!(RoleArena::reset(&cfg, 0).is_err());
        let cfg = EnvConfig {
            ally_roster: vec![UnitClass::Striker],
            ..EnvConfig::default()
        };
        assert!(RoleArena::reset(&cfg, 0).is_err());
        let cfg = EnvConfig {
            ally_roster: vec![UnitClass::EnemyBrute, UnitClass::Heavy],
            ..EnvConfig::default()
        };
        assert!(RoleArena::reset(&cfg, 0).is_err());
    }

    #[test]
    fn all_stay_out_of_range_costs_living_penalty() {
        let cfg = EnvConfig { grid_size: 8, ..easy() };
        let (mut env, _) = RoleArena::reset(&cfg, 0).unwrap();
        let r = env.step(&[STAY; 3]).unwrap();
        assert_eq!(r.reward, -LIVING_PENALTY);
        assert!(env.allies().iter().all(|a| a.health == 6));
        assert!(env.enemies().iter().all(|e| e.health == 6));
    }

    #[test]
    fn killing_the_last_enemy_wins() {
        let cfg = EnvConfig {
            ally_roster: vec![UnitClass::Striker, UnitClass::Striker],
            enemy_roster: vec![UnitClass::EnemyGrunt],
            grid_size: 6,
            ..EnvConfig::default()
        };
        let (mut env, _) = RoleArena::reset(&cfg, 0).unwrap();
        env.set_health(false, 1, 0);
        env.set_position(true, 0, Pos { row: 0, col: 1 });
        env.set_health(true, 0, 1);
        assert!(env.available_actions(0)[N_MOVES]);
        let r = env.step(&[N_MOVES, STAY]).unwrap();
        assert!(r.terminated && r.won && !r.truncated);
        let expected = 1.0 / 6.0 + KILL_BONUS + WIN_BONUS - LIVING_PENALTY;
        assert!((r.reward - expected).abs() < 1e-12);
        assert!(matches!(env.step(&[STAY, STAY]), Err(Error::EpisodeTerminated)));
    }

    #[test]
    fn masks() {
        let cfg = EnvConfig::default();
        let (mut env, _) = RoleArena::reset(&cfg, 0).unwrap();
        // corner: no UP / LEFT
        let m = env.available_actions(0);
        assert!(m[STAY] && !m[UP] && m[DOWN] && !m[LEFT] && m[RIGHT]);

        // healer (agent 5) with everyone healthy: no heals
        let healer = env.available_actions(5);
        let heal_start = N_MOVES + cfg.n_enemies();
        assert!(healer[heal_start..].iter().all(|&h| !h));
        env.set_health(false, 4, 3);
        let healer = env.available_actions(5);
        // healer at (2,1), striker 4 at (2,0): distance 1
        assert!(healer[heal_start + 4]);
        assert!(!healer[heal_start + 5]);

        // striker adjacent to enemy 0
        env.set_position(false, 2, Pos { row: 0, col: 0 });
        env.set_position(false, 0, Pos { row: 5, col: 3 });
        env.set_position(true, 0, Pos { row: 0, col: 1 });
        env.set_position(false, 1, Pos { row: 5, col: 4 });
        assert!(env.available_actions(2)[N_MOVES]);

        env.set_health(false, 3, 0);
        let dead = env.available_actions(3);
        assert_eq!(dead.iter().filter(|&&x| x).count(), 1);
        assert!(dead[STAY]);
    }

    #[test]
    fn unavailable_action_is_rejected_with_context() {
        let (mut env, _) = RoleArena::reset(&easy(), 0).unwrap();
        match env.step(&[UP, STAY, STAY]) {
            Err(Error::UnavailableAction { agent: 0, action: UP }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn observation_features_are_bounded() {
        let cfg = EnvConfig::default();
        let (mut env, r) = RoleArena::reset(&cfg, 0).unwrap();
        let mut obs = r.observations;
        for _ in 0..20 {
            for o in &obs {
                assert!(o.iter().all(|x| (-1.0..=1.0).contains(x)));
            }
            let acts: Vec<usize> = (0..cfg.n_agents())
                .map(|i| if env.available_actions(i)[RIGHT] { RIGHT } else { STAY })
                .collect();
            let r = env.step(&acts).unwrap();
            obs = r.observations;
            if r.terminated {
                break;
            }
        }
    }

    #[test]
    fn enemy_moves_reduce_larger_gap_first() {
        let cfg = easy();
        let (env, _) = RoleArena::reset(&cfg, 0).unwrap();
        let from = Pos { row: 3, col: 5 };
        assert_eq!(env.enemy_step(from, Pos { row: 5, col: 0 }, 0), Pos { row: 3, col: 4 });
        // preferred cell (0,4) is occupied by enemy 1: fall back to the row axis
        assert_eq!(
            env.enemy_step(Pos { row: 0, col: 5 }, Pos { row: 3, col: 0 }, 0),
            Pos { row: 1, col: 5 }
        );
        assert_eq!(
            env.enemy_step(Pos { row: 5, col: 3 }, Pos { row: 0, col: 1 }, 0),
            Pos { row: 4, col: 3 }
        );
        // tie goes to the column axis
        assert_eq!(
            env.enemy_step(Pos { row: 4, col: 4 }, Pos { row: 2, col: 2 }, 0),
            Pos { row: 4, col: 3 }
        );
    }
}
