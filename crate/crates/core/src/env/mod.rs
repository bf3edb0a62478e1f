//! Event-augmented multi-agent particle world.
//!
//! Three cooperative tasks share one kinematic core: Dispersion (visit every
//! goal), Pressure Plate (open a door for teammates, cross, regroup) and Wind
//! Flocking (a large agent shields a small one while both travel upwind).
//! Stepping is a pure function of state and actions.

pub mod geometry;
pub mod perturb;
pub mod scripted;
pub mod trajectory;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Error, Result};
use crate::event::{merge_events, EventRecord, Signal, MAX_TEAM};
use geometry::{resolve_walls, Rect};

pub use perturb::{apply_perturbation, parse_perturbations, PerturbAction, Perturbation, PerturbationPlan, Trigger};

pub type Vec2 = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Dispersion,
    PressurePlate,
    WindFlocking,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Dispersion => "dispersion",
            TaskKind::PressurePlate => "pressure_plate",
            TaskKind::WindFlocking => "wind_flocking",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dispersion" => Ok(TaskKind::Dispersion),
            "pressure_plate" => Ok(TaskKind::PressurePlate),
            "wind_flocking" => Ok(TaskKind::WindFlocking),
            other => config(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConfig {
    pub dt: f64,
    pub drag: f64,
    /// Largest displacement per step at capability 1.
    pub max_step: f64,
    /// Velocity change per step at full throttle and capability 1.
    pub accel: f64,
    pub agent_radius: f64,
    pub goal_radius: f64,
    pub plate_radius: f64,
    /// Velocity change per step imposed by unshielded wind.
    pub wind_magnitude: f64,
    pub shield_half_angle_deg: f64,
    pub shield_range: f64,
    pub shield_factor: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            drag: 0.95,
            max_step: 0.05,
            accel: 0.2,
            agent_radius: 0.03,
            goal_radius: 0.05,
            plate_radius: 0.08,
            wind_magnitude: 0.08,
            shield_half_angle_deg: 30.0,
            shield_range: 0.2,
            shield_factor: 0.2,
        }
    }
}

impl PhysicsConfig {
    pub fn max_speed(&self, capability: f64) -> f64 {
        self.max_step / self.dt * capability
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub goal_visit: f64,
    pub dispersion_completion: f64,
    /// Weight of the per-phase distance shaping in Pressure Plate.
    pub plate_distance: f64,
    pub plate_completion: f64,
    pub cohesion: f64,
    pub energy: f64,
    pub flock_goal: f64,
    pub flock_completion: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            goal_visit: 1.0,
            dispersion_completion: 5.0,
            plate_distance: 0.05,
            plate_completion: 10.0,
            cohesion: 0.2,
            energy: 1.0,
            flock_goal: 0.05,
            flock_completion: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub agents: usize,
    pub goals: usize,
    pub horizon: usize,
    pub physics: PhysicsConfig,
    pub rewards: RewardConfig,
    pub seed: u64,
}

/// Pressure Plate layout.
pub mod plate_layout {
    use super::Vec2;

    pub const WALL_HALF_WIDTH: f64 = 0.05;
    pub const DOOR_HALF_GAP: f64 = 0.15;
    pub const PLATE_1: Vec2 = [-0.45, 0.45];
    pub const PLATE_2: Vec2 = [0.45, 0.45];
    pub const DOOR: Vec2 = [0.0, 0.0];
    pub const GOAL: Vec2 = [0.55, -0.45];
    pub const GOAL_ZONE: f64 = 0.15;
    pub const SPAWN: Vec2 = [-0.55, -0.45];
    /// Just past the door on the goal side.
    pub const DOOR_EXIT: Vec2 = [0.15, 0.0];
    /// Shaping cost per agent still on the start side. It exceeds the largest
    /// jump in phase distance when an agent crosses.
    pub const START_SIDE_COST: f64 = 2.0;
}

/// Wind Flocking layout.
pub mod flock_layout {
    use super::Vec2;

    pub const SPAWN: Vec2 = [0.0, -0.6];
    pub const GOAL: Vec2 = [0.0, 0.6];
    pub const GOAL_ZONE: f64 = 0.15;
    pub const COHESION_SLACK: f64 = 0.15;
    pub const CAPABILITIES: [f64; 2] = [1.0, 0.6];
}

impl TaskConfig {
    pub fn dispersion(agents: usize, goals: usize) -> Self {
        Self {
            task: TaskKind::Dispersion,
            agents,
            goals,
            horizon: 200,
            physics: PhysicsConfig::default(),
            rewards: RewardConfig::default(),
            seed: 0,
        }
    }

    pub fn pressure_plate() -> Self {
        Self {
            task: TaskKind::PressurePlate,
            agents: 3,
            goals: 4,
            horizon: 200,
            physics: PhysicsConfig::default(),
            rewards: RewardConfig::default(),
            seed: 0,
        }
    }

    pub fn wind_flocking() -> Self {
        Self {
            task: TaskKind::WindFlocking,
            agents: 2,
            goals: 1,
            horizon: 200,
            physics: PhysicsConfig::default(),
            rewards: RewardConfig::default(),
            seed: 0,
        }
    }

    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Dispersion => Self::dispersion(2, 2),
            TaskKind::PressurePlate => Self::pressure_plate(),
            TaskKind::WindFlocking => Self::wind_flocking(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 || self.agents > MAX_TEAM {
            return config(format!("agent count {} outside 1..={MAX_TEAM}", self.agents));
        }
        if self.horizon == 0 {
            return config("horizon must be positive");
        }
        match self.task {
            TaskKind::Dispersion if self.goals == 0 => return config("dispersion needs at least one goal"),
            TaskKind::PressurePlate if self.goals != 4 => {
                return config("pressure_plate uses exactly 4 goal slots (plate 1, plate 2, door, goal)")
            }
            TaskKind::WindFlocking if self.agents != 2 || self.goals != 1 => {
                return config("wind_flocking uses 2 agents and 1 goal")
            }
            _ => {}
        }
        let p = &self.physics;
        for (name, v) in [
            ("dt", p.dt),
            ("max_step", p.max_step),
            ("accel", p.accel),
            ("agent_radius", p.agent_radius),
            ("goal_radius", p.goal_radius),
            ("plate_radius", p.plate_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return config(format!("physics constant {name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&p.drag) {
            return config("drag must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&p.shield_factor) {
            return config("shield factor must lie in [0, 1)");
        }
        Ok(())
    }

    /// Task-flag slots after the goal vectors.
    pub fn flag_width(&self) -> usize {
        match self.task {
            TaskKind::Dispersion => self.goals,
            TaskKind::PressurePlate => 3,
            TaskKind::WindFlocking => 5,
        }
    }

    /// Observation width: velocity, position, capability, goal vectors, flags.
    pub fn obs_width(&self) -> usize {
        5 + 2 * self.goals + self.flag_width()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PomgState {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub capabilities: Vec<f64>,
    pub live: Vec<bool>,
    /// Dispersion goals, Pressure Plate landmarks or the flocking target.
    pub goals: Vec<Vec2>,
    pub goal_visited: Vec<bool>,
    pub plates: [bool; 2],
    pub door_open: bool,
    pub wind: Vec2,
    /// Per-agent shielding flags from the last step.
    pub shielded: Vec<bool>,
    pub diversity_target: f64,
    pub timestep: usize,
    pub completed: bool,
}

impl PomgState {
    pub fn live_agents(&self) -> Vec<usize> {
        (0..self.live.len()).filter(|&i| self.live[i]).collect()
    }

    pub fn live_count(&self) -> usize {
        self.live.iter().filter(|&&l| l).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: PomgState,
    pub observations: Vec<Vec<f64>>,
    pub reward: f64,
    pub event: EventRecord,
    pub done: bool,
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

/// Seed of environment instance `index` in a batch seeded with `seed`.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn reset(config: &TaskConfig, seed: u64) -> Result<(PomgState, Vec<Vec<f64>>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.agents;
    let jitter = |scale: f64, rng: &mut ChaCha8Rng| [rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)];
    let (positions, capabilities, goals, wind) = match config.task {
        TaskKind::Dispersion => {
            let positions = (0..n).map(|_| jitter(0.05, &mut rng)).collect();
            let mut goals: Vec<Vec2> = Vec::with_capacity(config.goals);
            while goals.len() < config.goals {
                let g = [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)];
                if norm(g) >= 0.3 && goals.iter().all(|&h| dist(g, h) >= 0.2) {
                    goals.push(g);
                }
            }
            (positions, vec![1.0; n], goals, [0.0, 0.0])
        }
        TaskKind::PressurePlate => {
            use plate_layout::*;
            let positions = (0..n)
                .map(|i| {
                    let j = jitter(0.03, &mut rng);
                    [SPAWN[0] + j[0] + 0.08 * (i as f64 - 1.0), SPAWN[1] + j[1]]
                })
                .collect();
            (positions, vec![1.0; n], vec![PLATE_1, PLATE_2, DOOR, GOAL], [0.0, 0.0])
        }
        TaskKind::WindFlocking => {
            use flock_layout::*;
            let positions = (0..n)
                .map(|i| {
                    let j = jitter(0.03, &mut rng);
                    [SPAWN[0] + j[0] + 0.2 * (i as f64 - 0.5), SPAWN[1] + j[1]]
                })
                .collect();
            (
                positions,
                CAPABILITIES.to_vec(),
                vec![GOAL],
                [0.0, -config.physics.wind_magnitude],
            )
        }
    };
    let state = PomgState {
        positions,
        velocities: vec![[0.0, 0.0]; n],
        capabilities,
        live: vec![true; n],
        goal_visited: vec![false; goals.len()],
        goals,
        plates: [false, false],
        door_open: false,
        wind,
        shielded: vec![false; n],
        diversity_target: 0.0,
        timestep: 0,
        completed: false,
    };
    let obs = observe(config, &state);
    Ok((state, obs))
}

/// Observations of the live agents, in agent order.
pub fn observe(config: &TaskConfig, state: &PomgState) -> Vec<Vec<f64>> {
    state
        .live_agents()
        .into_iter()
        .map(|i| observe_agent(config, state, i))
        .collect()
}

pub fn observe_agent(config: &TaskConfig, state: &PomgState, i: usize) -> Vec<f64> {
    let p = state.positions[i];
    let v = state.velocities[i];
    let mut o = Vec::with_capacity(config.obs_width());
    o.extend_from_slice(&v);
    o.extend_from_slice(&p);
    o.push(state.capabilities[i]);
    for g in &state.goals {
        o.extend_from_slice(&sub(*g, p));
    }
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    match config.task {
        TaskKind::Dispersion => o.extend(state.goal_visited.iter().map(|&b| flag(b))),
        TaskKind::PressurePlate => {
            o.extend([flag(state.plates[0]), flag(state.plates[1]), flag(state.door_open)]);
        }
        TaskKind::WindFlocking => {
            let scale = config.physics.wind_magnitude.max(1e-12);
            o.extend([state.wind[0] / scale, state.wind[1] / scale, flag(state.shielded[i])]);
            let mate = state
                .live_agents()
                .into_iter()
                .filter(|&j| j != i)
                .min_by(|&a, &b| dist(state.positions[a], p).total_cmp(&dist(state.positions[b], p)));
            o.extend_from_slice(&mate.map_or([0.0, 0.0], |j| sub(state.positions[j], p)));
        }
    }
    o
}

/// Walls of the Pressure Plate map given the door state (unexpanded).
pub fn plate_walls(door_open: bool) -> Vec<Rect> {
    use plate_layout::*;
    let w = WALL_HALF_WIDTH;
    if door_open {
        vec![
            Rect::new(-w, DOOR_HALF_GAP, w, 1.0 + w),
            Rect::new(-w, -1.0 - w, w, -DOOR_HALF_GAP),
        ]
    } else {
        vec![Rect::new(-w, -1.0 - w, w, 1.0 + w)]
    }
}

/// Whether agent `j` sits in the downwind cone of a live agent with larger
/// capability.
pub fn is_shielded(physics: &PhysicsConfig, state: &PomgState, j: usize) -> bool {
    let wn = norm(state.wind);
    if wn == 0.0 {
        return false;
    }
    let dir = [state.wind[0] / wn, state.wind[1] / wn];
    let cos_limit = physics.shield_half_angle_deg.to_radians().cos();
    state.live_agents().into_iter().any(|i| {
        if i == j || state.capabilities[i] <= state.capabilities[j] {
            return false;
        }
        let v = sub(state.positions[j], state.positions[i]);
        let d = norm(v);
        d > 0.0 && d <= physics.shield_range && (v[0] * dir[0] + v[1] * dir[1]) / d >= cos_limit
    })
}

fn on_plate(config: &TaskConfig, state: &PomgState, plate: Vec2) -> bool {
    state
        .live_agents()
        .into_iter()
        .any(|i| dist(state.positions[i], plate) <= config.physics.plate_radius)
}

/// Left (start) side of the Pressure Plate wall.
pub fn on_start_side(pos: Vec2) -> bool {
    pos[0] < 0.0
}

fn plate_cost(state: &PomgState) -> f64 {
    use plate_layout::*;
    let live = state.live_agents();
    let (left, right): (Vec<usize>, Vec<usize>) = live.iter().partition(|&&i| on_start_side(state.positions[i]));
    START_SIDE_COST * left.len() as f64 + phase_distance(state, &left, &right)
}

fn phase_distance(state: &PomgState, left: &[usize], right: &[usize]) -> f64 {
    use plate_layout::*;
    let p = |i: usize| state.positions[i];
    let nearest = |set: &[usize], target: Vec2| {
        set.iter()
            .copied()
            .min_by(|&a, &b| dist(p(a), target).total_cmp(&dist(p(b), target)))
    };
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let (s, c) = it.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    };
    if right.is_empty() {
        let Some(h) = nearest(&left, PLATE_1) else { return 0.0 };
        dist(p(h), PLATE_1) + mean(&mut left.iter().filter(|&&i| i != h).map(|&i| dist(p(i), DOOR_EXIT)))
    } else if !left.is_empty() {
        let h2 = nearest(&right, PLATE_2).expect("right side non-empty");
        dist(p(h2), PLATE_2)
            + mean(&mut left.iter().map(|&i| dist(p(i), DOOR_EXIT)))
            + mean(&mut right.iter().filter(|&&i| i != h2).map(|&i| dist(p(i), GOAL)))
    } else {
        mean(&mut right.iter().map(|&i| dist(p(i), GOAL)))
    }
}

/// Advances one step. `actions` holds one 2-D action per live agent.
pub fn step(config: &TaskConfig, state: &PomgState, actions: &[Vec2]) -> Result<StepOutcome> {
    let live = state.live_agents();
    if actions.len() != live.len() {
        return usage(format!(
            "{} actions supplied for {} live agents",
            actions.len(),
            live.len()
        ));
    }
    if state.timestep >= config.horizon {
        return usage("episode already reached its horizon");
    }
    let phys = &config.physics;
    let mut next = state.clone();
    let mut energy = 0.0;
    for (&i, a) in live.iter().zip(actions) {
        let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        let cap = state.capabilities[i];
        let mut v = state.velocities[i];
        let push = phys.accel * cap;
        v[0] = phys.drag * v[0] + push * a[0];
        v[1] = phys.drag * v[1] + push * a[1];
        if config.task == TaskKind::WindFlocking {
            let exposure = if state.shielded[i] { phys.shield_factor } else { 1.0 };
            v[0] += state.wind[0] * exposure;
            v[1] += state.wind[1] * exposure;
            let wn = norm(state.wind);
            if wn > 0.0 {
                let against = -(a[0] * state.wind[0] + a[1] * state.wind[1]) / wn;
                energy += (push * against.max(0.0)).powi(2);
            }
        }
        let speed = norm(v);
        let cap_speed = phys.max_speed(cap);
        if speed > cap_speed {
            v = [v[0] * cap_speed / speed, v[1] * cap_speed / speed];
        }
        let bound = 1.0 - phys.agent_radius;
        let mut p = [state.positions[i][0] + phys.dt * v[0], state.positions[i][1] + phys.dt * v[1]];
        for k in 0..2 {
            if p[k].abs() > bound {
                p[k] = p[k].clamp(-bound, bound);
                v[k] = 0.0;
            }
        }
        next.positions[i] = p;
        next.velocities[i] = v;
    }

    let mut reward = 0.0;
    match config.task {
        TaskKind::Dispersion => {
            let reach = phys.goal_radius + phys.agent_radius;
            for g in 0..next.goals.len() {
                if !next.goal_visited[g] && live.iter().any(|&i| dist(next.positions[i], next.goals[g]) <= reach) {
                    next.goal_visited[g] = true;
                    reward += config.rewards.goal_visit;
                }
            }
            if next.goal_visited.iter().all(|&v| v) {
                next.completed = true;
                reward += config.rewards.dispersion_completion;
            }
        }
        TaskKind::PressurePlate => {
            next.plates = [
                on_plate(config, &next, plate_layout::PLATE_1),
                on_plate(config, &next, plate_layout::PLATE_2),
            ];
            next.door_open = next.plates[0] || next.plates[1];
            let walls = plate_walls(next.door_open);
            for &i in &live {
                let (p, blocked) = resolve_walls(state.positions[i], next.positions[i], &walls, phys.agent_radius);
                next.positions[i] = p;
                for (k, b) in blocked.iter().enumerate() {
                    if *b {
                        next.velocities[i][k] = 0.0;
                    }
                }
            }
            // Plates are far from the wall, so resolution cannot change them.
            reward -= config.rewards.plate_distance * plate_cost(&next);
            if live
                .iter()
                .all(|&i| dist(next.positions[i], plate_layout::GOAL) <= plate_layout::GOAL_ZONE)
            {
                next.completed = true;
                reward += config.rewards.plate_completion;
            }
        }
        TaskKind::WindFlocking => {
            use flock_layout::*;
            let n = live.len().max(1) as f64;
            let mean_goal: f64 = live.iter().map(|&i| dist(next.positions[i], GOAL)).sum::<f64>() / n;
            let mut spread = 0.0;
            for (k, &i) in live.iter().enumerate() {
                for &j in &live[k + 1..] {
                    spread += (dist(next.positions[i], next.positions[j]) - COHESION_SLACK).max(0.0);
                }
            }
            reward -= config.rewards.flock_goal * mean_goal
                + config.rewards.cohesion * spread
                + config.rewards.energy * energy;
            if live.iter().all(|&i| dist(next.positions[i], GOAL) <= GOAL_ZONE) {
                next.completed = true;
                reward += config.rewards.flock_completion;
            }
            let shielded: Vec<bool> = (0..next.live.len()).map(|j| is_shielded(phys, &next, j)).collect();
            next.shielded = shielded;
        }
    }
    next.timestep = state.timestep + 1;
    let event = detect_events(state, &next);
    let done = next.completed || next.timestep >= config.horizon;
    let observations = observe(config, &next);
    Ok(StepOutcome {
        state: next,
        observations,
        reward,
        event,
        done,
    })
}

/// Maps monitored predicate changes between consecutive states to one event.
pub fn detect_events(prev: &PomgState, curr: &PomgState) -> EventRecord {
    let t = prev.timestep;
    let mut ev = EventRecord::null(t);
    let mut offer = |e: EventRecord| {
        ev = merge_events(std::mem::replace(&mut ev, EventRecord::null(t)), e);
    };
    if let Some(i) = (0..prev.live.len()).find(|&i| prev.live[i] && !curr.live[i]) {
        offer(EventRecord::agent_removed(i, t));
    }
    if let Some(i) = (0..prev.capabilities.len()).find(|&i| prev.capabilities[i] != curr.capabilities[i]) {
        offer(EventRecord::capability_changed(i, curr.capabilities[i], t));
    }
    if prev.diversity_target != curr.diversity_target {
        offer(EventRecord::target_changed(curr.diversity_target, t));
    }
    if prev.door_open != curr.door_open {
        let s = if curr.door_open { Signal::DoorOpened } else { Signal::DoorClosed };
        offer(EventRecord::signal(s, t));
    }
    if prev.plates[0] != curr.plates[0] {
        let s = if curr.plates[0] { Signal::Plate1On } else { Signal::Plate1Off };
        offer(EventRecord::signal(s, t));
    }
    if prev.plates[1] != curr.plates[1] {
        let s = if curr.plates[1] { Signal::Plate2On } else { Signal::Plate2Off };
        offer(EventRecord::signal(s, t));
    }
    if prev.goal_visited.iter().zip(&curr.goal_visited).any(|(a, b)| a != b) {
        offer(EventRecord::signal(Signal::GoalReached, t));
    }
    ev
}

/// Steps with the perturbation plan applied to the post-physics state.
pub fn step_with_plan(
    config: &TaskConfig,
    state: &PomgState,
    actions: &[Vec2],
    plan: &mut PerturbationPlan,
) -> Result<StepOutcome> {
    let out = step(config, state, actions)?;
    if plan.is_empty() {
        return Ok(out);
    }
    let mut next = out.state;
    let pev = apply_perturbation(config, &mut next, plan, state.timestep)?;
    let event = merge_events(out.event, pev);
    let observations = observe(config, &next);
    Ok(StepOutcome {
        done: next.completed || next.timestep >= config.horizon,
        state: next,
        observations,
        reward: out.reward,
        event,
    })
}

/// Steps independent environment instances in parallel.
pub fn step_batch(config: &TaskConfig, states: &[PomgState], actions: &[Vec<Vec2>]) -> Result<Vec<StepOutcome>> {
    if states.len() != actions.len() {
        return usage(format!(
            "{} action sets for {} environments",
            actions.len(),
            states.len()
        ));
    }
    states
        .par_iter()
        .zip(actions.par_iter())
        .map(|(s, a)| step(config, s, a))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        let c = TaskConfig::dispersion(2, 2);
        assert_eq!(reset(&c, 7).unwrap(), reset(&c, 7).unwrap());
        assert_ne!(reset(&c, 7).unwrap().1, reset(&c, 8).unwrap().1);
    }

    #[test]
    fn observation_width_is_uniform() {
        for task in [TaskKind::Dispersion, TaskKind::PressurePlate, TaskKind::WindFlocking] {
            let c = TaskConfig::for_task(task);
            let (_, obs) = reset(&c, 1).unwrap();
            assert!(obs.iter().all(|o| o.len() == c.obs_width()), "{task}");
        }
    }

    #[test]
    fn pressure_plate_starts_closed() {
        let c = TaskConfig::pressure_plate();
        let (s, obs) = reset(&c, 3).unwrap();
        assert_eq!(obs.len(), 3);
        assert!(s.positions.iter().all(|&p| on_start_side(p)));
        assert!(!s.door_open && s.plates == [false, false]);
    }

    #[test]
    fn wind_flocking_has_distinct_sizes_and_wind() {
        let (s, _) = reset(&TaskConfig::wind_flocking(), 0).unwrap();
        assert_ne!(s.capabilities[0], s.capabilities[1]);
        assert!(norm(s.wind) > 0.0);
    }

    #[test]
    fn zero_action_only_decays_velocity() {
        let c = TaskConfig::dispersion(1, 1);
        let (mut s, _) = reset(&c, 0).unwrap();
        s.velocities[0] = [0.2, -0.1];
        let out = step(&c, &s, &[[0.0, 0.0]]).unwrap();
        let v = out.state.velocities[0];
        assert!((v[0] - 0.19).abs() < 1e-12 && (v[1] + 0.095).abs() < 1e-12);
        let still = {
            let (s, _) = reset(&c, 0).unwrap();
            step(&c, &s, &[[0.0, 0.0]]).unwrap()
        };
        assert_eq!(still.state.positions, reset(&c, 0).unwrap().0.positions);
    }

    #[test]
    fn action_count_mismatch_is_usage_error() {
        let c = TaskConfig::dispersion(2, 2);
        let (s, _) = reset(&c, 0).unwrap();
        assert!(matches!(step(&c, &s, &[[0.0, 0.0]]), Err(Error::Usage(_))));
    }

    #[test]
    fn goal_entry_rewards_once_and_signals() {
        let c = TaskConfig::dispersion(1, 2);
        let (mut s, _) = reset(&c, 0).unwrap();
        s.positions[0] = [s.goals[0][0] - 0.07, s.goals[0][1]];
        s.velocities[0] = [0.3, 0.0];
        let out = step(&c, &s, &[[1.0, 0.0]]).unwrap();
        assert_eq!(out.reward, 1.0);
        assert_eq!(out.event.signal_code(), Some(Signal::GoalReached));
        let again = step(&c, &out.state, &[[0.0, 0.0]]).unwrap();
        assert_eq!(again.reward, 0.0);
        assert!(again.event.is_null());
    }

    #[test]
    fn instance_seeds_differ() {
        assert_ne!(instance_seed(1, 0), instance_seed(1, 1));
        assert_eq!(instance_seed(4, 2), instance_seed(4, 2));
    }
}
