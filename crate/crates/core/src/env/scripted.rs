//! Hand-written reference controllers.

use super::{dist, on_start_side, plate_layout::*, PhysicsConfig, PomgState, TaskConfig, Vec2};

/// Action that steers agent `i` towards `target`, braking on approach.
pub fn seek_action(physics: &PhysicsConfig, state: &PomgState, i: usize, target: Vec2) -> Vec2 {
    let p = state.positions[i];
    let v = state.velocities[i];
    let cap = state.capabilities[i];
    let vmax = physics.max_speed(cap);
    let mut want = [2.0 * (target[0] - p[0]), 2.0 * (target[1] - p[1])];
    let speed = want[0].hypot(want[1]);
    if speed > vmax {
        want = [want[0] * vmax / speed, want[1] * vmax / speed];
    }
    let push = physics.accel * cap;
    [
        ((want[0] - physics.drag * v[0]) / push).clamp(-1.0, 1.0),
        ((want[1] - physics.drag * v[1]) / push).clamp(-1.0, 1.0),
    ]
}

const APPROACH: Vec2 = [-0.2, 0.0];

fn on_goal_side(p: Vec2) -> bool {
    p[0] > 0.1
}

/// Moves a start-side agent through the door once it is open.
fn cross(cfg: &TaskConfig, state: &PomgState, i: usize) -> Vec2 {
    let p = state.positions[i];
    let lined_up = p[1].abs() < 0.05 && p[0] > -0.3;
    let target = if state.door_open && lined_up { [0.25, 0.0] } else { APPROACH };
    seek_action(&cfg.physics, state, i, target)
}

/// Three-phase Pressure Plate script with fixed roles: agent 0 holds
/// plate 1, agent 1 crosses and holds plate 2 until agent 0 is through,
/// agent 2 crosses and heads for the goal.
pub fn pressure_plate_actions(cfg: &TaskConfig, state: &PomgState) -> Vec<Vec2> {
    let live = |i: usize| state.live.get(i).copied().unwrap_or(false);
    let pos = |i: usize| state.positions[i];
    let seek = |i: usize, t: Vec2| seek_action(&cfg.physics, state, i, t);
    state
        .live_agents()
        .into_iter()
        .map(|i| {
            let left = on_start_side(pos(i)) && !on_goal_side(pos(i));
            match i {
                0 => {
                    let relieved = !live(1)
                        || (on_goal_side(pos(1)) && dist(pos(1), PLATE_2) <= cfg.physics.plate_radius);
                    if !on_start_side(pos(0)) {
                        seek(0, GOAL)
                    } else if relieved {
                        cross(cfg, state, 0)
                    } else {
                        seek(0, PLATE_1)
                    }
                }
                1 => {
                    if left {
                        cross(cfg, state, 1)
                    } else if !on_start_side(pos(1)) && !on_goal_side(pos(1)) {
                        seek(1, [0.25, 0.0])
                    } else if live(0) && on_start_side(pos(0)) {
                        seek(1, PLATE_2)
                    } else {
                        seek(1, GOAL)
                    }
                }
                _ => {
                    if on_start_side(pos(i)) {
                        cross(cfg, state, i)
                    } else {
                        seek(i, GOAL)
                    }
                }
            }
        })
        .collect()
}
