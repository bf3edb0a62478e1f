//! Evaluation-time perturbations: agent removal, capability changes and
//! diversity-target changes.
//!
//! Spec syntax, comma separated:
//! `remove:<agent|first_on_plate2>@<t|first_on_plate2>`,
//! `target:<value>@<t>`, `capability:<agent>=<value>@<t>`.
//! The trigger of `remove:first_on_plate2` may be omitted.

use super::{dist, plate_layout, PomgState, TaskConfig, TaskKind};
use crate::error::{config, usage, Result};
use crate::event::{merge_events, EventRecord};

const FIRST_ON_PLATE2: &str = "first_on_plate2";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AgentSelector {
    Index(usize),
    /// The first live agent found standing on plate 2.
    FirstOnPlate2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trigger {
    At(usize),
    /// First step after which some live agent stands on plate 2.
    FirstOnPlate2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PerturbAction {
    Remove(AgentSelector),
    Target(f64),
    Capability { agent: usize, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub action: PerturbAction,
    pub trigger: Trigger,
}

/// Perturbations with per-episode latches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerturbationPlan {
    items: Vec<Perturbation>,
    fired: Vec<bool>,
}

impl PerturbationPlan {
    pub fn new(items: Vec<Perturbation>) -> Self {
        let fired = vec![false; items.len()];
        Self { items, fired }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Perturbation] {
        &self.items
    }

    /// Re-arms every latch for a new episode.
    pub fn rearm(&mut self) {
        self.fired.iter_mut().for_each(|f| *f = false);
    }

    pub fn validate(&self, cfg: &TaskConfig) -> Result<()> {
        for p in &self.items {
            let conditional = matches!(p.trigger, Trigger::FirstOnPlate2)
                || matches!(p.action, PerturbAction::Remove(AgentSelector::FirstOnPlate2));
            if conditional && cfg.task != TaskKind::PressurePlate {
                return config("plate-2 conditions apply only to pressure_plate");
            }
            if let Trigger::At(t) = p.trigger {
                if t >= cfg.horizon {
                    return config(format!("perturbation at t={t} lies beyond horizon {}", cfg.horizon));
                }
            }
            match p.action {
                PerturbAction::Remove(AgentSelector::Index(a)) | PerturbAction::Capability { agent: a, .. }
                    if a >= cfg.agents =>
                {
                    return config(format!("perturbation names agent {a} of {}", cfg.agents));
                }
                PerturbAction::Target(v) if !(v >= 0.0 && v.is_finite()) => {
                    return config(format!("diversity target {v} must be finite and nonnegative"));
                }
                PerturbAction::Capability { value, .. } if !(value > 0.0 && value.is_finite()) => {
                    return config(format!("capability {value} must be positive"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn first_on_plate2(cfg: &TaskConfig, state: &PomgState) -> Option<usize> {
    state
        .live_agents()
        .into_iter()
        .find(|&i| dist(state.positions[i], plate_layout::PLATE_2) <= cfg.physics.plate_radius)
}

/// Applies every perturbation due after step `t` and returns the
/// highest-priority resulting event (or `Null`).
pub fn apply_perturbation(
    cfg: &TaskConfig,
    state: &mut PomgState,
    plan: &mut PerturbationPlan,
    t: usize,
) -> Result<EventRecord> {
    let mut ev = EventRecord::null(t);
    for k in 0..plan.items.len() {
        if plan.fired[k] {
            continue;
        }
        let p = plan.items[k];
        let due = match p.trigger {
            Trigger::At(at) => at == t,
            Trigger::FirstOnPlate2 => first_on_plate2(cfg, state).is_some(),
        };
        if !due {
            continue;
        }
        let fired = match p.action {
            PerturbAction::Remove(sel) => {
                let agent = match sel {
                    AgentSelector::Index(a) => Some(a),
                    AgentSelector::FirstOnPlate2 => first_on_plate2(cfg, state),
                };
                match agent {
                    Some(a) => {
                        if !state.live.get(a).copied().unwrap_or(false) {
                            return usage(format!("agent {a} is not live"));
                        }
                        if state.live_count() == 1 {
                            return usage("cannot remove the last live agent");
                        }
                        state.live[a] = false;
                        state.velocities[a] = [0.0, 0.0];
                        Some(EventRecord::agent_removed(a, t))
                    }
                    None => None,
                }
            }
            PerturbAction::Target(v) => {
                state.diversity_target = v;
                Some(EventRecord::target_changed(v, t))
            }
            PerturbAction::Capability { agent, value } => {
                state.capabilities[agent] = value;
                Some(EventRecord::capability_changed(agent, value, t))
            }
        };
        if let Some(e) = fired {
            plan.fired[k] = true;
            ev = merge_events(ev, e);
        }
    }
    Ok(ev)
}

fn parse_index(s: &str, what: &str, spec: &str) -> Result<usize> {
    s.trim()
        .parse()
        .or_else(|_| config(format!("bad {what} `{s}` in perturbation `{spec}`")))
}

fn parse_value(s: &str, spec: &str) -> Result<f64> {
    s.trim()
        .parse()
        .or_else(|_| config(format!("bad value `{s}` in perturbation `{spec}`")))
}

fn parse_one(spec: &str) -> Result<Perturbation> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| crate::Error::Config(format!("perturbation `{spec}` lacks `kind:`")))?;
    let (body, when) = match rest.split_once('@') {
        Some((b, w)) => (b.trim(), Some(w.trim())),
        None => (rest.trim(), None),
    };
    let trigger = |when: Option<&str>| -> Result<Trigger> {
        match when {
            Some(FIRST_ON_PLATE2) => Ok(Trigger::FirstOnPlate2),
            Some(t) => Ok(Trigger::At(parse_index(t, "timestep", spec)?)),
            None => config(format!("perturbation `{spec}` needs `@<t>`")),
        }
    };
    match kind.trim() {
        "remove" => {
            if body == FIRST_ON_PLATE2 {
                let trigger = match when {
                    None | Some(FIRST_ON_PLATE2) => Trigger::FirstOnPlate2,
                    Some(_) => return config(format!("`{FIRST_ON_PLATE2}` removal takes no timestep in `{spec}`")),
                };
                Ok(Perturbation {
                    action: PerturbAction::Remove(AgentSelector::FirstOnPlate2),
                    trigger,
                })
            } else {
                Ok(Perturbation {
                    action: PerturbAction::Remove(AgentSelector::Index(parse_index(body, "agent", spec)?)),
                    trigger: trigger(when)?,
                })
            }
        }
        "target" => Ok(Perturbation {
            action: PerturbAction::Target(parse_value(body, spec)?),
            trigger: trigger(when)?,
        }),
        "capability" => {
            let (a, v) = body
                .split_once('=')
                .ok_or_else(|| crate::Error::Config(format!("capability perturbation `{spec}` needs `agent=value`")))?;
            Ok(Perturbation {
                action: PerturbAction::Capability {
                    agent: parse_index(a, "agent", spec)?,
                    value: parse_value(v, spec)?,
                },
                trigger: trigger(when)?,
            })
        }
        other => config(format!("unknown perturbation kind `{other}`")),
    }
}

pub fn parse_perturbations(spec: &str) -> Result<PerturbationPlan> {
    let items = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_one)
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationPlan::new(items))
}
