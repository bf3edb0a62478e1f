//! Typed events and their fixed-width encoding.

use serde::{Deserialize, Serialize};

/// Largest team the encodings and the critic input are sized for.
pub const MAX_TEAM: usize = 8;
/// Payload slots after the kind one-hot.
pub const PAYLOAD_WIDTH: usize = 7;
pub const KIND_COUNT: usize = 5;
/// Width of [`encode_event`] output.
pub const EVENT_WIDTH: usize = KIND_COUNT + PAYLOAD_WIDTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Null,
    AgentRemoved,
    CapabilityChanged,
    DiversityTargetChanged,
    EnvSignal,
}

impl EventKind {
    pub fn index(self) -> usize {
        match self {
            EventKind::Null => 0,
            EventKind::AgentRemoved => 1,
            EventKind::CapabilityChanged => 2,
            EventKind::DiversityTargetChanged => 3,
            EventKind::EnvSignal => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Null => "null",
            EventKind::AgentRemoved => "agent_removed",
            EventKind::CapabilityChanged => "capability_changed",
            EventKind::DiversityTargetChanged => "diversity_target_changed",
            EventKind::EnvSignal => "env_signal",
        }
    }
}

/// Environment-originated signal codes, one-hot in the payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Plate1On,
    Plate1Off,
    Plate2On,
    Plate2Off,
    DoorOpened,
    DoorClosed,
    GoalReached,
}

impl Signal {
    pub const ALL: [Signal; 7] = [
        Signal::Plate1On,
        Signal::Plate1Off,
        Signal::Plate2On,
        Signal::Plate2Off,
        Signal::DoorOpened,
        Signal::DoorClosed,
        Signal::GoalReached,
    ];

    pub fn code(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub kind: EventKind,
    pub payload: Vec<f64>,
    /// Step index during which the event occurred.
    pub timestep: usize,
}

impl EventRecord {
    pub fn null(timestep: usize) -> Self {
        Self {
            kind: EventKind::Null,
            payload: Vec::new(),
            timestep,
        }
    }

    pub fn agent_removed(agent: usize, timestep: usize) -> Self {
        Self {
            kind: EventKind::AgentRemoved,
            payload: vec![agent as f64 / MAX_TEAM as f64],
            timestep,
        }
    }

    pub fn capability_changed(agent: usize, value: f64, timestep: usize) -> Self {
        Self {
            kind: EventKind::CapabilityChanged,
            payload: vec![agent as f64 / MAX_TEAM as f64, value],
            timestep,
        }
    }

    pub fn target_changed(value: f64, timestep: usize) -> Self {
        Self {
            kind: EventKind::DiversityTargetChanged,
            payload: vec![value],
            timestep,
        }
    }

    pub fn signal(signal: Signal, timestep: usize) -> Self {
        let mut payload = vec![0.0; PAYLOAD_WIDTH];
        payload[signal.code()] = 1.0;
        Self {
            kind: EventKind::EnvSignal,
            payload,
            timestep,
        }
    }

    pub fn is_null(&self) -> bool {
        self.kind == EventKind::Null
    }

    /// Agent index for removal and capability events.
    pub fn agent(&self) -> Option<usize> {
        match self.kind {
            EventKind::AgentRemoved | EventKind::CapabilityChanged => {
                Some((self.payload[0] * MAX_TEAM as f64).round() as usize)
            }
            _ => None,
        }
    }

    pub fn signal_code(&self) -> Option<Signal> {
        if self.kind != EventKind::EnvSignal {
            return None;
        }
        self.payload
            .iter()
            .position(|&v| v == 1.0)
            .map(|i| Signal::ALL[i])
    }

    /// Smaller is more important when several predicates flip in one step.
    pub fn priority(&self) -> usize {
        match self.kind {
            EventKind::AgentRemoved => 0,
            EventKind::CapabilityChanged => 1,
            EventKind::DiversityTargetChanged => 2,
            EventKind::EnvSignal => match self.signal_code() {
                Some(Signal::DoorOpened | Signal::DoorClosed) => 3,
                Some(Signal::GoalReached) => 5,
                _ => 4,
            },
            EventKind::Null => 6,
        }
    }
}

/// Keeps the higher-priority event; ties keep `a`.
pub fn merge_events(a: EventRecord, b: EventRecord) -> EventRecord {
    if b.priority() < a.priority() {
        b
    } else {
        a
    }
}

/// Kind one-hot followed by the zero-padded payload; `Null` is all zeros.
pub fn encode_event(ev: &EventRecord) -> Vec<f64> {
    let mut v = vec![0.0; EVENT_WIDTH];
    if ev.is_null() {
        return v;
    }
    v[ev.kind.index()] = 1.0;
    for (slot, &p) in v[KIND_COUNT..].iter_mut().zip(&ev.payload) {
        *slot = p;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_encodes_to_zeros() {
        assert_eq!(encode_event(&EventRecord::null(3)), vec![0.0; EVENT_WIDTH]);
    }

    #[test]
    fn removal_payload_is_normalized_index() {
        let v = encode_event(&EventRecord::agent_removed(2, 0));
        assert_eq!(v[EventKind::AgentRemoved.index()], 1.0);
        assert_eq!(v[KIND_COUNT], 0.25);
        assert_eq!(EventRecord::agent_removed(2, 0).agent(), Some(2));
    }

    #[test]
    fn kinds_differ_in_one_hot_block() {
        let a = encode_event(&EventRecord::target_changed(0.5, 0));
        let b = encode_event(&EventRecord::signal(Signal::DoorOpened, 0));
        assert_ne!(a[..KIND_COUNT], b[..KIND_COUNT]);
    }

    #[test]
    fn priority_order() {
        let removed = EventRecord::agent_removed(0, 1);
        let door = EventRecord::signal(Signal::DoorOpened, 1);
        let plate = EventRecord::signal(Signal::Plate1On, 1);
        let goal = EventRecord::signal(Signal::GoalReached, 1);
        assert_eq!(merge_events(plate.clone(), door.clone()), door);
        assert_eq!(merge_events(door, removed.clone()), removed);
        assert_eq!(merge_events(goal, plate.clone()), plate);
    }
}
