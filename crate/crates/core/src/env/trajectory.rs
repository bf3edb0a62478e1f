//! JSON-lines trajectory dump, one record per step.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{PomgState, Vec2};
use crate::error::Result;
use crate::event::{EventKind, EventRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub live_mask: Vec<bool>,
    pub reward: f64,
    pub event_kind: EventKind,
    pub event_payload: Vec<f64>,
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmd_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmd_realized: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl TrajectoryRecord {
    /// Record for the step that produced `state`.
    pub fn new(t: usize, state: &PomgState, reward: f64, event: &EventRecord, done: bool) -> Self {
        Self {
            t,
            positions: state.positions.clone(),
            velocities: state.velocities.clone(),
            live_mask: state.live.clone(),
            reward,
            event_kind: event.kind,
            event_payload: event.payload.clone(),
            done,
            episode: None,
            nmd_target: None,
            nmd_realized: None,
            alpha: None,
        }
    }
}

pub fn write_records<W: Write>(out: &mut W, records: &[TrajectoryRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(text: &str) -> Result<Vec<TrajectoryRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
