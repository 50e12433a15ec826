//! Line-delimited JSON episode traces.
//!
//! The first line is a header `{"schema":"role-arena-trace","version":1,...}`;
//! every following line is one [`TraceRecord`], written after each step.

use super::{Pos, RoleArena, StepResult};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const TRACE_SCHEMA: &str = "role-arena-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub grid_size: usize,
    pub n_agents: usize,
    pub n_enemies: usize,
    pub episode_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    /// Allies first, then enemies.
    pub positions: Vec<Pos>,
    pub healths: Vec<i32>,
    pub joint_action: Vec<usize>,
    pub reward: f64,
    pub terminated: bool,
    pub won: bool,
}

impl TraceRecord {
    pub fn capture(env: &RoleArena, joint_action: &[usize], result: &StepResult) -> Self {
        let units = env.allies().iter().chain(env.enemies());
        let (positions, healths) = units.map(|u| (u.pos, u.health)).unzip();
        Self {
            t: env.t(),
            positions,
            healths,
            joint_action: joint_action.to_vec(),
            reward: result.reward,
            terminated: result.terminated,
            won: result.won,
        }
    }
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, env: &RoleArena) -> Result<Self> {
        let header = TraceHeader {
            schema: TRACE_SCHEMA.into(),
            version: TRACE_VERSION,
            grid_size: env.config().grid_size,
            n_agents: env.config().n_agents(),
            n_enemies: env.config().n_enemies(),
            episode_seed: env.episode_seed(),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?).map_err(|e| Error::io("<trace>", e))?;
        Ok(Self { out })
    }

    pub fn record(&mut self, rec: &TraceRecord) -> Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io("<trace>", e))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parses a trace produced by [`TraceWriter`], checking the header.
pub fn read_trace(text: &str) -> Result<(TraceHeader, Vec<TraceRecord>)> {
    let mut lines = text.lines();
    let header: TraceHeader = serde_json::from_str(lines.next().unwrap_or_default())?;
    if header.schema != TRACE_SCHEMA || header.version != TRACE_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported trace {} v{}",
            header.schema, header.version
        )));
    }
    let records = lines
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((header, records))
}
