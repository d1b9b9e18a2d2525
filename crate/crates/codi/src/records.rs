//! Line-delimited JSON files.
//!
//! Metrics: one [`MethodMetrics`] object per line with the keys `method`,
//! `episodes`, `success_rate`, `median_completion_time`,
//! `median_min_distance`, `collision_rate`, `crash_rate`, `error_count`.
//!
//! Traces: one [`TraceRecord`] per step of each episode.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use codi_core::env::{WorldState, ACTION_WIDTH, AGENTS};
use codi_core::harness::{EpisodeResult, MethodMetrics, MetricsTable};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// One step of an episode trace. `action` is the joint action applied from
/// this state, absent on the terminal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: usize,
    pub step: usize,
    pub grippers: [[f64; 2]; AGENTS],
    pub closed: [bool; AGENTS],
    pub object: [f64; 2],
    pub goal: [f64; 2],
    pub held_by: Option<usize>,
    pub action: Option<[f64; AGENTS * ACTION_WIDTH]>,
}

impl TraceRecord {
    pub fn state(&self) -> WorldState {
        WorldState { grippers: self.grippers, closed: self.closed, object: self.object, goal: self.goal, held_by: self.held_by }
    }
}

pub fn trace_records(episode: usize, result: &EpisodeResult) -> Vec<TraceRecord> {
    result
        .trace
        .iter()
        .enumerate()
        .map(|(step, s)| TraceRecord {
            episode,
            step,
            grippers: s.grippers,
            closed: s.closed,
            object: s.object,
            goal: s.goal,
            held_by: s.held_by,
            action: result.actions.get(step).copied(),
        })
        .collect()
}

pub fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, table: &MetricsTable) -> Result<()> {
    write_lines(path, &table.rows)
}

pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    Ok(MetricsTable { rows: read_lines::<MethodMetrics>(path)? })
}

/// Replace the row named like `row` (or append it) in the metrics file.
pub fn upsert_metrics(path: &Path, row: MethodMetrics) -> Result<MetricsTable> {
    let mut table = if path.exists() { read_metrics(path)? } else { MetricsTable::default() };
    match table.rows.iter_mut().find(|r| r.method == row.method) {
        Some(r) => *r = row,
        None => table.rows.push(row),
    }
    write_metrics(path, &table)?;
    Ok(table)
}

pub fn write_traces(path: &Path, results: &[EpisodeResult]) -> Result<()> {
    write_lines(path, results.iter().enumerate().flat_map(|(i, r)| trace_records(i, r)))
}
