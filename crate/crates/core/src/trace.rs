//! Episode traces: one record per physics substep, exportable as JSON Lines,
//! CSV, and per-decision-step SVG frames for replay.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Cause, IntersectionScenario, TaskId};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Parse { path: String, line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceVehicleRecord {
    pub id: usize,
    pub ego: bool,
    pub route: usize,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub psi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Simulation time (s).
    pub time: f64,
    /// Decision step the record belongs to.
    pub step: usize,
    /// Ego meta-action index active during the step, if any.
    pub action: Option<usize>,
    /// Reward granted at the end of the decision step (on its last record).
    pub reward: Option<f64>,
    pub terminated: bool,
    pub cause: Cause,
    pub vehicles: Vec<TraceVehicleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub version: u32,
    pub seed: u64,
    pub task: TaskId,
    pub records: Vec<TraceRecord>,
}

impl EpisodeTrace {
    pub fn new(seed: u64, task: TaskId) -> Self {
        Self { version: TRACE_VERSION, seed, task, records: Vec::new() }
    }

    /// First record of each decision step (the replay frames).
    pub fn decision_frames(&self) -> Vec<&TraceRecord> {
        let mut frames: Vec<&TraceRecord> = Vec::new();
        let mut last_step = usize::MAX;
        for r in &self.records {
            if r.step != last_step {
                frames.push(r);
                last_step = r.step;
            }
        }
        frames
    }

    /// One JSON object per line: a header line for the episode, then one
    /// line per record.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        let path = path.as_ref();
        let io_err = |source| TraceError::Io { path: path.display().to_string(), source };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(io_err)?;
            }
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        let header = serde_json::json!({
            "version": self.version,
            "seed": self.seed,
            "task": self.task,
        });
        writeln!(w, "{header}").map_err(io_err)?;
        for r in &self.records {
            let line = serde_json::to_string(r).expect("trace records serialize");
            writeln!(w, "{line}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref();
        let pstr = path.display().to_string();
        let io_err = |source| TraceError::Io { path: pstr.clone(), source };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header_line = lines.next().transpose().map_err(io_err)?.unwrap_or_default();
        #[derive(Deserialize)]
        struct Header {
            version: u32,
            seed: u64,
            task: TaskId,
        }
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|source| TraceError::Parse { path: pstr.clone(), line: 1, source })?;
        let mut trace = EpisodeTrace::new(header.seed, header.task);
        trace.version = header.version;
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TraceRecord = serde_json::from_str(&line)
                .map_err(|source| TraceError::Parse { path: pstr.clone(), line: i + 2, source })?;
            trace.records.push(record);
        }
        Ok(trace)
    }

    /// Flat CSV: one row per (record, vehicle).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        let path = path.as_ref();
        let io_err = |source| TraceError::Io { path: path.display().to_string(), source };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(io_err)?;
            }
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        writeln!(w, "time,step,vehicle,ego,route,x,y,v,psi,action,reward,terminated,cause")
            .map_err(io_err)?;
        for r in &self.records {
            for veh in &r.vehicles {
                let action = r.action.map(|a| a.to_string()).unwrap_or_default();
                let reward = r.reward.map(|x| format!("{x}")).unwrap_or_default();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{:?}",
                    r.time,
                    r.step,
                    veh.id,
                    veh.ego,
                    veh.route,
                    veh.x,
                    veh.y,
                    veh.v,
                    veh.psi,
                    action,
                    reward,
                    r.terminated,
                    r.cause
                )
                .map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }
}

const ACTION_NAMES: [&str; 3] = ["slow_down", "cruising", "speed_up"];

/// Render one replay frame as a standalone SVG document.
pub fn render_svg_frame(scenario: &IntersectionScenario, record: &TraceRecord) -> String {
    let zh = scenario.config.zone_half();
    let reach = scenario.config.arm_length + zh + scenario.config.exit_length;
    let view = reach + 5.0;
    let road_half = scenario.config.lane_width;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{} {} {} {}\" width=\"640\" height=\"640\">\n",
        -view,
        -view,
        2.0 * view,
        2.0 * view
    ));
    // y axis points up in world coordinates
    svg.push_str("<g transform=\"scale(1,-1)\">\n");
    svg.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#f2f2f2\"/>\n",
        -view,
        -view,
        2.0 * view,
        2.0 * view
    ));
    // the two road bands
    svg.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#b9b9b9\"/>\n",
        -view,
        -road_half,
        2.0 * view,
        2.0 * road_half
    ));
    svg.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#b9b9b9\"/>\n",
        -road_half,
        -view,
        2.0 * road_half,
        2.0 * view
    ));
    // conflict zone
    svg.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#d08000\" stroke-width=\"0.4\" stroke-dasharray=\"2,1.5\"/>\n",
        -zh,
        -zh,
        2.0 * zh,
        2.0 * zh
    ));
    // ego route centerline
    if let Some(ego) = record.vehicles.iter().find(|v| v.ego) {
        let lane = &scenario.routes[ego.route].lane;
        let pts: Vec<String> = lane.points().iter().map(|p| format!("{},{}", p.x, p.y)).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#4060c0\" stroke-width=\"0.3\" stroke-dasharray=\"1,1\"/>\n",
            pts.join(" ")
        ));
    }
    // vehicles
    for veh in &record.vehicles {
        let fill = if veh.ego { "#2050d0" } else { "#c03030" };
        let (len, wid) = (5.0, 2.0);
        svg.push_str(&format!(
            "<g transform=\"translate({},{}) rotate({})\"><rect x=\"{}\" y=\"{}\" width=\"{len}\" height=\"{wid}\" fill=\"{fill}\"/><rect x=\"{}\" y=\"{}\" width=\"1\" height=\"{wid}\" fill=\"#ffffff\" opacity=\"0.7\"/></g>\n",
            veh.x,
            veh.y,
            veh.psi.to_degrees(),
            -0.5 * len,
            -0.5 * wid,
            0.5 * len - 1.2,
            -0.5 * wid,
        ));
    }
    svg.push_str("</g>\n");
    let action = record.action.map(|a| ACTION_NAMES.get(a).copied().unwrap_or("?")).unwrap_or("-");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"6\" font-family=\"monospace\">t={:.2}s step={} action={} cause={:?}</text>\n",
        -view + 2.0,
        -view + 8.0,
        record.time,
        record.step,
        action,
        record.cause
    ));
    svg.push_str("</svg>\n");
    svg
}
