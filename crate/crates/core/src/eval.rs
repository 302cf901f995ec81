//! Scoring of traced trajectories and the combined results tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::contours::Contour;
use crate::geometry::wrap_deg;
use crate::posenet::EvalReport;
use crate::servo::{feature_axis, StepStatus, Termination, Trajectory};
use crate::tactsim::{SensorFamily, Task};

/// Accuracy of one traced contour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub shape: String,
    pub task: Task,
    pub family: SensorFamily,
    /// Mean |standoff - reference| over in-contact steps, mm.
    pub position_mae: f64,
    /// Mean |yaw - feature axis| over in-contact steps, degrees.
    pub angle_mae: f64,
    pub completed: bool,
    pub termination: Termination,
    pub steps: usize,
    /// Failure is the anticipated outcome for this cell.
    #[serde(default)]
    pub expected_fail: bool,
}

impl TraceReport {
    pub fn status(&self) -> &'static str {
        match (self.completed, self.expected_fail) {
            (true, _) => "completed",
            (false, true) => "expected-fail",
            (false, false) => "incomplete",
        }
    }
}

/// Scores `t` against the ground-truth contour, re-querying the contour at
/// every commanded tip rather than trusting recorded values.
///
/// Steps that lost contact are excluded from the errors but make the trace
/// incomplete. A trace with no in-contact step scores NaN.
pub fn score_trace(t: &Trajectory, contour: &Contour, family: SensorFamily) -> TraceReport {
    let mut pos = 0.0;
    let mut ang = 0.0;
    let mut n = 0usize;
    for (s, tip) in t.steps.iter().zip(t.tips()) {
        if s.status != StepStatus::Contact {
            continue;
        }
        let q = contour.query(tip.position());
        pos += (q.signed_distance - t.reference.offset).abs();
        ang += wrap_deg(tip.theta - feature_axis(t.task, q.tangent_angle())).abs();
        n += 1;
    }
    let mean = |v: f64| if n > 0 { v / n as f64 } else { f64::NAN };
    TraceReport {
        shape: contour.name().to_string(),
        task: t.task,
        family,
        position_mae: mean(pos),
        angle_mae: mean(ang),
        completed: t.completed(),
        termination: t.termination,
        steps: t.steps.len(),
        expected_fail: false,
    }
}

/// Results tables in text and CSV form.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub text: String,
    pub pose_csv: String,
    pub trace_csv: String,
}

pub const POSE_CSV_HEADER: &str = "sensor,task,offset_mae,offset_range,angle_mae,angle_range,n";
pub const TRACE_CSV_HEADER: &str = "sensor,task,shape,position_mae_mm,angle_mae_deg,steps,termination,status";

fn family_rank(f: SensorFamily) -> usize {
    SensorFamily::ALL.iter().position(|&x| x == f).unwrap_or(usize::MAX)
}

fn task_rank(t: Task) -> usize {
    Task::ALL.iter().position(|&x| x == t).unwrap_or(usize::MAX)
}

fn shape_rank(s: &str) -> usize {
    ["circle", "square", "circular-wave"].iter().position(|&x| x == s).unwrap_or(usize::MAX)
}

/// Builds the pose-accuracy and tracing tables, rows ordered by sensor
/// family, then task, then shape.
pub fn summarize(traces: &[TraceReport], poses: &[EvalReport]) -> Summary {
    let mut poses: Vec<&EvalReport> = poses.iter().collect();
    poses.sort_by_key(|r| (family_rank(r.family), task_rank(r.task)));
    let mut traces: Vec<&TraceReport> = traces.iter().collect();
    traces.sort_by_key(|r| (family_rank(r.family), task_rank(r.task), shape_rank(&r.shape)));

    let mut text = String::new();
    let mut pose_csv = format!("{POSE_CSV_HEADER}\n");
    if !poses.is_empty() {
        let _ = writeln!(text, "Pose prediction (MAE / range)");
        let _ = writeln!(text, "{:<8} {:<8} {:>22} {:>22}", "sensor", "task", "offset [mm]", "angle [deg]");
    }
    for r in &poses {
        let cell = |i: usize| format!("{:.2} / {:.0}", r.mae[i], r.range[i]);
        let _ = writeln!(
            text,
            "{:<8} {:<8} {:>22} {:>22}",
            r.family.name(),
            r.task.name(),
            cell(0),
            cell(1)
        );
        let _ = writeln!(
            pose_csv,
            "{},{},{},{},{},{},{}",
            r.family.name(),
            r.task.name(),
            r.mae[0],
            r.range[0],
            r.mae[1],
            r.range[1],
            r.n
        );
    }

    let mut trace_csv = format!("{TRACE_CSV_HEADER}\n");
    if !traces.is_empty() {
        if !poses.is_empty() {
            let _ = writeln!(text);
        }
        let _ = writeln!(text, "Contour following");
        let _ = writeln!(
            text,
            "{:<8} {:<8} {:<14} {:>10} {:>10} {:>6}  status",
            "sensor", "task", "shape", "pos [mm]", "ang [deg]", "steps"
        );
    }
    for r in &traces {
        let _ = writeln!(
            text,
            "{:<8} {:<8} {:<14} {:>10.3} {:>10.2} {:>6}  {}",
            r.family.name(),
            r.task.name(),
            r.shape,
            r.position_mae,
            r.angle_mae,
            r.steps,
            r.status()
        );
        let _ = writeln!(
            trace_csv,
            "{},{},{},{},{},{},{},{}",
            r.family.name(),
            r.task.name(),
            r.shape,
            r.position_mae,
            r.angle_mae,
            r.steps,
            r.termination,
            r.status()
        );
    }
    Summary {
        text,
        pose_csv,
        trace_csv,
    }
}

/// Plain SVG of the contour (grey), the commanded tip path (blue) and the
/// start position (green dot). The y axis points up.
pub fn trajectory_svg(t: &Trajectory, contour: &Contour) -> String {
    let outline = contour.polyline(720);
    let path: Vec<[f64; 2]> = t.tips().iter().map(|p| p.position()).collect();
    let all = outline.iter().chain(&path);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in all {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let pad = 5.0;
    let (w, h) = (x1 - x0 + 2.0 * pad, y1 - y0 + 2.0 * pad);
    let points = |ps: &[[f64; 2]]| {
        ps.iter()
            .map(|p| format!("{:.3},{:.3}", p[0] - x0 + pad, y1 - p[1] + pad))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w:.3} {h:.3}\" width=\"{:.0}\" height=\"{:.0}\">\n",
        w * 4.0,
        h * 4.0
    );
    let _ = writeln!(
        svg,
        "<polygon points=\"{}\" fill=\"none\" stroke=\"#888\" stroke-width=\"0.6\"/>",
        points(&outline)
    );
    if !path.is_empty() {
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"0.4\"/>",
            points(&path)
        );
        let s = path[0];
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"1.5\" fill=\"#2a2\"/>",
            s[0] - x0 + pad,
            y1 - s[1] + pad
        );
    }
    svg.push_str("</svg>\n");
    svg
}
