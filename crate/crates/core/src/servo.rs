//! Pose-based tactile servoing around a contour.
//!
//! Each iteration senses (renders a tactile image at the true contact),
//! predicts the feature pose, forms the error against the reference and
//! commands a proportional correction plus a fixed advance along the
//! estimated tangent. All geometry is done at the sensing tip; commanded
//! end-effector poses are recovered through the tool-centre-point offset.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contours::{Contour, ContourQuery};
use crate::geometry::{feature_to_work, wrap_deg, FeaturePose, Pose2p5, PoseError, TcpOffset};
use crate::posenet::{NetError, PoseNet};
use crate::rng;
use crate::tactsim::{ContactParams, Renderer, SensorSpec, SimError, Task, MAX_SLIDE_DEG, MAX_SLIDE_MM};

#[derive(Debug, thiserror::Error)]
pub enum ServoError {
    #[error("invalid servo config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("trajectory file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServoConfig {
    /// Target feature pose; `None` picks the task default (offset 0 for
    /// edges, mid-range depth for surfaces, angle 0).
    pub reference: Option<FeaturePose>,
    /// Proportional gains for (offset, angle).
    pub gain: [f64; 2],
    /// Tangential advance per iteration, mm.
    pub advance_step: f64,
    /// Added to the reference angle, degrees.
    pub angle_setpoint_advance: f64,
    pub max_steps: usize,
    pub loop_closure_radius: f64,
    pub min_steps_before_closure: usize,
    /// Largest commanded correction per step, (mm, degrees).
    pub step_clamp: [f64; 2],
    /// Edge contact is lost beyond this lateral offset, mm.
    pub detach_distance: f64,
    /// A commanded yaw change above this re-seats the skin and clears the
    /// accumulated shear, degrees.
    pub shear_reset_angle: f64,
    pub tcp: TcpOffset,
    pub seed: u64,
}

impl Default for ServoConfig {
    fn default() -> Self {
        ServoConfig {
            reference: None,
            gain: [0.5, 0.5],
            advance_step: 1.0,
            angle_setpoint_advance: 0.0,
            max_steps: 2000,
            loop_closure_radius: 2.0,
            min_steps_before_closure: 20,
            step_clamp: [3.0, 15.0],
            detach_distance: 8.0,
            shear_reset_angle: 2.0,
            tcp: TcpOffset::default(),
            seed: 0,
        }
    }
}

/// Middle of the labelled surface depth range.
pub const SURFACE_REFERENCE_DEPTH: f64 = -3.0;

impl ServoConfig {
    pub fn reference_for(&self, task: Task) -> FeaturePose {
        self.reference.unwrap_or(match task {
            Task::Edge => FeaturePose::new(0.0, 0.0),
            Task::Surface => FeaturePose::new(SURFACE_REFERENCE_DEPTH, 0.0),
        })
    }

    /// Gains of zero are accepted: they give the open-loop negative control.
    pub fn validate(&self) -> Result<(), ServoError> {
        let bad = |m: String| Err(ServoError::Config(m));
        for (name, g) in ["offset", "angle"].iter().zip(self.gain) {
            if !(0.0..2.0).contains(&g) {
                return bad(format!("gain.{name} = {g} outside [0, 2)"));
            }
        }
        if !(self.advance_step > 0.0 && self.advance_step.is_finite()) {
            return bad(format!("advance_step = {} must be > 0", self.advance_step));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be > 0".into());
        }
        if !(self.step_clamp[0] > 0.0 && self.step_clamp[1] > 0.0) {
            return bad("step_clamp entries must be > 0".into());
        }
        if !(self.loop_closure_radius > 0.0 && self.detach_distance > 0.0 && self.shear_reset_angle >= 0.0) {
            return bad("loop_closure_radius and detach_distance must be > 0".into());
        }
        if !self.angle_setpoint_advance.is_finite() || self.angle_setpoint_advance.abs() >= 90.0 {
            return bad(format!("angle_setpoint_advance = {} outside (-90, 90)", self.angle_setpoint_advance));
        }
        Ok(())
    }
}

/// Source of pose estimates: a trained model, or the ground truth.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a PoseNet<f32>),
    Oracle,
}

/// Heading of the feature frame's x-axis for a contour tangent heading.
pub fn feature_axis(task: Task, tangent_angle: f64) -> f64 {
    match task {
        Task::Edge => tangent_angle,
        Task::Surface => wrap_deg(tangent_angle + 90.0),
    }
}

/// Inverse of [`feature_axis`].
fn tangent_from_axis(task: Task, axis: f64) -> f64 {
    match task {
        Task::Edge => axis,
        Task::Surface => wrap_deg(axis - 90.0),
    }
}

/// True feature pose of a sensing tip against the contour.
pub fn true_feature(contour: &Contour, tip: &Pose2p5, task: Task) -> (FeaturePose, ContourQuery) {
    let q = contour.query(tip.position());
    let angle = wrap_deg(tip.theta - feature_axis(task, q.tangent_angle()));
    let pose = FeaturePose {
        offset: q.signed_distance,
        depth: tip.z,
        angle,
    };
    (pose, q)
}

/// Tip pose at arc position `s` holding feature pose `reference`.
pub fn pose_on_contour(contour: &Contour, s: f64, reference: &FeaturePose, task: Task) -> Pose2p5 {
    let p = contour.point_at(s);
    let t = contour.tangent_at(s);
    let n = [t[1], -t[0]];
    let axis = feature_axis(task, t[1].atan2(t[0]).to_degrees());
    Pose2p5::new(
        p[0] + reference.offset * n[0],
        p[1] + reference.offset * n[1],
        reference.depth,
        axis + reference.angle,
    )
}

/// Contact lost: the edge left the sensing field, or the surface is no
/// longer touched.
fn lost_contact(pose: &FeaturePose, task: Task, cfg: &ServoConfig, spec: &SensorSpec) -> bool {
    match task {
        Task::Edge => pose.offset.abs() > cfg.detach_distance,
        Task::Surface => pose.offset >= spec.surface_touch + spec.surface_preload,
    }
}

/// Skin shear accumulated since the last reorientation, in the slide
/// coordinates of [`ContactParams`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Shear {
    pub x: f64,
    pub y: f64,
    pub angle: f64,
}

impl Shear {
    /// Adds the motion from `from` to `to`, or clears on a large yaw change.
    pub fn advance(&mut self, from: &Pose2p5, to: &Pose2p5, task: Task, reset_angle: f64) {
        let turn = wrap_deg(to.theta - from.theta);
        if turn.abs() > reset_angle {
            *self = Shear::default();
            return;
        }
        let [lx, ly] = from.to_local(to.position());
        let clamp = |v: f64, lim: f64| v.clamp(-lim, lim);
        match task {
            Task::Edge => {
                self.x = clamp(self.x + lx, MAX_SLIDE_MM);
                self.y = clamp(self.y + ly, MAX_SLIDE_MM);
            }
            // Facing the wall, only the lateral image axis sees tangential motion.
            Task::Surface => self.x = clamp(self.x + ly, MAX_SLIDE_MM),
        }
        self.angle = clamp(self.angle + turn, MAX_SLIDE_DEG);
    }
}

/// Renders the tactile image for a tip pose; `Ok(None)` when contact is lost.
pub fn sense(
    renderer: &Renderer,
    contour: &Contour,
    tip: &Pose2p5,
    task: Task,
    shear: &Shear,
    cfg: &ServoConfig,
    seed: u64,
) -> Result<Option<crate::TactileImage>, ServoError> {
    let (pose, _) = true_feature(contour, tip, task);
    if lost_contact(&pose, task, cfg, renderer.spec()) {
        return Ok(None);
    }
    let contact = contact_for(&pose, task).with_slide(shear.x, shear.y, shear.angle);
    Ok(Some(renderer.render(&contact, seed)?))
}

fn contact_for(pose: &FeaturePose, task: Task) -> ContactParams {
    match task {
        Task::Edge => ContactParams::edge(pose.offset, pose.depth, pose.angle),
        Task::Surface => ContactParams::surface(pose.offset, pose.angle),
    }
}

/// Proportional correction `gain ⊙ error`, saturated at `step_clamp`.
pub fn control(cfg: &ServoConfig, error: &PoseError) -> PoseError {
    PoseError {
        d_offset: (cfg.gain[0] * error.d_offset).clamp(-cfg.step_clamp[0], cfg.step_clamp[0]),
        d_angle: (cfg.gain[1] * error.d_angle).clamp(-cfg.step_clamp[1], cfg.step_clamp[1]),
    }
}

/// One controller update from a predicted pose: returns the next tip pose,
/// the pose error and the commanded move.
pub fn step(
    cfg: &ServoConfig,
    task: Task,
    tip: &Pose2p5,
    predicted: &FeaturePose,
) -> (Pose2p5, PoseError, PoseError) {
    let mut reference = cfg.reference_for(task);
    reference.angle += cfg.angle_setpoint_advance;
    let error = predicted.error_to(&reference);
    let mv = control(cfg, &error);
    let tangent = tangent_from_axis(task, wrap_deg(tip.theta - predicted.angle));
    let frame = Pose2p5::new(tip.x, tip.y, tip.z, tangent);
    (feature_to_work(tip, &frame, &mv, cfg.advance_step), error, mv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Contact,
    LostContact,
}

impl StepStatus {
    pub fn name(&self) -> &'static str {
        match self {
            StepStatus::Contact => "contact",
            StepStatus::LostContact => "lost_contact",
        }
    }
}

impl FromStr for StepStatus {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "contact" => Ok(StepStatus::Contact),
            "lost_contact" => Ok(StepStatus::LostContact),
            _ => Err(format!("unknown step status `{s}`")),
        }
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    LoopClosed,
    MaxSteps,
    LostContact,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::LoopClosed => "loop_closed",
            Termination::MaxSteps => "max_steps",
            Termination::LostContact => "lost_contact",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryStep {
    pub step: usize,
    /// Commanded end-effector pose at which this step sensed.
    pub command: Pose2p5,
    pub predicted: FeaturePose,
    pub error: PoseError,
    /// Ground truth at the tip.
    pub true_distance: f64,
    /// Tip yaw minus the feature axis, degrees.
    pub true_angle_dev: f64,
    pub status: StepStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task: Task,
    pub reference: FeaturePose,
    pub tcp: TcpOffset,
    pub steps: Vec<TrajectoryStep>,
    pub termination: Termination,
}

pub const TRAJECTORY_HEADER: &str =
    "step,cmd_x,cmd_y,cmd_z,cmd_theta,pred_offset,pred_angle,err_offset,err_angle,true_dist,true_angle_dev,status";

impl Trajectory {
    pub fn completed(&self) -> bool {
        self.termination == Termination::LoopClosed
    }

    /// Tip poses of the commanded path.
    pub fn tips(&self) -> Vec<Pose2p5> {
        self.steps.iter().map(|s| self.tcp.apply(&s.command)).collect()
    }

    /// Writes the per-step CSV (floats in shortest round-trip form).
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{TRAJECTORY_HEADER}")?;
        for s in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                s.step,
                s.command.x,
                s.command.y,
                s.command.z,
                s.command.theta,
                s.predicted.offset,
                s.predicted.angle,
                s.error.d_offset,
                s.error.d_angle,
                s.true_distance,
                s.true_angle_dev,
                s.status.name()
            )?;
        }
        Ok(())
    }

    /// Reads steps written by [`Trajectory::write_csv`]. The task, reference,
    /// TCP offset and termination are not part of the file.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<TrajectoryStep>, ServoError> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?;
        if header.as_deref().map(str::trim_end) != Some(TRAJECTORY_HEADER) {
            return Err(ServoError::Format("missing or unexpected header".into()));
        }
        let mut out = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = |m: String| ServoError::Format(format!("line {}: {m}", i + 2));
            if f.len() != 12 {
                return Err(bad(format!("{} fields, expected 12", f.len())));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|e| bad(format!("field {k}: {e}")));
            out.push(TrajectoryStep {
                step: f[0].parse().map_err(|e| bad(format!("step: {e}")))?,
                command: Pose2p5 {
                    x: num(1)?,
                    y: num(2)?,
                    z: num(3)?,
                    theta: num(4)?,
                },
                predicted: FeaturePose::new(num(5)?, num(6)?),
                error: PoseError::new(num(7)?, num(8)?),
                true_distance: num(9)?,
                true_angle_dev: num(10)?,
                status: f[11].parse().map_err(bad)?,
            });
            if out.len() > 1 && out[out.len() - 1].step <= out[out.len() - 2].step {
                return Err(bad("step indices must increase".into()));
            }
        }
        Ok(out)
    }
}

/// Runs the servo loop from tip pose `start` until loop closure, the step
/// limit, or loss of contact.
pub fn run(
    cfg: &ServoConfig,
    contour: &Contour,
    spec: &SensorSpec,
    predictor: Predictor,
    start: &Pose2p5,
    task: Task,
) -> Result<Trajectory, ServoError> {
    cfg.validate()?;
    let renderer = match predictor {
        Predictor::Model(m) => {
            let a = m.architecture();
            if a.input_width != spec.image_width || a.input_height != spec.image_height {
                return Err(ServoError::Config(format!(
                    "model expects {}×{} images, sensor renders {}×{}",
                    a.input_width, a.input_height, spec.image_width, spec.image_height
                )));
            }
            Some(Renderer::new(spec)?)
        }
        Predictor::Oracle => None,
    };
    let reference = cfg.reference_for(task);
    let mut tip = *start;
    let mut shear = Shear::default();
    let mut steps = Vec::new();
    let mut termination = Termination::MaxSteps;
    for i in 0..cfg.max_steps {
        let (truth, _) = true_feature(contour, &tip, task);
        let command = cfg.tcp.unapply(&tip);
        let mut record = TrajectoryStep {
            step: i,
            command,
            predicted: FeaturePose::default(),
            error: PoseError::ZERO,
            true_distance: truth.offset,
            true_angle_dev: truth.angle,
            status: StepStatus::Contact,
        };
        if lost_contact(&truth, task, cfg, spec) {
            record.status = StepStatus::LostContact;
            steps.push(record);
            termination = Termination::LostContact;
            break;
        }
        let predicted = match (&renderer, predictor) {
            (Some(r), Predictor::Model(m)) => {
                let contact = contact_for(&truth, task).with_slide(shear.x, shear.y, shear.angle);
                let img = r.render(&contact, rng::item_seed(cfg.seed, i as u64))?;
                let p = m.forward(&img)?;
                FeaturePose::new(p[0], p[1])
            }
            _ => truth,
        };
        let (next, error, _) = step(cfg, task, &tip, &predicted);
        record.predicted = predicted;
        record.error = error;
        steps.push(record);
        shear.advance(&tip, &next, task, cfg.shear_reset_angle);
        tip = next;
        let [dx, dy] = [tip.x - start.x, tip.y - start.y];
        if i + 1 >= cfg.min_steps_before_closure && dx.hypot(dy) <= cfg.loop_closure_radius {
            termination = Termination::LoopClosed;
            break;
        }
    }
    Ok(Trajectory {
        task,
        reference,
        tcp: cfg.tcp,
        steps,
        termination,
    })
}

/// Tip pose at arc position 0 holding the configured reference.
pub fn start_pose(cfg: &ServoConfig, contour: &Contour, task: Task) -> Pose2p5 {
    pose_on_contour(contour, 0.0, &cfg.reference_for(task), task)
}
