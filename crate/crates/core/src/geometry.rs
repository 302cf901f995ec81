//! Planar-plus-depth poses and the feature-frame quantities the servo loop regulates.
//!
//! Distances are millimetres and angles are degrees throughout; trigonometry
//! converts to radians internally.

use serde::{Deserialize, Serialize};

/// Wraps an angle in degrees into (-180, 180].
///
/// Values already inside the interval are returned unchanged (bit-exact).
pub fn wrap_deg(angle: f64) -> f64 {
    if angle > -180.0 && angle <= 180.0 {
        return angle;
    }
    let r = angle.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Unit vector at `angle` degrees from +x.
pub fn direction(angle: f64) -> [f64; 2] {
    let (s, c) = angle.to_radians().sin_cos();
    [c, s]
}

/// Heading of a 2D vector in degrees.
pub fn heading(v: [f64; 2]) -> f64 {
    v[1].atan2(v[0]).to_degrees()
}

/// A 4-DOF pose: planar position, height and yaw about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2p5 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Yaw in degrees, kept in (-180, 180].
    pub theta: f64,
}

impl Default for Pose2p5 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose2p5 {
    pub const IDENTITY: Pose2p5 = Pose2p5 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            z,
            theta: wrap_deg(theta),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Rigid composition `self ∘ other`: `other` is expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose2p5) -> Pose2p5 {
        let (s, c) = self.theta.to_radians().sin_cos();
        Pose2p5 {
            x: self.x + c * other.x - s * other.y,
            y: self.y + s * other.x + c * other.y,
            z: self.z + other.z,
            theta: wrap_deg(self.theta + other.theta),
        }
    }

    pub fn inverse(&self) -> Pose2p5 {
        let (s, c) = self.theta.to_radians().sin_cos();
        Pose2p5 {
            x: -(c * self.x + s * self.y),
            y: -(-s * self.x + c * self.y),
            z: -self.z,
            theta: wrap_deg(-self.theta),
        }
    }

    /// Expresses a world-frame point in this pose's local frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.to_radians().sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// Free function form of [`Pose2p5::compose`].
pub fn compose(a: &Pose2p5, b: &Pose2p5) -> Pose2p5 {
    a.compose(b)
}

/// Sensor pose relative to a local contact feature.
///
/// For the edge task `offset` is the lateral displacement across the edge and
/// `depth` an unlabelled nuisance. For the surface task `offset` is the
/// labelled contact depth (signed distance, negative when pressed in) and
/// `depth` is unused.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeaturePose {
    pub offset: f64,
    pub depth: f64,
    pub angle: f64,
}

impl FeaturePose {
    pub fn new(offset: f64, angle: f64) -> Self {
        Self {
            offset,
            depth: 0.0,
            angle,
        }
    }

    /// `reference - self`, the error that drives the feedback loop.
    pub fn error_to(&self, reference: &FeaturePose) -> PoseError {
        PoseError {
            d_offset: reference.offset - self.offset,
            d_angle: wrap_deg(reference.angle - self.angle),
        }
    }
}

/// Pose error (reference minus predicted) or a commanded corrective move.
///
/// A positive `d_offset` moves along the feature's outward normal.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseError {
    pub d_offset: f64,
    pub d_angle: f64,
}

impl PoseError {
    pub const ZERO: PoseError = PoseError {
        d_offset: 0.0,
        d_angle: 0.0,
    };

    pub fn new(d_offset: f64, d_angle: f64) -> Self {
        Self { d_offset, d_angle }
    }

    pub fn is_zero(&self) -> bool {
        self.d_offset == 0.0 && self.d_angle == 0.0
    }
}

/// Next commanded pose: the corrective `movement` expressed in the feature
/// frame plus a tangential advance of `step`, applied to `sensor`.
///
/// `feature_frame.theta` is the feature tangent direction; its outward
/// normal is the tangent rotated by -90°.
pub fn feature_to_work(
    sensor: &Pose2p5,
    feature_frame: &Pose2p5,
    movement: &PoseError,
    step: f64,
) -> Pose2p5 {
    let [tx, ty] = direction(feature_frame.theta);
    let (nx, ny) = (ty, -tx);
    let dx = movement.d_offset * nx + step * tx;
    let dy = movement.d_offset * ny + step * ty;
    Pose2p5 {
        x: sensor.x + dx,
        y: sensor.y + dy,
        z: sensor.z,
        theta: wrap_deg(sensor.theta + movement.d_angle),
    }
}

/// Displacement from the end-effector origin to the sensing tip, in the
/// end-effector frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcpOffset {
    pub dx: f64,
    pub dz: f64,
}

impl TcpOffset {
    pub fn new(dx: f64, dz: f64) -> Self {
        Self { dx, dz }
    }

    /// Tip pose for an end-effector pose. Rotations commanded on the
    /// returned pose pivot about the tip.
    pub fn apply(&self, pose: &Pose2p5) -> Pose2p5 {
        let [c, s] = direction(pose.theta);
        Pose2p5 {
            x: pose.x + c * self.dx,
            y: pose.y + s * self.dx,
            z: pose.z + self.dz,
            theta: pose.theta,
        }
    }

    /// End-effector pose for a tip pose; inverse of [`TcpOffset::apply`].
    pub fn unapply(&self, tip: &Pose2p5) -> Pose2p5 {
        let [c, s] = direction(tip.theta);
        Pose2p5 {
            x: tip.x - c * self.dx,
            y: tip.y - s * self.dx,
            z: tip.z - self.dz,
            theta: tip.theta,
        }
    }
}

pub fn apply_tcp(pose: &Pose2p5, tcp: &TcpOffset) -> Pose2p5 {
    tcp.apply(pose)
}
