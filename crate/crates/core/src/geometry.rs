//! World-frame geometry and the four-way spatial labeling rule.
//!
//! World frame is right-handed, meters, +z up. All labeling happens on the
//! ground plane: z is discarded before any direction is computed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{ObjectRole, SceneLayout};

/// Ground-plane distances at or below this are treated as coincident.
pub const EPSILON_LEN: f64 = 1e-6;

/// Half-width of the rejected cone around each diagonal, in degrees.
pub const DEFAULT_AMBIGUITY_HALF_WIDTH: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn ground(self) -> [f64; 2] {
        [self.x, self.y]
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_degrees(a: f64) -> f64 {
    if a > -180.0 && a <= 180.0 {
        return a;
    }
    let w = a.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Position plus yaw/pitch/roll in degrees.
///
/// Yaw is measured counter-clockwise from +x about +z, pitch is positive
/// looking up, roll rotates the image clockwise about the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose6DoF {
    pub position: Vec3,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Pose6DoF {
    /// Builds a pose, wrapping yaw and roll into (-180, 180].
    pub fn new(position: Vec3, yaw: f64, pitch: f64, roll: f64) -> Result<Self> {
        if !position.is_finite() || !yaw.is_finite() || !pitch.is_finite() || !roll.is_finite() {
            return Err(Error::invalid("pose components must be finite"));
        }
        if !(-90.0..=90.0).contains(&pitch) {
            return Err(Error::invalid(format!("pitch {pitch} outside [-90, 90]")));
        }
        Ok(Pose6DoF {
            position,
            yaw: wrap_degrees(yaw),
            pitch,
            roll: wrap_degrees(roll),
        })
    }

    pub fn at(position: Vec3) -> Self {
        Pose6DoF {
            position,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialLabel {
    Front,
    Back,
    Left,
    Right,
}

impl SpatialLabel {
    pub const ALL: [SpatialLabel; 4] = [
        SpatialLabel::Front,
        SpatialLabel::Back,
        SpatialLabel::Left,
        SpatialLabel::Right,
    ];

    /// Class index used by the probes.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpatialLabel::Front => "front",
            SpatialLabel::Back => "back",
            SpatialLabel::Left => "left",
            SpatialLabel::Right => "right",
        }
    }

    pub fn mirrored(self) -> Self {
        match self {
            SpatialLabel::Left => SpatialLabel::Right,
            SpatialLabel::Right => SpatialLabel::Left,
            other => other,
        }
    }
}

impl fmt::Display for SpatialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpatialLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "front" => Ok(SpatialLabel::Front),
            "back" => Ok(SpatialLabel::Back),
            "left" => Ok(SpatialLabel::Left),
            "right" => Ok(SpatialLabel::Right),
            _ => Err(Error::invalid(format!("unknown label `{s}`"))),
        }
    }
}

/// Which observer anchors the reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskVariant {
    /// Camera position is the viewpoint.
    Ego,
    /// The human object's position is the viewpoint.
    Allo,
}

impl TaskVariant {
    pub const ALL: [TaskVariant; 2] = [TaskVariant::Ego, TaskVariant::Allo];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskVariant::Ego => "ego",
            TaskVariant::Allo => "allo",
        }
    }

    /// Default number of accepted samples per environment.
    pub fn default_dataset_size(self) -> usize {
        match self {
            TaskVariant::Ego => 5000,
            TaskVariant::Allo => 10000,
        }
    }
}

impl fmt::Display for TaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ego" => Ok(TaskVariant::Ego),
            "allo" => Ok(TaskVariant::Allo),
            _ => Err(Error::invalid(format!("unknown variant `{s}` (ego|allo)"))),
        }
    }
}

/// Bearing of the target around the source in the viewpoint frame, degrees
/// in (-180, 180], positive toward the viewpoint's right.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelativeAngle(f64);

impl RelativeAngle {
    pub fn new(theta: f64) -> Self {
        RelativeAngle(wrap_degrees(theta))
    }

    pub fn degrees(self) -> f64 {
        self.0
    }
}

/// Orthonormal ground-plane frame anchored at a viewpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub forward: [f64; 2],
    pub right: [f64; 2],
}

fn ground_unit(from: Vec3, to: Vec3) -> Option<[f64; 2]> {
    let dx = to.x - from.x;
    let dy = to.y - from.y;
    let len = dx.hypot(dy);
    (len > EPSILON_LEN).then(|| [dx / len, dy / len])
}

/// Forward points from the viewpoint to the source on the ground plane;
/// right is forward × up.
pub fn forward_frame(viewpoint: Vec3, source: Vec3) -> Result<Frame> {
    let forward = ground_unit(viewpoint, source).ok_or(Error::DegenerateFrame)?;
    Ok(Frame {
        forward,
        right: [forward[1], -forward[0]],
    })
}

pub fn relative_angle(viewpoint: Vec3, source: Vec3, target: Vec3) -> Result<RelativeAngle> {
    let frame = forward_frame(viewpoint, source)?;
    let d = ground_unit(source, target).ok_or(Error::DegenerateTarget)?;
    let along = d[0] * frame.forward[0] + d[1] * frame.forward[1];
    let across = d[0] * frame.right[0] + d[1] * frame.right[1];
    Ok(RelativeAngle::new(across.atan2(along).to_degrees()))
}

/// Distance in degrees from `theta` to the nearest diagonal (±45°, ±135°).
pub fn distance_to_diagonal(theta: f64) -> f64 {
    let t = wrap_degrees(theta).abs();
    // |theta| folds the four diagonals onto 45 and 135
    (t - 45.0).abs().min((t - 135.0).abs())
}

/// Maps an angle to its label, or `None` inside an ambiguity cone.
/// A distance to the diagonal exactly equal to the half-width is rejected.
pub fn classify_direction(theta: RelativeAngle, half_width: f64) -> Result<Option<SpatialLabel>> {
    if !(0.0..45.0).contains(&half_width) {
        return Err(Error::invalid(format!(
            "ambiguity half-width {half_width} outside [0, 45)"
        )));
    }
    let t = theta.degrees();
    if distance_to_diagonal(t) <= half_width {
        return Ok(None);
    }
    let a = t.abs();
    Ok(Some(if a < 45.0 {
        SpatialLabel::Front
    } else if a > 135.0 {
        SpatialLabel::Back
    } else if t > 0.0 {
        SpatialLabel::Right
    } else {
        SpatialLabel::Left
    }))
}

/// Viewpoint position for a variant: camera for Ego, human for Allo.
pub fn viewpoint_position(layout: &SceneLayout, variant: TaskVariant) -> Result<Vec3> {
    match variant {
        TaskVariant::Ego => Ok(layout.camera.position),
        TaskVariant::Allo => layout
            .object(ObjectRole::Viewpoint)
            .map(|o| o.pose.position)
            .ok_or(Error::MissingObject(ObjectRole::Viewpoint)),
    }
}

/// Raw source→target bearing for a variant.
pub fn sample_angle(layout: &SceneLayout, variant: TaskVariant) -> Result<RelativeAngle> {
    let source = layout
        .object(ObjectRole::Source)
        .ok_or(Error::MissingObject(ObjectRole::Source))?;
    let target = layout
        .object(ObjectRole::Target)
        .ok_or(Error::MissingObject(ObjectRole::Target))?;
    let viewpoint = viewpoint_position(layout, variant)?;
    relative_angle(viewpoint, source.pose.position, target.pose.position)
}

/// Label of a layout at the default ambiguity half-width.
pub fn label_sample(layout: &SceneLayout, variant: TaskVariant) -> Result<Option<SpatialLabel>> {
    label_sample_with(layout, variant, DEFAULT_AMBIGUITY_HALF_WIDTH)
}

pub fn label_sample_with(
    layout: &SceneLayout,
    variant: TaskVariant,
    half_width: f64,
) -> Result<Option<SpatialLabel>> {
    classify_direction(sample_angle(layout, variant)?, half_width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn label(theta: f64) -> Option<SpatialLabel> {
        classify_direction(RelativeAngle::new(theta), 15.0).unwrap()
    }

    #[test]
    fn frame_axis_aligned() {
        let f = forward_frame(v(0., 0., 0.), v(10., 0., 0.)).unwrap();
        assert_eq!(f.forward, [1.0, 0.0]);
        assert_eq!(f.right, [0.0, -1.0]);
    }

    #[test]
    fn frame_three_four_five() {
        let f = forward_frame(v(0., 0., 0.), v(3., 4., 0.)).unwrap();
        assert_abs_diff_eq!(f.forward[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(f.forward[1], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(f.right[0], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(f.right[1], -0.6, epsilon = 1e-15);
    }

    #[test]
    fn frame_vertical_offset_is_degenerate() {
        assert!(matches!(
            forward_frame(v(5., 5., 2.), v(5., 5., 9.)),
            Err(Error::DegenerateFrame)
        ));
    }

    #[test]
    fn relative_angle_examples() {
        let o = v(0., 0., 0.);
        let t = relative_angle(o, v(10., 0., 0.), v(20., 0., 0.)).unwrap();
        assert_eq!(t.degrees(), 0.0);
        let t = relative_angle(o, v(10., 0., 0.), v(10., 5., 0.)).unwrap();
        assert_abs_diff_eq!(t.degrees(), -90.0, epsilon = 1e-12);
        let t = relative_angle(o, v(3., 4., 0.), v(7., 1., 0.)).unwrap();
        assert_abs_diff_eq!(t.degrees(), 90.0, epsilon = 1e-12);
        assert!(matches!(
            relative_angle(o, v(3., 4., 0.), v(3., 4., 7.)),
            Err(Error::DegenerateTarget)
        ));
    }

    #[test]
    fn class_centers() {
        assert_eq!(label(0.0), Some(SpatialLabel::Front));
        assert_eq!(label(90.0), Some(SpatialLabel::Right));
        assert_eq!(label(180.0), Some(SpatialLabel::Back));
        assert_eq!(label(-90.0), Some(SpatialLabel::Left));
    }

    #[test]
    fn ambiguity_zone_is_closed() {
        assert_eq!(label(44.0), None);
        assert_eq!(label(30.0), None);
        assert_eq!(label(-150.0), None);
        assert_eq!(label(29.9), Some(SpatialLabel::Front));
        assert_eq!(label(-60.1), Some(SpatialLabel::Left));
        assert_eq!(label(150.1), Some(SpatialLabel::Back));
    }

    #[test]
    fn half_width_range() {
        let t = RelativeAngle::new(0.0);
        assert!(classify_direction(t, 45.0).is_err());
        assert!(classify_direction(t, -1.0).is_err());
        assert_eq!(classify_direction(t, 0.0).unwrap(), Some(SpatialLabel::Front));
        // zero width still rejects the exact diagonal
        assert_eq!(classify_direction(RelativeAngle::new(45.0), 0.0).unwrap(), None);
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_eq!(wrap_degrees(540.0), 180.0);
        assert_eq!(wrap_degrees(-190.0), 170.0);
        assert_eq!(wrap_degrees(-1e-20), -1e-20);
        assert_eq!(wrap_degrees(-540.0), 180.0);
    }

    #[test]
    fn pose_validation() {
        let p = Pose6DoF::new(Vec3::ZERO, 270.0, 0.0, -180.0).unwrap();
        assert_eq!(p.yaw, -90.0);
        assert_eq!(p.roll, 180.0);
        assert!(Pose6DoF::new(Vec3::ZERO, 0.0, 91.0, 0.0).is_err());
        assert!(Pose6DoF::new(v(f64::NAN, 0., 0.), 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn label_text() {
        for l in SpatialLabel::ALL {
            assert_eq!(l.as_str().parse::<SpatialLabel>().unwrap(), l);
            assert_eq!(serde_json::to_string(&l).unwrap(), format!("\"{l}\""));
        }
    }
}
