//! Scene layout types shared by the sampler, projection and labeling code.

use serde::{Deserialize, Serialize};

use crate::geometry::{Pose6DoF, Vec3};

/// Small integer category id. 0 is background; ids at or above
/// [`SPECIAL_BASE`] mark non-patch tokens.
pub type CategoryId = u16;

pub const BACKGROUND: CategoryId = 0;
pub const SPECIAL_BASE: CategoryId = 0xFF00;
pub const CLS_TOKEN: CategoryId = SPECIAL_BASE;
pub const REGISTER_TOKEN: CategoryId = SPECIAL_BASE + 1;

pub fn is_special(id: CategoryId) -> bool {
    id >= SPECIAL_BASE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectRole {
    Source,
    Target,
    /// The human whose position anchors the allocentric frame.
    Viewpoint,
    Distractor,
}

/// Axis-aligned box, inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_center(center: Vec3, half: Vec3) -> Self {
        Aabb {
            min: center - half,
            max: center + half,
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max).scale(0.5)
    }

    /// Touching faces count as overlap.
    pub fn overlaps(&self, other: &Aabb) -> bool {
        self.min.x <= other.max.x
            && other.min.x <= self.max.x
            && self.min.y <= other.max.y
            && other.min.y <= self.max.y
            && self.min.z <= other.max.z
            && other.min.z <= self.max.z
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }

    pub fn translated(&self, d: Vec3) -> Aabb {
        Aabb {
            min: self.min + d,
            max: self.max + d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: CategoryId,
    pub role: ObjectRole,
    pub pose: Pose6DoF,
    pub aabb: Aabb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub camera: Pose6DoF,
    pub objects: Vec<SceneObject>,
    pub environment: String,
    pub scene_index: u64,
}

impl SceneLayout {
    /// First object with the given role.
    pub fn object(&self, role: ObjectRole) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.role == role)
    }

    pub fn task_objects(&self) -> impl Iterator<Item = &SceneObject> {
        self.objects
            .iter()
            .filter(|o| o.role != ObjectRole::Distractor)
    }
}

/// The (source, target, viewpoint) category combination a probe is trained on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripleSpec {
    pub source: String,
    pub target: String,
    pub viewpoint: String,
}

impl TripleSpec {
    pub fn new(source: &str, target: &str, viewpoint: &str) -> Self {
        TripleSpec {
            source: source.to_owned(),
            target: target.to_owned(),
            viewpoint: viewpoint.to_owned(),
        }
    }

    /// `source-target-viewpoint`, used in file and report names.
    pub fn key(&self) -> String {
        format!("{}-{}-{}", self.source, self.target, self.viewpoint)
    }
}

impl std::str::FromStr for TripleSpec {
    type Err = crate::Error;

    /// Parses `source,target,viewpoint`.
    fn from_str(s: &str) -> crate::Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [a, b, c] if !a.is_empty() && !b.is_empty() && !c.is_empty() => {
                Ok(TripleSpec::new(a, b, c))
            }
            _ => Err(crate::Error::invalid(format!(
                "triple `{s}` must be source,target,viewpoint"
            ))),
        }
    }
}

impl std::fmt::Display for TripleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.key())
    }
}
