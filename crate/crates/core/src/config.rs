//! Environment configuration and the versioned TOML config file.
//!
//! Placement numbers (sigma, annulus, heights, distance limits) are
//! engineering defaults, not measured values; every one of them can be
//! overridden per environment in the config file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::oracle::OracleSpec;
use crate::scene::{CategoryId, TripleSpec, BACKGROUND};
use crate::train::ProbeConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable naming the default config file.
pub const CONFIG_ENV_VAR: &str = "SPATIAL_BENCH_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn square(half: f64) -> Self {
        Rect {
            min: [-half, -half],
            max: [half, half],
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }

    fn is_valid(&self) -> bool {
        self.min[0] <= self.max[0] && self.min[1] <= self.max[1]
    }
}

/// Terrain surface. Heights are meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Terrain {
    /// Unbounded constant-height plane.
    Flat { height: f64 },
    /// Bilinear heightfield. `heights[row * cols + col]` sits at
    /// `(origin.x + col * spacing, origin.y + row * spacing)`.
    Grid {
        origin: [f64; 2],
        spacing: f64,
        cols: usize,
        rows: usize,
        heights: Vec<f64>,
    },
    /// `amplitude * sin(2πx/λ) * cos(2πy/λ)` inside `extent`.
    Waves {
        extent: Rect,
        amplitude: f64,
        wavelength: f64,
    },
}

impl Terrain {
    fn validate(&self) -> Result<()> {
        match self {
            Terrain::Flat { height } if height.is_finite() => Ok(()),
            Terrain::Grid {
                spacing,
                cols,
                rows,
                heights,
                ..
            } if *spacing > 0.0 && *cols >= 2 && *rows >= 2 && heights.len() == cols * rows => {
                if heights.iter().all(|h| h.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::invalid("grid heights must be finite"))
                }
            }
            Terrain::Waves {
                extent, wavelength, ..
            } if extent.is_valid() && *wavelength > 0.0 => Ok(()),
            _ => Err(Error::invalid("malformed terrain")),
        }
    }
}

/// Size and grounding of one object category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: CategoryId,
    pub name: String,
    /// AABB half-extents in meters.
    pub half_extents: [f64; 3],
    /// Height of the pose origin above the ground; defaults to the half height
    /// so the box bottom sits on the terrain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_offset: Option<f64>,
}

impl CategorySpec {
    pub fn new(id: CategoryId, name: &str, half_extents: [f64; 3]) -> Self {
        CategorySpec {
            id,
            name: name.to_owned(),
            half_extents,
            ground_offset: None,
        }
    }

    pub fn offset(&self) -> f64 {
        self.ground_offset.unwrap_or(self.half_extents[2])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub count: usize,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: String,
    pub terrain: Terrain,
    /// Region the cluster center is drawn from, uniformly.
    pub placement_center: Rect,
    /// Per-axis standard deviation of object offsets from the center.
    pub placement_sigma: f64,
    /// Camera distance from the object centroid, `[r_min, r_max]`, uniform over the annulus area.
    pub camera_annulus: [f64; 2],
    /// Camera height above the mean object base elevation.
    pub camera_height: [f64; 2],
    pub min_pair_distance: f64,
    pub max_spread: f64,
    /// Objects must stay this many degrees inside the horizontal half-FOV.
    pub visibility_margin_deg: f64,
    pub ambiguity_half_width: f64,
    pub categories: Vec<CategorySpec>,
    #[serde(default)]
    pub distractors: DistractorSpec,
    #[serde(default)]
    pub intrinsics: CameraIntrinsics,
    /// Keep ego and allo label counts equal across accepted samples.
    pub balance_labels: bool,
    pub default_triple: TripleSpec,
}

/// Category table shared by the built-in environments.
pub fn default_categories() -> Vec<CategorySpec> {
    vec![
        CategorySpec::new(1, "tree", [1.0, 1.0, 3.0]),
        CategorySpec::new(2, "rock", [0.8, 0.8, 0.5]),
        CategorySpec::new(3, "cone", [0.25, 0.25, 0.4]),
        CategorySpec::new(4, "truck", [2.5, 1.2, 1.5]),
        CategorySpec::new(5, "car", [2.2, 0.9, 0.75]),
        CategorySpec::new(6, "human", [0.3, 0.3, 0.9]),
    ]
}

impl EnvConfig {
    /// The flat reference environment.
    pub fn flat() -> Self {
        EnvConfig {
            name: "flat".into(),
            terrain: Terrain::Flat { height: 0.0 },
            placement_center: Rect::square(20.0),
            placement_sigma: 4.0,
            camera_annulus: [8.0, 20.0],
            camera_height: [1.2, 6.0],
            min_pair_distance: 2.0,
            max_spread: 15.0,
            visibility_margin_deg: 1.0,
            ambiguity_half_width: crate::geometry::DEFAULT_AMBIGUITY_HALF_WIDTH,
            categories: default_categories(),
            distractors: DistractorSpec::default(),
            intrinsics: CameraIntrinsics::default(),
            balance_labels: true,
            default_triple: TripleSpec::new("tree", "truck", "human"),
        }
    }

    pub fn builtin_names() -> Vec<String> {
        ["flat", "forest", "desert", "town", "city"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let base = EnvConfig::flat();
        let waves = |amplitude, wavelength| Terrain::Waves {
            extent: Rect::square(120.0),
            amplitude,
            wavelength,
        };
        Some(match name {
            "flat" => base,
            "forest" => EnvConfig {
                name: name.into(),
                terrain: waves(1.5, 45.0),
                default_triple: TripleSpec::new("tree", "rock", "human"),
                ..base
            },
            "desert" => EnvConfig {
                name: name.into(),
                terrain: waves(3.0, 90.0),
                default_triple: TripleSpec::new("rock", "car", "human"),
                ..base
            },
            "town" => EnvConfig {
                name: name.into(),
                terrain: Terrain::Grid {
                    origin: [-120.0, -120.0],
                    spacing: 80.0,
                    cols: 4,
                    rows: 4,
                    heights: vec![
                        0.0, 0.5, 1.0, 1.5, //
                        0.5, 1.0, 2.0, 2.0, //
                        1.0, 1.5, 2.5, 3.0, //
                        1.5, 2.0, 3.0, 4.0,
                    ],
                },
                default_triple: TripleSpec::new("cone", "car", "human"),
                ..base
            },
            "city" => EnvConfig {
                name: name.into(),
                distractors: DistractorSpec {
                    count: 1,
                    categories: vec!["cone".into()],
                },
                default_triple: TripleSpec::new("tree", "car", "human"),
                ..base
            },
            _ => return None,
        })
    }

    pub fn category(&self, name: &str) -> Result<&CategorySpec> {
        self.categories
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_owned()))
    }

    pub fn category_by_id(&self, id: CategoryId) -> Option<&CategorySpec> {
        self.categories.iter().find(|c| c.id == id)
    }

    /// One more than the largest category id; the width of a category one-hot.
    pub fn category_slots(&self) -> usize {
        self.categories.iter().map(|c| c.id as usize + 1).max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("environment `{}`: {m}", self.name)));
        self.terrain.validate()?;
        self.intrinsics.validate()?;
        if !self.placement_center.is_valid() {
            return bad("placement_center min exceeds max".into());
        }
        if !(self.placement_sigma > 0.0) {
            return bad("placement_sigma must be positive".into());
        }
        let [r0, r1] = self.camera_annulus;
        if !(r0 >= 0.0 && r0 < r1) {
            return bad(format!("camera_annulus [{r0}, {r1}] needs 0 <= r_min < r_max"));
        }
        if !(self.camera_height[0] <= self.camera_height[1]) {
            return bad("camera_height min exceeds max".into());
        }
        if !(self.min_pair_distance > 0.0 && self.max_spread > self.min_pair_distance) {
            return bad("need 0 < min_pair_distance < max_spread".into());
        }
        if !(0.0..45.0).contains(&self.ambiguity_half_width) {
            return bad("ambiguity_half_width must be in [0, 45)".into());
        }
        if self.visibility_margin_deg < 0.0 || self.visibility_margin_deg >= self.intrinsics.hfov_deg() / 2.0 {
            return bad("visibility margin must be in [0, hfov/2)".into());
        }
        for (i, c) in self.categories.iter().enumerate() {
            if c.id == BACKGROUND || crate::scene::is_special(c.id) {
                return bad(format!("category `{}` uses reserved id {}", c.name, c.id));
            }
            if c.half_extents.iter().any(|&e| !(e > 0.0)) {
                return bad(format!("category `{}` needs positive extents", c.name));
            }
            if self.categories[..i].iter().any(|o| o.id == c.id || o.name == c.name) {
                return bad(format!("duplicate category `{}`", c.name));
            }
        }
        for name in &self.distractors.categories {
            self.category(name)?;
        }
        if self.distractors.count > 0 && self.distractors.categories.is_empty() {
            return bad("distractors need at least one category".into());
        }
        Ok(())
    }
}

/// Top-level config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub version: u32,
    #[serde(default, rename = "environment")]
    pub environments: Vec<EnvConfig>,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            version: CONFIG_VERSION,
            environments: Vec::new(),
            oracle: OracleSpec::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Versioned {
            version: Option<u32>,
        }
        let v: Versioned = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        match v.version {
            Some(CONFIG_VERSION) => {}
            Some(found) => {
                return Err(Error::SchemaMismatch {
                    found,
                    expected: CONFIG_VERSION,
                })
            }
            None => return Err(Error::Config("missing `version`".into())),
        }
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for env in &cfg.environments {
            env.validate()?;
        }
        cfg.probe.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Looks up an environment: config-file entries shadow built-ins.
    pub fn environment(&self, name: &str) -> Result<EnvConfig> {
        if let Some(env) = self.environments.iter().find(|e| e.name == name) {
            return Ok(env.clone());
        }
        EnvConfig::builtin(name).ok_or_else(|| Error::UnknownEnvironment {
            name: name.to_owned(),
            known: self.environment_names(),
        })
    }

    pub fn environment_names(&self) -> Vec<String> {
        let mut names = EnvConfig::builtin_names();
        for e in &self.environments {
            if !names.contains(&e.name) {
                names.push(e.name.clone());
            }
        }
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for name in EnvConfig::builtin_names() {
            EnvConfig::builtin(&name).unwrap().validate().unwrap();
        }
        assert!(EnvConfig::builtin("moon").is_none());
    }

    #[test]
    fn config_roundtrip_and_version() {
        let mut cfg = BenchConfig::default();
        let mut env = EnvConfig::flat();
        env.name = "wide".into();
        env.camera_annulus = [10.0, 30.0];
        cfg.environments.push(env);
        let text = cfg.to_toml();
        assert_eq!(BenchConfig::parse(&text).unwrap(), cfg);
        let bumped = text.replacen("version = 1", "version = 9", 1);
        assert!(matches!(
            BenchConfig::parse(&bumped),
            Err(Error::SchemaMismatch { found: 9, expected: 1 })
        ));
        assert!(matches!(BenchConfig::parse("x = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_environment_lists_known() {
        let err = BenchConfig::default().environment("nope").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("flat") && msg.contains("city"), "{msg}");
    }

    #[test]
    fn invalid_env_rejected() {
        let mut env = EnvConfig::flat();
        env.camera_annulus = [5.0, 5.0];
        assert!(env.validate().is_err());
        let mut env = EnvConfig::flat();
        env.categories[0].half_extents[1] = 0.0;
        assert!(env.validate().is_err());
        let mut env = EnvConfig::flat();
        env.placement_sigma = 0.0;
        assert!(env.validate().is_err());
    }
}
