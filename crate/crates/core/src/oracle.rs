//! Synthetic token features computed straight from scene geometry, plus an
//! independent label oracle.
//!
//! Per patch token the feature row is
//! `[one-hot(category) | col, row | depth | noise...]`; the trailing CLS-like
//! token carries zeros plus noise. Disabled channels are zeroed, so the
//! dimension never depends on the channel toggles.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{token_occupancy, CameraIntrinsics, Occupancy};
use crate::error::{Error, Result};
use crate::geometry::{SpatialLabel, TaskVariant, Vec3};
use crate::rng::{keyed, Stream};
use crate::scene::{CategoryId, ObjectRole, SceneLayout, BACKGROUND, CLS_TOKEN};
use crate::store::FeatureTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Channels {
    pub category_onehot: bool,
    pub token_xy: bool,
    pub depth: bool,
    pub noise: bool,
}

impl Default for Channels {
    fn default() -> Self {
        Channels {
            category_onehot: true,
            token_xy: true,
            depth: true,
            noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub dim: usize,
    /// Width of the one-hot block; category ids must be below it.
    pub n_categories: usize,
    pub channels: Channels,
    pub noise_sigma: f64,
    /// Depth that maps to 1.0 in the depth channel.
    pub max_depth: f64,
    /// Categories rendered as background everywhere (causal ablation).
    pub masked_categories: Vec<CategoryId>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            dim: 32,
            n_categories: 7,
            channels: Channels::default(),
            noise_sigma: 0.1,
            max_depth: 40.0,
            masked_categories: Vec::new(),
        }
    }
}

impl OracleSpec {
    pub fn xy_offset(&self) -> usize {
        self.n_categories
    }

    pub fn depth_offset(&self) -> usize {
        self.n_categories + 2
    }

    pub fn noise_offset(&self) -> usize {
        self.n_categories + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories < 2 {
            return Err(Error::invalid("oracle needs at least 2 category slots"));
        }
        if self.dim < self.n_categories + 5 {
            return Err(Error::invalid(format!(
                "oracle dim {} below {} (categories + 5)",
                self.dim,
                self.n_categories + 5
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and non-negative"));
        }
        if !(self.max_depth > 0.0) {
            return Err(Error::invalid("max_depth must be positive"));
        }
        Ok(())
    }
}

/// Token features for a layout: patches row-major, then one CLS-like token.
pub fn encode_scene(
    layout: &SceneLayout,
    intrinsics: &CameraIntrinsics,
    spec: &OracleSpec,
    seed: u64,
) -> Result<FeatureTensor> {
    Ok(encode_with_occupancy(layout, intrinsics, spec, seed)?.0)
}

/// As [`encode_scene`], also returning the occupancy the features were built from
/// (after masking).
pub fn encode_with_occupancy(
    layout: &SceneLayout,
    intrinsics: &CameraIntrinsics,
    spec: &OracleSpec,
    seed: u64,
) -> Result<(FeatureTensor, Occupancy)> {
    spec.validate()?;
    intrinsics.validate()?;
    let mut occ = token_occupancy(&layout.camera, intrinsics, layout);
    for (cell, depth) in occ.map.cells.iter_mut().zip(occ.depth.iter_mut()) {
        if spec.masked_categories.contains(cell) {
            *cell = BACKGROUND;
            *depth = 0.0;
        }
    }
    occ.map = occ.map.with_specials(vec![CLS_TOKEN]);
    let (rows, cols) = (intrinsics.grid_rows as usize, intrinsics.grid_cols as usize);
    let d = spec.dim;
    let n_tokens = rows * cols + 1;
    let mut values = vec![0f32; n_tokens * d];
    let ch = spec.channels;
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    for (i, row) in values.chunks_exact_mut(d).take(rows * cols).enumerate() {
        let cat = occ.map.cells[i] as usize;
        if cat >= spec.n_categories {
            return Err(Error::invalid(format!(
                "category {cat} does not fit {} one-hot slots",
                spec.n_categories
            )));
        }
        if ch.category_onehot {
            row[cat] = 1.0;
        }
        if ch.token_xy {
            row[spec.xy_offset()] = norm(i % cols, cols) as f32;
            row[spec.xy_offset() + 1] = norm(i / cols, rows) as f32;
        }
        if ch.depth {
            row[spec.depth_offset()] = (occ.depth[i] / spec.max_depth) as f32;
        }
    }
    if ch.noise && spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = keyed(seed, layout.scene_index, Stream::OracleNoise);
        for row in values.chunks_exact_mut(d) {
            for v in &mut row[spec.noise_offset()..] {
                *v = normal.sample(&mut rng) as f32;
            }
        }
    }
    Ok((FeatureTensor::new(n_tokens as u32, d as u32, 0, values)?, occ))
}

/// Label recomputed without the frame/atan2 path: the target bearing is
/// measured as a compass angle and tested against explicit open arcs.
pub fn brute_force_label_oracle(layout: &SceneLayout, variant: TaskVariant) -> Option<SpatialLabel> {
    let pos = |role| layout.object(role).map(|o| o.pose.position);
    let source = pos(ObjectRole::Source)?;
    let target = pos(ObjectRole::Target)?;
    let viewpoint: Vec3 = match variant {
        TaskVariant::Ego => layout.camera.position,
        TaskVariant::Allo => pos(ObjectRole::Viewpoint)?,
    };
    let bearing = |a: Vec3, b: Vec3| (b.y - a.y).atan2(b.x - a.x).to_degrees();
    // heading of the target, counter-clockwise from forward, in [0, 360)
    let ccw = (bearing(source, target) - bearing(viewpoint, source)).rem_euclid(360.0);
    // (label, arc start, arc end), all open intervals in counter-clockwise degrees
    const ARCS: [(SpatialLabel, f64, f64); 5] = [
        (SpatialLabel::Front, -1.0, 30.0),
        (SpatialLabel::Left, 60.0, 120.0),
        (SpatialLabel::Back, 150.0, 210.0),
        (SpatialLabel::Right, 240.0, 300.0),
        (SpatialLabel::Front, 330.0, 361.0),
    ];
    ARCS.iter()
        .find(|(_, lo, hi)| ccw > *lo && ccw < *hi)
        .map(|(l, _, _)| *l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose6DoF;
    use crate::scene::{Aabb, SceneObject};

    fn obj(role: ObjectRole, cat: CategoryId, x: f64, y: f64) -> SceneObject {
        let p = Vec3::new(x, y, 0.5);
        SceneObject {
            category: cat,
            role,
            pose: Pose6DoF::at(p),
            aabb: Aabb::from_center(p, Vec3::new(0.5, 0.5, 0.5)),
        }
    }

    fn layout(objects: Vec<SceneObject>) -> SceneLayout {
        SceneLayout {
            camera: Pose6DoF::at(Vec3::new(0.0, 0.0, 0.5)),
            objects,
            environment: "test".into(),
            scene_index: 3,
        }
    }

    #[test]
    fn empty_layout_rows_differ_only_in_xy() {
        let spec = OracleSpec {
            channels: Channels {
                noise: false,
                ..Channels::default()
            },
            ..OracleSpec::default()
        };
        let f = encode_scene(&layout(vec![]), &CameraIntrinsics::default(), &spec, 0).unwrap();
        assert_eq!(f.n_tokens, 197);
        let strip = |r: &[f32]| {
            let mut r = r.to_vec();
            r[spec.xy_offset()] = 0.0;
            r[spec.xy_offset() + 1] = 0.0;
            r
        };
        let first = strip(f.row(0));
        for t in 1..196 {
            assert_eq!(strip(f.row(t)), first);
        }
        assert_eq!(f.row(0)[0], 1.0);
        assert!(f.row(196).iter().all(|&v| v == 0.0));
        assert_eq!(f.row(13)[spec.xy_offset()], 1.0);
        assert_eq!(f.row(13)[spec.xy_offset() + 1], 0.0);
    }

    #[test]
    fn single_object_onehot_matches_occupancy() {
        let spec = OracleSpec::default();
        let l = layout(vec![obj(ObjectRole::Source, 4, 10.0, 0.0)]);
        let k = CameraIntrinsics::default();
        let (f, occ) = encode_with_occupancy(&l, &k, &spec, 9).unwrap();
        let mut n = 0;
        for t in 0..196 {
            let hot = f.row(t)[4] == 1.0;
            assert_eq!(hot, occ.map.cells[t] == 4);
            n += hot as usize;
        }
        assert!(n > 0);
        let masked = OracleSpec {
            masked_categories: vec![4],
            ..spec.clone()
        };
        let f2 = encode_scene(&l, &k, &masked, 9).unwrap();
        assert!((0..196).all(|t| f2.row(t)[4] == 0.0 && f2.row(t)[0] == 1.0));
    }

    #[test]
    fn noise_is_seeded() {
        let spec = OracleSpec::default();
        let k = CameraIntrinsics::default();
        let l = layout(vec![]);
        assert_eq!(encode_scene(&l, &k, &spec, 1).unwrap(), encode_scene(&l, &k, &spec, 1).unwrap());
        assert_ne!(encode_scene(&l, &k, &spec, 1).unwrap(), encode_scene(&l, &k, &spec, 2).unwrap());
    }

    #[test]
    fn oracle_axis_cases() {
        let make = |tx: f64, ty: f64| {
            let mut l = layout(vec![
                obj(ObjectRole::Source, 1, 10.0, 0.0),
                obj(ObjectRole::Target, 2, tx, ty),
                obj(ObjectRole::Viewpoint, 6, -5.0, 0.0),
            ]);
            l.camera = Pose6DoF::at(Vec3::new(0.0, 0.0, 1.7));
            l
        };
        let ego = |tx, ty| brute_force_label_oracle(&make(tx, ty), TaskVariant::Ego);
        assert_eq!(ego(20.0, 0.0), Some(SpatialLabel::Front));
        assert_eq!(ego(10.0, 5.0), Some(SpatialLabel::Left));
        assert_eq!(ego(10.0, -5.0), Some(SpatialLabel::Right));
        assert_eq!(ego(0.0, 0.0), Some(SpatialLabel::Back));
        assert_eq!(ego(15.0, 5.0), None);
        assert_eq!(
            brute_force_label_oracle(&make(20.0, 0.0), TaskVariant::Allo),
            Some(SpatialLabel::Front)
        );
    }
}
