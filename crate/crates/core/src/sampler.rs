//! Rejection sampling of scene layouts.
//!
//! One attempt is fully determined by `(seed, scene_index)`. Checks run in a
//! fixed order and the first failure is reported.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{object_owners, CameraBasis};
use crate::config::{CategorySpec, EnvConfig, Terrain};
use crate::error::{Error, Result};
use crate::geometry::{
    classify_direction, sample_angle, wrap_degrees, Pose6DoF, TaskVariant, Vec3, EPSILON_LEN,
};
use crate::rng::{keyed, Stream};
use crate::scene::{Aabb, ObjectRole, SceneLayout, SceneObject, TripleSpec};
use crate::store::SampleRecord;

/// Absolute slack on the frustum test so boundary points are not lost to rounding.
const VISIBILITY_TOLERANCE_DEG: f64 = 1e-9;

/// Attempts are evaluated in blocks of this many scene indices.
const BLOCK: u64 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    /// Coincident objects, or a camera sitting on the object centroid.
    Degenerate,
    /// An object or the camera falls outside the terrain extent.
    OffTerrain,
    TooClustered,
    TooSpread,
    Collision,
    OutOfFrustum,
    Ambiguous,
    /// A task object owns no patch token after depth resolution.
    Occluded,
    /// Valid scene dropped because its label class is already full.
    Unbalanced,
}

impl RejectionReason {
    pub const ALL: [RejectionReason; 9] = [
        RejectionReason::Degenerate,
        RejectionReason::OffTerrain,
        RejectionReason::TooClustered,
        RejectionReason::TooSpread,
        RejectionReason::Collision,
        RejectionReason::OutOfFrustum,
        RejectionReason::Ambiguous,
        RejectionReason::Occluded,
        RejectionReason::Unbalanced,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectionReason::Degenerate => "degenerate",
            RejectionReason::OffTerrain => "off_terrain",
            RejectionReason::TooClustered => "too_clustered",
            RejectionReason::TooSpread => "too_spread",
            RejectionReason::Collision => "collision",
            RejectionReason::OutOfFrustum => "out_of_frustum",
            RejectionReason::Ambiguous => "ambiguous",
            RejectionReason::Occluded => "occluded",
            RejectionReason::Unbalanced => "unbalanced",
        }
    }

    fn slot(self) -> usize {
        RejectionReason::ALL.iter().position(|&r| r == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RejectionStats {
    pub attempts: u64,
    pub accepted: u64,
    counts: [u64; 9],
}

impl RejectionStats {
    pub fn count(&self, reason: RejectionReason) -> u64 {
        self.counts[reason.slot()]
    }

    pub fn record(&mut self, outcome: std::result::Result<(), RejectionReason>) {
        self.attempts += 1;
        match outcome {
            Ok(()) => self.accepted += 1,
            Err(r) => self.counts[r.slot()] += 1,
        }
    }

    /// Associative, commutative merge.
    pub fn merge(&self, other: &RejectionStats) -> RejectionStats {
        let mut out = *self;
        out.attempts += other.attempts;
        out.accepted += other.accepted;
        for (a, b) in out.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        out
    }

    pub fn rejected(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (RejectionReason, u64)> + '_ {
        RejectionReason::ALL.iter().map(|&r| (r, self.count(r)))
    }
}

impl std::fmt::Display for RejectionStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "attempts {} accepted {}", self.attempts, self.accepted)?;
        for (r, n) in self.iter().filter(|(_, n)| *n > 0) {
            write!(f, " {} {}", r.as_str(), n)?;
        }
        Ok(())
    }
}

fn bilinear(origin: [f64; 2], spacing: f64, cols: usize, rows: usize, heights: &[f64], x: f64, y: f64) -> Option<f64> {
    let gx = (x - origin[0]) / spacing;
    let gy = (y - origin[1]) / spacing;
    let (maxx, maxy) = ((cols - 1) as f64, (rows - 1) as f64);
    if !(0.0..=maxx).contains(&gx) || !(0.0..=maxy).contains(&gy) {
        return None;
    }
    let c = (gx.floor() as usize).min(cols - 2);
    let r = (gy.floor() as usize).min(rows - 2);
    let (tx, ty) = (gx - c as f64, gy - r as f64);
    let h = |r: usize, c: usize| heights[r * cols + c];
    let bottom = h(r, c) * (1.0 - tx) + h(r, c + 1) * tx;
    let top = h(r + 1, c) * (1.0 - tx) + h(r + 1, c + 1) * tx;
    Some(bottom * (1.0 - ty) + top * ty)
}

/// Terrain height under `(x, y)`.
pub fn ground_height(env: &EnvConfig, x: f64, y: f64) -> Result<f64> {
    let h = match &env.terrain {
        Terrain::Flat { height } => Some(*height),
        Terrain::Grid {
            origin,
            spacing,
            cols,
            rows,
            heights,
        } => bilinear(*origin, *spacing, *cols, *rows, heights, x, y),
        Terrain::Waves {
            extent,
            amplitude,
            wavelength,
        } => extent
            .contains(x, y)
            .then(|| amplitude * (TAU * x / wavelength).sin() * (TAU * y / wavelength).cos()),
    };
    h.ok_or(Error::OutOfBounds { x, y })
}

pub fn check_aabb_overlap(a: &Aabb, b: &Aabb) -> bool {
    a.overlaps(b)
}

/// True iff every point is in front of the camera and within
/// `hfov/2 - margin` degrees of the optical axis horizontally.
pub fn check_visibility(camera: &Pose6DoF, points: &[Vec3], hfov: f64, margin: f64) -> bool {
    let basis = CameraBasis::from_pose(camera);
    let limit = hfov / 2.0 - margin + VISIBILITY_TOLERANCE_DEG;
    points.iter().all(|&p| {
        let (lateral, _, depth) = basis.to_camera(camera.position, p);
        depth > 0.0 && lateral.abs().atan2(depth).to_degrees() <= limit
    })
}

/// Outcome of one attempt.
pub type Attempt = std::result::Result<SceneLayout, RejectionReason>;

struct Placed {
    object: SceneObject,
    base: f64,
}

fn place(env: &EnvConfig, spec: &CategorySpec, role: ObjectRole, xy: [f64; 2], yaw: f64) -> Option<Placed> {
    let base = ground_height(env, xy[0], xy[1]).ok()?;
    let position = Vec3::new(xy[0], xy[1], base + spec.offset());
    let [hx, hy, hz] = spec.half_extents;
    let box_center = Vec3::new(xy[0], xy[1], base + hz);
    Some(Placed {
        object: SceneObject {
            category: spec.id,
            role,
            pose: Pose6DoF {
                position,
                yaw,
                pitch: 0.0,
                roll: 0.0,
            },
            aabb: Aabb::from_center(box_center, Vec3::new(hx, hy, hz)),
        },
        base,
    })
}

fn ground_distance(a: Vec3, b: Vec3) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Categories of a triple, resolved against the environment.
fn resolve_triple<'a>(env: &'a EnvConfig, triple: &TripleSpec) -> Result<[&'a CategorySpec; 3]> {
    Ok([
        env.category(&triple.source)?,
        env.category(&triple.target)?,
        env.category(&triple.viewpoint)?,
    ])
}

/// One rejection-sampling attempt for `(seed, scene_index)`.
pub fn sample_scene(env: &EnvConfig, triple: &TripleSpec, seed: u64, scene_index: u64) -> Result<Attempt> {
    let roles = resolve_triple(env, triple)?;
    let distractors = env
        .distractors
        .categories
        .iter()
        .map(|n| env.category(n))
        .collect::<Result<Vec<_>>>()?;
    let normal = Normal::new(0.0, env.placement_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut placement = keyed(seed, scene_index, Stream::Placement);
    let mut orientation = keyed(seed, scene_index, Stream::Orientation);
    let mut camera_rng = keyed(seed, scene_index, Stream::Camera);

    let region = env.placement_center;
    let center = [
        placement.random_range(region.min[0]..=region.max[0]),
        placement.random_range(region.min[1]..=region.max[1]),
    ];
    let draw_xy = |rng: &mut rand_chacha::ChaCha8Rng| {
        [center[0] + normal.sample(rng), center[1] + normal.sample(rng)]
    };
    let mut wanted: Vec<(&CategorySpec, ObjectRole)> = vec![
        (roles[0], ObjectRole::Source),
        (roles[1], ObjectRole::Target),
        (roles[2], ObjectRole::Viewpoint),
    ];
    for _ in 0..env.distractors.count {
        let pick = if distractors.len() == 1 {
            0
        } else {
            placement.random_range(0..distractors.len())
        };
        wanted.push((distractors[pick], ObjectRole::Distractor));
    }
    let mut placed = Vec::with_capacity(wanted.len());
    let mut off_terrain = false;
    for (spec, role) in wanted {
        let xy = draw_xy(&mut placement);
        let yaw = wrap_degrees(orientation.random_range(-180.0..180.0));
        match place(env, spec, role, xy, yaw) {
            Some(p) => placed.push(p),
            None => off_terrain = true,
        }
    }
    if off_terrain {
        return Ok(Err(RejectionReason::OffTerrain));
    }

    // camera: uniform over the annulus area around the task centroid, aimed at it
    let task = &placed[..3];
    let n = task.len() as f64;
    let aim = task
        .iter()
        .fold(Vec3::ZERO, |acc, p| acc + p.object.aabb.center())
        .scale(1.0 / n);
    let mean_base = task.iter().map(|p| p.base).sum::<f64>() / n;
    let [r0, r1] = env.camera_annulus;
    let radius = if r0 == r1 {
        r0
    } else {
        camera_rng.random_range(r0 * r0..r1 * r1).sqrt()
    };
    let phi = camera_rng.random_range(0.0..TAU);
    let [h0, h1] = env.camera_height;
    let height = if h0 == h1 { h0 } else { camera_rng.random_range(h0..h1) };
    let cam_pos = Vec3::new(aim.x + radius * phi.cos(), aim.y + radius * phi.sin(), mean_base + height);
    let to_aim = aim - cam_pos;
    let horizontal = to_aim.x.hypot(to_aim.y);
    let objects: Vec<SceneObject> = placed.into_iter().map(|p| p.object).collect();
    if horizontal <= EPSILON_LEN {
        return Ok(Err(RejectionReason::Degenerate));
    }
    match ground_height(env, cam_pos.x, cam_pos.y) {
        Ok(g) if g < cam_pos.z => {}
        _ => return Ok(Err(RejectionReason::OffTerrain)),
    }
    let camera = Pose6DoF {
        position: cam_pos,
        yaw: wrap_degrees(to_aim.y.atan2(to_aim.x).to_degrees()),
        pitch: to_aim.z.atan2(horizontal).to_degrees(),
        roll: 0.0,
    };
    let layout = SceneLayout {
        camera,
        objects,
        environment: env.name.clone(),
        scene_index,
    };
    Ok(validate_layout(env, &layout))
}

/// Runs the acceptance checks on a finished layout, in order.
pub fn validate_layout(env: &EnvConfig, layout: &SceneLayout) -> Attempt {
    check_layout(env, layout).map(|()| layout.clone())
}

fn check_layout(env: &EnvConfig, layout: &SceneLayout) -> std::result::Result<(), RejectionReason> {
    use RejectionReason::*;
    let objs = &layout.objects;
    let task: Vec<&SceneObject> = layout.task_objects().collect();
    let pairs = || (0..objs.len()).flat_map(move |i| (i + 1..objs.len()).map(move |j| (i, j)));
    let frames_ok = TaskVariant::ALL
        .iter()
        .all(|&v| sample_angle(layout, v).is_ok());
    if !frames_ok || pairs().any(|(i, j)| ground_distance(objs[i].pose.position, objs[j].pose.position) <= EPSILON_LEN)
    {
        return Err(Degenerate);
    }
    if pairs().any(|(i, j)| ground_distance(objs[i].pose.position, objs[j].pose.position) < env.min_pair_distance) {
        return Err(TooClustered);
    }
    for (a, b) in task.iter().enumerate().flat_map(|(i, a)| task[i + 1..].iter().map(move |b| (a, b))) {
        if ground_distance(a.pose.position, b.pose.position) > env.max_spread {
            return Err(TooSpread);
        }
    }
    if pairs().any(|(i, j)| check_aabb_overlap(&objs[i].aabb, &objs[j].aabb)) {
        return Err(Collision);
    }
    let corners: Vec<Vec3> = task.iter().flat_map(|o| o.aabb.corners()).collect();
    if !check_visibility(
        &layout.camera,
        &corners,
        env.intrinsics.hfov_deg(),
        env.visibility_margin_deg,
    ) {
        return Err(OutOfFrustum);
    }
    for v in TaskVariant::ALL {
        let theta = sample_angle(layout, v).map_err(|_| Degenerate)?;
        match classify_direction(theta, env.ambiguity_half_width) {
            Ok(Some(_)) => {}
            _ => return Err(Ambiguous),
        }
    }
    let (owners, _) = object_owners(&layout.camera, &env.intrinsics, layout);
    for (i, o) in objs.iter().enumerate() {
        if o.role != ObjectRole::Distractor && !owners.contains(&Some(i)) {
            return Err(Occluded);
        }
    }
    Ok(())
}

/// Generation knobs that are not part of the environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    /// Attempts allowed per requested sample.
    pub budget_factor: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { budget_factor: 100 }
    }
}

/// Samples scenes at `scene_index = 0, 1, 2, ...` until `n_valid` are accepted.
///
/// Attempts run in parallel blocks; acceptance (including the label quota when
/// `env.balance_labels` is set) is decided in index order, so the output does
/// not depend on the worker count.
pub fn generate_dataset(
    env: &EnvConfig,
    triple: &TripleSpec,
    n_valid: usize,
    seed: u64,
    opts: GenerateOptions,
) -> Result<(Vec<SampleRecord>, RejectionStats)> {
    if n_valid == 0 {
        return Err(Error::invalid("n_valid must be positive"));
    }
    env.validate()?;
    resolve_triple(env, triple)?;
    let budget = opts.budget_factor.saturating_mul(n_valid as u64);
    let quota = n_valid.div_ceil(4);
    let mut ego_counts = [0usize; 4];
    let mut allo_counts = [0usize; 4];
    let mut stats = RejectionStats::default();
    let mut records = Vec::with_capacity(n_valid);
    let mut next = 0u64;
    while records.len() < n_valid {
        if next >= budget {
            return Err(Error::BudgetExhausted {
                requested: n_valid,
                accepted: records.len(),
                attempts: stats.attempts,
            });
        }
        let end = (next + BLOCK).min(budget);
        let block: Vec<Attempt> = (next..end)
            .into_par_iter()
            .map(|i| sample_scene(env, triple, seed, i))
            .collect::<Result<_>>()?;
        for attempt in block {
            if records.len() == n_valid {
                break;
            }
            let outcome = match attempt {
                Err(reason) => Err(reason),
                Ok(layout) => {
                    let record = SampleRecord::from_layout(layout, triple, seed)?;
                    let (e, a) = (record.label_ego.index(), record.label_allo.index());
                    if env.balance_labels && (ego_counts[e] >= quota || allo_counts[a] >= quota) {
                        Err(RejectionReason::Unbalanced)
                    } else {
                        ego_counts[e] += 1;
                        allo_counts[a] += 1;
                        records.push(record);
                        Ok(())
                    }
                }
            };
            stats.record(outcome);
        }
        next = end;
    }
    Ok((records, stats))
}

/// Label frequencies in [`crate::geometry::SpatialLabel::ALL`] order.
pub fn label_histogram(records: &[SampleRecord], variant: TaskVariant) -> [usize; 4] {
    let mut h = [0; 4];
    for r in records {
        h[r.label(variant).index()] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Rect;
    use approx::assert_abs_diff_eq;

    fn grid_env() -> EnvConfig {
        EnvConfig {
            terrain: Terrain::Grid {
                origin: [0.0, 0.0],
                spacing: 10.0,
                cols: 2,
                rows: 2,
                heights: vec![0.0, 2.0, 0.0, 2.0],
            },
            ..EnvConfig::flat()
        }
    }

    #[test]
    fn ground_height_examples() {
        let flat = EnvConfig::flat();
        assert_eq!(ground_height(&flat, 123.0, -5.0).unwrap(), 0.0);
        let g = grid_env();
        assert_abs_diff_eq!(ground_height(&g, 5.0, 5.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ground_height(&g, 10.0, 10.0).unwrap(), 2.0, epsilon = 1e-12);
        assert!(matches!(ground_height(&g, 11.0, 5.0), Err(Error::OutOfBounds { .. })));
        let waves = EnvConfig {
            terrain: Terrain::Waves {
                extent: Rect::square(10.0),
                amplitude: 1.0,
                wavelength: 8.0,
            },
            ..EnvConfig::flat()
        };
        assert_abs_diff_eq!(ground_height(&waves, 2.0, 0.0).unwrap(), 1.0, epsilon = 1e-12);
        assert!(ground_height(&waves, 0.0, 10.5).is_err());
    }

    #[test]
    fn visibility_examples() {
        let cam = Pose6DoF::default();
        let hfov = crate::camera::hfov_from_lens(50.0, 50.0).unwrap();
        assert!(check_visibility(&cam, &[Vec3::new(10.0, 0.0, 0.0)], hfov, 1.0));
        assert!(!check_visibility(&cam, &[Vec3::new(0.0, 10.0, 0.0)], hfov, 1.0));
        let edge = (hfov / 2.0).to_radians();
        let p = Vec3::new(10.0 * edge.cos(), 10.0 * edge.sin(), 0.0);
        assert!(check_visibility(&cam, &[p], hfov, 0.0));
        assert!(!check_visibility(&cam, &[p], hfov, 0.5));
        assert!(!check_visibility(&cam, &[Vec3::new(-10.0, 0.0, 0.0)], hfov, 0.0));
    }

    #[test]
    fn deterministic_attempt() {
        let env = EnvConfig::flat();
        let t = env.default_triple.clone();
        for i in 0..50 {
            assert_eq!(sample_scene(&env, &t, 42, i).unwrap(), sample_scene(&env, &t, 42, i).unwrap());
        }
    }

    #[test]
    fn zero_annulus_is_degenerate() {
        let env = EnvConfig {
            camera_annulus: [0.0, 0.0],
            ..EnvConfig::flat()
        };
        let t = env.default_triple.clone();
        for i in 0..20 {
            assert_eq!(sample_scene(&env, &t, 1, i).unwrap(), Err(RejectionReason::Degenerate));
        }
    }

    #[test]
    fn stats_merge_and_sum() {
        let mut a = RejectionStats::default();
        a.record(Ok(()));
        a.record(Err(RejectionReason::Collision));
        let mut b = RejectionStats::default();
        b.record(Err(RejectionReason::Ambiguous));
        let m = a.merge(&b);
        assert_eq!(m, b.merge(&a));
        assert_eq!(m.attempts, 3);
        assert_eq!(m.rejected() + m.accepted, m.attempts);
    }

    #[test]
    fn small_dataset_balanced_and_consistent() {
        let env = EnvConfig::flat();
        let t = env.default_triple.clone();
        let (records, stats) = generate_dataset(&env, &t, 40, 3, GenerateOptions::default()).unwrap();
        assert_eq!(records.len(), 40);
        assert_eq!(stats.accepted, 40);
        assert_eq!(stats.rejected() + stats.accepted, stats.attempts);
        assert_eq!(label_histogram(&records, TaskVariant::Ego), [10; 4]);
        assert_eq!(label_histogram(&records, TaskVariant::Allo), [10; 4]);
    }

    #[test]
    fn budget_exhausted() {
        let env = EnvConfig::flat();
        let t = env.default_triple.clone();
        let err = generate_dataset(&env, &t, 5, 0, GenerateOptions { budget_factor: 1 }).unwrap_err();
        assert!(
            matches!(err, Error::BudgetExhausted { attempts: 5, requested: 5, accepted } if accepted < 5),
            "{err}"
        );
    }
}
