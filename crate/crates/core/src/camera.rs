//! Pinhole camera, point projection and patch-token occupancy.
//!
//! Occupancy is the renderer-free stand-in for segmentation masks: each
//! object's AABB is projected to a screen rectangle and every patch whose
//! center lies inside it takes the object's category, nearest depth first.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose6DoF, Vec3};
use crate::scene::{CategoryId, SceneLayout, BACKGROUND};

pub const CATEGORY_MAP_MAGIC: &[u8; 4] = b"SPCM";
pub const CATEGORY_MAP_VERSION: u32 = 1;

/// Points closer than this along the optical axis are behind the camera.
const NEAR_PLANE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_mm: f64,
    pub sensor_width_mm: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub grid_rows: u32,
    pub grid_cols: u32,
}

impl Default for CameraIntrinsics {
    /// 50 mm lens on a 50 mm sensor, 224 px square, 14×14 patches of 16 px.
    fn default() -> Self {
        CameraIntrinsics {
            focal_mm: 50.0,
            sensor_width_mm: 50.0,
            image_width: 224,
            image_height: 224,
            grid_rows: 14,
            grid_cols: 14,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_mm > 0.0 && self.sensor_width_mm > 0.0) {
            return Err(Error::invalid("focal length and sensor width must be positive"));
        }
        if self.grid_rows == 0
            || self.grid_cols == 0
            || self.image_width % self.grid_cols != 0
            || self.image_height % self.grid_rows != 0
        {
            return Err(Error::invalid(format!(
                "image {}x{} not divisible into a {}x{} patch grid",
                self.image_width, self.image_height, self.grid_rows, self.grid_cols
            )));
        }
        Ok(())
    }

    pub fn hfov_deg(&self) -> f64 {
        // validated on construction paths; a bad lens here is a programming error
        hfov_from_lens(self.focal_mm, self.sensor_width_mm).expect("invalid lens")
    }

    /// Focal length in pixels (square pixels).
    pub fn focal_px(&self) -> f64 {
        self.focal_mm / self.sensor_width_mm * self.image_width as f64
    }

    pub fn n_patches(&self) -> usize {
        (self.grid_rows * self.grid_cols) as usize
    }

    pub fn patch_size(&self) -> (f64, f64) {
        (
            self.image_width as f64 / self.grid_cols as f64,
            self.image_height as f64 / self.grid_rows as f64,
        )
    }
}

/// Horizontal field of view in degrees.
pub fn hfov_from_lens(focal_mm: f64, sensor_width_mm: f64) -> Result<f64> {
    if !(focal_mm > 0.0 && sensor_width_mm > 0.0) || !focal_mm.is_finite() || !sensor_width_mm.is_finite() {
        return Err(Error::invalid(format!(
            "lens ({focal_mm} mm, {sensor_width_mm} mm) must be positive"
        )));
    }
    Ok(2.0 * (sensor_width_mm / (2.0 * focal_mm)).atan().to_degrees())
}

/// Camera axes in world coordinates.
#[derive(Debug, Clone, Copy)]
pub struct CameraBasis {
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
}

impl CameraBasis {
    pub fn from_pose(pose: &Pose6DoF) -> Self {
        let (sy, cy) = pose.yaw.to_radians().sin_cos();
        let (sp, cp) = pose.pitch.to_radians().sin_cos();
        let (sr, cr) = pose.roll.to_radians().sin_cos();
        let forward = Vec3::new(cp * cy, cp * sy, sp);
        let right0 = Vec3::new(sy, -cy, 0.0);
        let up0 = right0.cross(forward);
        CameraBasis {
            forward,
            right: right0.scale(cr) + up0.scale(sr),
            up: up0.scale(cr) - right0.scale(sr),
        }
    }

    /// (lateral, vertical, depth) in camera coordinates.
    pub fn to_camera(&self, origin: Vec3, world: Vec3) -> (f64, f64, f64) {
        let d = world - origin;
        (d.dot(self.right), d.dot(self.up), d.dot(self.forward))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pixel coordinates with (0,0) at the top-left corner, or `None` behind the camera.
pub fn project_point(camera: &Pose6DoF, intrinsics: &CameraIntrinsics, world: Vec3) -> Option<Projection> {
    let basis = CameraBasis::from_pose(camera);
    project_with(&basis, camera.position, intrinsics, world)
}

fn project_with(basis: &CameraBasis, origin: Vec3, k: &CameraIntrinsics, world: Vec3) -> Option<Projection> {
    let (x, y, depth) = basis.to_camera(origin, world);
    if depth <= NEAR_PLANE {
        return None;
    }
    let f = k.focal_px();
    Some(Projection {
        u: k.image_width as f64 / 2.0 + f * x / depth,
        v: k.image_height as f64 / 2.0 - f * y / depth,
        depth,
    })
}

/// Per-patch category ids plus trailing special-token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCategoryMap {
    pub rows: u32,
    pub cols: u32,
    /// Row-major patch ids, length rows·cols.
    pub cells: Vec<CategoryId>,
    /// Ids of the non-patch tokens that follow the patches.
    pub specials: Vec<CategoryId>,
}

impl TokenCategoryMap {
    pub fn background(rows: u32, cols: u32) -> Self {
        TokenCategoryMap {
            rows,
            cols,
            cells: vec![BACKGROUND; (rows * cols) as usize],
            specials: Vec::new(),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.cells.len() + self.specials.len()
    }

    /// Category of token `i` in flattened order (patches, then specials).
    pub fn token(&self, i: usize) -> CategoryId {
        if i < self.cells.len() {
            self.cells[i]
        } else {
            self.specials[i - self.cells.len()]
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = CategoryId> + '_ {
        self.cells.iter().chain(self.specials.iter()).copied()
    }

    pub fn with_specials(mut self, specials: Vec<CategoryId>) -> Self {
        self.specials = specials;
        self
    }

    pub fn count(&self, category: CategoryId) -> usize {
        self.tokens().filter(|&c| c == category).count()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CATEGORY_MAP_MAGIC)?;
        w.write_u32::<LittleEndian>(CATEGORY_MAP_VERSION)?;
        w.write_u32::<LittleEndian>(self.rows)?;
        w.write_u32::<LittleEndian>(self.cols)?;
        w.write_u32::<LittleEndian>(self.specials.len() as u32)?;
        for id in self.tokens() {
            w.write_u16::<LittleEndian>(id)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let corrupt = |e: std::io::Error| Error::CorruptFile(format!("category map: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(corrupt)?;
        if &magic != CATEGORY_MAP_MAGIC {
            return Err(Error::CorruptFile("category map: bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(corrupt)?;
        if version != CATEGORY_MAP_VERSION {
            return Err(Error::SchemaMismatch {
                found: version,
                expected: CATEGORY_MAP_VERSION,
            });
        }
        let rows = r.read_u32::<LittleEndian>().map_err(corrupt)?;
        let cols = r.read_u32::<LittleEndian>().map_err(corrupt)?;
        let n_special = r.read_u32::<LittleEndian>().map_err(corrupt)?;
        let n_cells = rows as usize * cols as usize;
        if n_cells > 1 << 24 || n_special > 1 << 16 {
            return Err(Error::CorruptFile("category map: implausible shape".into()));
        }
        let mut ids = vec![0u16; n_cells + n_special as usize];
        r.read_u16_into::<LittleEndian>(&mut ids).map_err(corrupt)?;
        let specials = ids.split_off(n_cells);
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(corrupt)? != 0 {
            return Err(Error::CorruptFile("category map: trailing bytes".into()));
        }
        Ok(TokenCategoryMap {
            rows,
            cols,
            cells: ids,
            specials,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + 2 * self.n_tokens());
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Category map plus the depth of the object owning each patch (0 for background).
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    pub map: TokenCategoryMap,
    pub depth: Vec<f64>,
}

/// Screen rectangle of an object, clipped to the near plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenRect {
    pub u0: f64,
    pub u1: f64,
    pub v0: f64,
    pub v1: f64,
    /// Depth of the box center along the optical axis.
    pub depth: f64,
}

pub fn object_rect(
    basis: &CameraBasis,
    origin: Vec3,
    k: &CameraIntrinsics,
    aabb: &crate::scene::Aabb,
) -> Option<ScreenRect> {
    let center = project_with(basis, origin, k, aabb.center())?;
    let mut rect = ScreenRect {
        u0: f64::INFINITY,
        u1: f64::NEG_INFINITY,
        v0: f64::INFINITY,
        v1: f64::NEG_INFINITY,
        depth: center.depth,
    };
    for p in aabb.corners().iter().filter_map(|&c| project_with(basis, origin, k, c)) {
        rect.u0 = rect.u0.min(p.u);
        rect.u1 = rect.u1.max(p.u);
        rect.v0 = rect.v0.min(p.v);
        rect.v1 = rect.v1.max(p.v);
    }
    Some(rect)
}

/// Index of the object owning each patch (nearest depth wins) and its depth.
///
/// An object whose rectangle intersects the image but contains no patch
/// center still claims the patch containing its rectangle's center, so any
/// visible object occupies at least one cell before occlusion.
pub fn object_owners(camera: &Pose6DoF, k: &CameraIntrinsics, layout: &SceneLayout) -> (Vec<Option<usize>>, Vec<f64>) {
    let basis = CameraBasis::from_pose(camera);
    let (rows, cols) = (k.grid_rows as usize, k.grid_cols as usize);
    let (pw, ph) = k.patch_size();
    let (w, h) = (k.image_width as f64, k.image_height as f64);
    let mut owner: Vec<Option<usize>> = vec![None; rows * cols];
    let mut depth = vec![0.0; rows * cols];
    let mut claim = |cell: usize, obj: usize, d: f64| {
        if owner[cell].is_none() || d < depth[cell] {
            owner[cell] = Some(obj);
            depth[cell] = d;
        }
    };
    for (i, obj) in layout.objects.iter().enumerate() {
        let Some(rect) = object_rect(&basis, camera.position, k, &obj.aabb) else {
            continue;
        };
        if rect.u1 < 0.0 || rect.u0 > w || rect.v1 < 0.0 || rect.v0 > h {
            continue;
        }
        // patch (r, c) has its center at ((c + 0.5)·pw, (r + 0.5)·ph)
        let c0 = (rect.u0 / pw - 0.5).ceil().max(0.0);
        let c1 = (rect.u1 / pw - 0.5).floor().min(cols as f64 - 1.0);
        let r0 = (rect.v0 / ph - 0.5).ceil().max(0.0);
        let r1 = (rect.v1 / ph - 0.5).floor().min(rows as f64 - 1.0);
        if c0 <= c1 && r0 <= r1 {
            for r in r0 as usize..=r1 as usize {
                for c in c0 as usize..=c1 as usize {
                    claim(r * cols + c, i, rect.depth);
                }
            }
        } else {
            let cu = ((rect.u0 + rect.u1) / 2.0).clamp(0.0, w - 1e-9);
            let cv = ((rect.v0 + rect.v1) / 2.0).clamp(0.0, h - 1e-9);
            let c = ((cu / pw) as usize).min(cols - 1);
            let r = ((cv / ph) as usize).min(rows - 1);
            claim(r * cols + c, i, rect.depth);
        }
    }
    (owner, depth)
}

/// Patch categories for a layout as seen from `camera`.
pub fn token_occupancy(camera: &Pose6DoF, k: &CameraIntrinsics, layout: &SceneLayout) -> Occupancy {
    let (owner, depth) = object_owners(camera, k, layout);
    let mut map = TokenCategoryMap::background(k.grid_rows, k.grid_cols);
    for (cell, o) in map.cells.iter_mut().zip(&owner) {
        if let Some(i) = o {
            *cell = layout.objects[*i].category;
        }
    }
    Occupancy { map, depth }
}
