//! Zero-level-set extraction: SDF lattice sampling, marching cubes, floater
//! removal, per-triangle UV charts and mesh file I/O.

mod atlas;
mod components;
mod io;
mod mc;
mod tables;

pub use atlas::{generate_uv_atlas, AtlasConfig, ChartRect, UvAtlas};
pub use components::{connected_components, select_main_component};
pub use io::{read_obj, read_ply, write_obj, write_ply, ObjFiles};
pub use mc::marching_cubes;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::ParamVector;
use crate::field::{FieldError, SdfField};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("atlas overflow: {charts} charts need more than {max}x{max} texels; raise the maximum atlas resolution or lower texels_per_unit")]
    AtlasOverflow { charts: usize, max: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self::cube(1.0)
    }
}

/// Signed distances on an `N x N x N` lattice whose outermost samples lie on
/// the bounds. Values are stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub bounds: Bounds,
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(resolution: usize, bounds: Bounds, values: Vec<f64>) -> Result<Self, MeshError> {
        if resolution < 2 {
            return Err(MeshError::Grid(format!("resolution {resolution} is below 2")));
        }
        if values.len() != resolution.pow(3) {
            return Err(MeshError::Grid(format!(
                "{} values for resolution {resolution}",
                values.len()
            )));
        }
        if (0..3).any(|a| !(bounds.max[a] > bounds.min[a])) {
            return Err(MeshError::Grid("degenerate bounds".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MeshError::Grid("non-finite value".into()));
        }
        Ok(Self {
            resolution,
            bounds,
            values,
        })
    }

    /// Samples `f` at every lattice point.
    pub fn from_fn(
        resolution: usize,
        bounds: Bounds,
        f: impl Fn([f64; 3]) -> f64,
    ) -> Result<Self, MeshError> {
        let pts = lattice_points(resolution, bounds);
        Self::new(resolution, bounds, pts.into_iter().map(f).collect())
    }

    /// Spacing between neighbouring samples along each axis.
    pub fn spacing(&self) -> [f64; 3] {
        let n = (self.resolution - 1) as f64;
        [0, 1, 2].map(|a| (self.bounds.max[a] - self.bounds.min[a]) / n)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution + j) * self.resolution + i
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        lattice_point(self.resolution, self.bounds, [i, j, k])
    }
}

fn lattice_point(n: usize, b: Bounds, ijk: [usize; 3]) -> [f64; 3] {
    let last = (n - 1) as f64;
    [0, 1, 2].map(|a| {
        let u = ijk[a] as f64 / last;
        b.min[a] * (1.0 - u) + b.max[a] * u
    })
}

fn lattice_points(n: usize, b: Bounds) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                pts.push(lattice_point(n, b, [i, j, k]));
            }
        }
    }
    pts
}

/// Evaluates the field's signed distance on the lattice.
pub fn sample_sdf_grid(
    field: &SdfField,
    params: &ParamVector,
    resolution: usize,
    bounds: Bounds,
) -> Result<VoxelGrid, MeshError> {
    if resolution < 8 {
        return Err(MeshError::Grid(format!("resolution {resolution} is below 8")));
    }
    let values = field.sdf_batch(params, &lattice_points(resolution, bounds))?;
    VoxelGrid::new(resolution, bounds, values)
}

/// Per-face UV coordinates, indexed separately from positions so that
/// neighbouring charts need not share texture coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UvLayer {
    pub coords: Vec<[f64; 2]>,
    pub faces: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub uv: Option<UvLayer>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        let mesh = Self {
            vertices,
            faces,
            uv: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let n = self.vertices.len();
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i as usize >= n)) {
            return Err(MeshError::Invalid(format!("face {f:?} indexes past {n} vertices")));
        }
        if let Some(uv) = &self.uv {
            if uv.faces.len() != self.faces.len() {
                return Err(MeshError::Invalid(format!(
                    "{} uv faces for {} faces",
                    uv.faces.len(),
                    self.faces.len()
                )));
            }
            let m = uv.coords.len();
            if uv.faces.iter().any(|f| f.iter().any(|&i| i as usize >= m)) {
                return Err(MeshError::Invalid("uv face index out of range".into()));
            }
        }
        Ok(())
    }

    pub fn triangle(&self, f: usize) -> [[f64; 3]; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    pub fn face_uvs(&self, f: usize) -> Option<[[f64; 2]; 3]> {
        self.uv
            .as_ref()
            .map(|uv| uv.faces[f].map(|i| uv.coords[i as usize]))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    /// Unnormalized face normal (twice the area).
    pub fn face_normal(&self, f: usize) -> [f64; 3] {
        let [a, b, c] = self.triangle(f);
        cross(sub(b, a), sub(c, a))
    }

    /// Undirected edge use counts.
    pub fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &i in f {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_counts().len() as i64 + self.faces.len() as i64
    }

    /// Keeps the listed faces and drops vertices no longer referenced.
    pub fn subset(&self, keep: &[usize]) -> TriangleMesh {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut faces = Vec::with_capacity(keep.len());
        for &f in keep {
            faces.push(self.faces[f].map(|i| {
                let slot = &mut remap[i as usize];
                if *slot == u32::MAX {
                    *slot = vertices.len() as u32;
                    vertices.push(self.vertices[i as usize]);
                }
                *slot
            }));
        }
        let uv = self.uv.as_ref().map(|uv| {
            let mut remap = vec![u32::MAX; uv.coords.len()];
            let mut coords = Vec::new();
            let faces = keep
                .iter()
                .map(|&f| {
                    uv.faces[f].map(|i| {
                        let slot = &mut remap[i as usize];
                        if *slot == u32::MAX {
                            *slot = coords.len() as u32;
                            coords.push(uv.coords[i as usize]);
                        }
                        *slot
                    })
                })
                .collect();
            UvLayer { coords, faces }
        });
        TriangleMesh {
            vertices,
            faces,
            uv,
        }
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshingConfig {
    /// Lattice samples per axis.
    pub resolution: usize,
    pub bounds: Bounds,
    pub atlas: AtlasConfig,
}

impl Default for MeshingConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            bounds: Bounds::default(),
            atlas: AtlasConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lattice_spans_bounds() {
        let g = VoxelGrid::from_fn(5, Bounds::cube(1.0), |p| p[0]).unwrap();
        assert_eq!(g.point(0, 0, 0), [-1.0; 3]);
        assert_eq!(g.point(4, 4, 4), [1.0; 3]);
        assert_eq!(g.value(2, 3, 1), 0.0);
        assert_eq!(g.spacing(), [0.5; 3]);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(VoxelGrid::new(2, Bounds::default(), vec![0.0; 7]).is_err());
        assert!(VoxelGrid::new(2, Bounds::cube(0.0), vec![0.0; 8]).is_err());
        assert!(VoxelGrid::new(2, Bounds::default(), vec![f64::NAN; 8]).is_err());
    }

    fn small_field() -> (SdfField, ParamVector) {
        let field = SdfField::new(FieldConfig {
            num_frequencies: 2,
            hidden_width: 16,
            hidden_layers: 2,
            color_width: 4,
            ..FieldConfig::default()
        });
        let params = field.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        (field, params)
    }

    #[test]
    fn coarse_and_fine_grids_agree_on_shared_points() {
        // 8 and 16 cells per axis: every coarse sample is a fine sample.
        let (field, params) = small_field();
        let coarse = sample_sdf_grid(&field, &params, 9, Bounds::default()).unwrap();
        let fine = sample_sdf_grid(&field, &params, 17, Bounds::default()).unwrap();
        for k in 0..9 {
            for j in 0..9 {
                for i in 0..9 {
                    assert_eq!(coarse.point(i, j, k), fine.point(2 * i, 2 * j, 2 * k));
                    assert_eq!(coarse.value(i, j, k), fine.value(2 * i, 2 * j, 2 * k));
                }
            }
        }
        assert!(sample_sdf_grid(&field, &params, 4, Bounds::default()).is_err());
    }

    #[test]
    fn sphere_field_grid_changes_sign_only_near_shell() {
        let field = SdfField::new(FieldConfig {
            num_frequencies: 2,
            hidden_width: 32,
            hidden_layers: 2,
            color_width: 8,
            ..FieldConfig::default()
        });
        let params = crate::field::init_sphere(
            &field,
            0.5,
            crate::field::SphereFit::default(),
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap();
        let g = sample_sdf_grid(&field, &params, 16, Bounds::default()).unwrap();
        let h = g.spacing()[0];
        let n = g.resolution;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let v = g.value(i, j, k);
                    for (di, dj, dk) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                        let (a, b, c) = (i + di, j + dj, k + dk);
                        if a < n && b < n && c < n && (v < 0.0) != (g.value(a, b, c) < 0.0) {
                            let r0 = norm(g.point(i, j, k));
                            let r1 = norm(g.point(a, b, c));
                            assert!(r0.min(r1) < 0.5 + h && r0.max(r1) > 0.5 - h, "{r0} {r1}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn subset_compacts_vertices_and_uvs() {
        let mut m = TriangleMesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap();
        m.uv = Some(UvLayer {
            coords: vec![[0.0; 2], [0.1, 0.0], [0.0, 0.1], [0.5, 0.5], [0.6, 0.5], [0.5, 0.6]],
            faces: vec![[0, 1, 2], [3, 4, 5]],
        });
        let s = m.subset(&[1]);
        assert_eq!(s.faces, vec![[0, 1, 2]]);
        assert_eq!(s.vertices, vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        assert_eq!(s.uv.unwrap().coords, vec![[0.5, 0.5], [0.6, 0.5], [0.5, 0.6]]);
        assert!(TriangleMesh::new(vec![[0.0; 3]], vec![[0, 0, 1]]).is_err());
    }
}
