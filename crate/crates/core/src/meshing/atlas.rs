//! Per-triangle UV charts packed into a square atlas.

use serde::{Deserialize, Serialize};

use super::{dot, norm, sub, MeshError, TriangleMesh, UvLayer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtlasConfig {
    /// Texels per scene unit of surface length.
    pub texels_per_unit: f64,
    /// Empty texels kept around every chart.
    pub gutter: usize,
    /// Largest atlas side tried before giving up.
    pub max_resolution: usize,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        Self {
            texels_per_unit: 256.0,
            gutter: 2,
            max_resolution: 4096,
        }
    }
}

/// Texel rectangle of one chart, gutter included.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChartRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl ChartRect {
    pub fn overlaps(&self, o: &ChartRect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UvAtlas {
    pub mesh: TriangleMesh,
    /// Atlas side in texels.
    pub resolution: usize,
    /// One rectangle per face.
    pub charts: Vec<ChartRect>,
}

/// Isometric 2D layout of a triangle with its longest edge on the x axis,
/// keeping the input vertex order.
fn flatten(tri: [[f64; 3]; 3]) -> [[f64; 2]; 3] {
    let len = |e: usize| norm(sub(tri[(e + 1) % 3], tri[e]));
    let e0 = (0..3).max_by(|&a, &b| len(a).total_cmp(&len(b))).expect("three edges");
    let [a, b, c] = [e0, (e0 + 1) % 3, (e0 + 2) % 3];
    let l = len(e0);
    let ab = sub(tri[b], tri[a]);
    let ac = sub(tri[c], tri[a]);
    let x = dot(ac, ab) / l;
    let y = (dot(ac, ac) - x * x).max(0.0).sqrt();
    let mut out = [[0.0; 2]; 3];
    out[a] = [0.0, 0.0];
    out[b] = [l, 0.0];
    out[c] = [x, y];
    out
}

/// Shelf-packs `sizes` into a `side x side` square; `None` on overflow.
fn pack(sizes: &[(usize, usize)], order: &[usize], side: usize) -> Option<Vec<(usize, usize)>> {
    let mut pos = vec![(0, 0); sizes.len()];
    let (mut x, mut y, mut shelf) = (0, 0, 0);
    for &i in order {
        let (w, h) = sizes[i];
        if w > side {
            return None;
        }
        if x + w > side {
            x = 0;
            y += shelf;
            shelf = 0;
        }
        if y + h > side {
            return None;
        }
        pos[i] = (x, y);
        x += w;
        shelf = shelf.max(h);
    }
    Some(pos)
}

/// Lays every face out as its own isometric chart scaled by
/// `texels_per_unit` and packs the charts into the smallest power-of-two
/// square atlas that fits. UV `(0, 0)` is the top-left atlas corner.
pub fn generate_uv_atlas(mesh: &TriangleMesh, config: &AtlasConfig) -> Result<UvAtlas, MeshError> {
    if mesh.is_empty() {
        return Err(MeshError::Invalid("cannot build an atlas for an empty mesh".into()));
    }
    if !(config.texels_per_unit > 0.0) {
        return Err(MeshError::Invalid("texels_per_unit must be positive".into()));
    }
    let s = config.texels_per_unit;
    let g = config.gutter;
    let flat: Vec<[[f64; 2]; 3]> = (0..mesh.faces.len()).map(|f| flatten(mesh.triangle(f))).collect();
    let sizes: Vec<(usize, usize)> = flat
        .iter()
        .map(|t| {
            let w = t.iter().map(|p| p[0]).fold(0.0, f64::max) * s;
            let h = t.iter().map(|p| p[1]).fold(0.0, f64::max) * s;
            (w.ceil() as usize + 2 * g, h.ceil() as usize + 2 * g)
        })
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].1.cmp(&sizes[a].1).then(a.cmp(&b)));
    let mut side = 16;
    let placed = loop {
        if let Some(p) = pack(&sizes, &order, side) {
            break p;
        }
        side *= 2;
        if side > config.max_resolution {
            return Err(MeshError::AtlasOverflow {
                charts: sizes.len(),
                max: config.max_resolution,
            });
        }
    };
    let r = side as f64;
    let mut coords = Vec::with_capacity(3 * flat.len());
    let mut faces = Vec::with_capacity(flat.len());
    let mut charts = Vec::with_capacity(flat.len());
    for (f, tri) in flat.iter().enumerate() {
        let (x0, y0) = placed[f];
        let base = coords.len() as u32;
        for p in tri {
            coords.push([
                ((x0 + g) as f64 + p[0] * s) / r,
                ((y0 + g) as f64 + p[1] * s) / r,
            ]);
        }
        faces.push([base, base + 1, base + 2]);
        charts.push(ChartRect {
            x: x0,
            y: y0,
            w: sizes[f].0,
            h: sizes[f].1,
        });
    }
    let mut out = mesh.clone();
    out.uv = Some(UvLayer { coords, faces });
    Ok(UvAtlas {
        mesh: out,
        resolution: side,
        charts,
    })
}
