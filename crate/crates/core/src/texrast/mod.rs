//! Mesh rasterization with bilinear texture lookups that are differentiable
//! in the texels, plus hard eye-space depth.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::diffengine::{DiffError, LayoutBuilder, Mat, ParamLayout, ParamVector, SparseRows, Tape, Var};
use crate::image::Image;
use crate::meshing::TriangleMesh;
use crate::render::Camera;

#[derive(Debug, Error)]
pub enum TexError {
    #[error("mesh has no texture coordinates")]
    NoUvs,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite texel at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Optimizable RGB texture with a per-texel coverage mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureAtlas {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub texels: Vec<f64>,
    /// Texels reachable by bilinear lookups from inside some chart.
    pub valid: Vec<bool>,
}

impl TextureAtlas {
    pub fn new(width: usize, height: usize, texels: Vec<f64>, valid: Vec<bool>) -> Result<Self, TexError> {
        if texels.len() != width * height * 3 || valid.len() != width * height {
            return Err(TexError::Shape(format!(
                "{width}x{height} atlas got {} texel values and {} mask entries",
                texels.len(),
                valid.len()
            )));
        }
        if let Some(i) = texels.iter().position(|v| !v.is_finite()) {
            return Err(TexError::NonFinite(i / 3));
        }
        Ok(Self {
            width,
            height,
            texels,
            valid,
        })
    }

    pub fn solid(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            texels: (0..width * height).flat_map(|_| rgb).collect(),
            valid: vec![true; width * height],
        }
    }

    /// Atlas whose mask covers `mesh`'s charts.
    pub fn for_mesh(mesh: &TriangleMesh, width: usize, height: usize, rgb: [f64; 3]) -> Result<Self, TexError> {
        let mut a = Self::solid(width, height, rgb);
        a.valid = coverage_mask(mesh, width, height)?;
        Ok(a)
    }

    pub fn texel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.texels[i], self.texels[i + 1], self.texels[i + 2]]
    }

    pub fn image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.texels.clone(),
        }
    }

    pub fn from_image(img: &Image, valid: Vec<bool>) -> Result<Self, TexError> {
        if img.channels != 3 {
            return Err(TexError::Shape("atlas images are RGB".into()));
        }
        Self::new(img.width, img.height, img.data.clone(), valid)
    }

    /// Single `texels` segment of `width * height` rows and 3 columns.
    pub fn layout(&self) -> Arc<ParamLayout> {
        let mut b = LayoutBuilder::new();
        b.push("texels", self.width * self.height, 3);
        Arc::new(b.build())
    }

    pub fn to_params(&self) -> ParamVector {
        ParamVector::from_values(self.layout(), self.texels.clone()).expect("layout matches texels")
    }

    pub fn with_params(&self, params: &ParamVector) -> Result<Self, TexError> {
        Self::new(self.width, self.height, params.values().to_vec(), self.valid.clone())
    }
}

/// Whether the open square of half-width 1 around `c` meets the triangle.
fn square_meets_triangle(c: [f64; 2], tri: &[[f64; 2]; 3]) -> bool {
    for a in 0..2 {
        let lo = tri.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
        let hi = tri.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
        if hi <= c[a] - 1.0 || lo >= c[a] + 1.0 {
            return false;
        }
    }
    for e in 0..3 {
        let (p, q) = (tri[e], tri[(e + 1) % 3]);
        let n = [q[1] - p[1], p[0] - q[0]];
        let proj = |v: [f64; 2]| n[0] * v[0] + n[1] * v[1];
        let t = proj(tri[(e + 2) % 3]);
        let edge = proj(p);
        let center = proj(c);
        let reach = n[0].abs() + n[1].abs();
        let (lo, hi) = if t >= edge { (edge, t) } else { (t, edge) };
        if center + reach <= lo || center - reach >= hi {
            return false;
        }
    }
    true
}

/// Texels whose bilinear footprint is touched from inside some UV triangle.
pub fn coverage_mask(mesh: &TriangleMesh, width: usize, height: usize) -> Result<Vec<bool>, TexError> {
    let mut valid = vec![false; width * height];
    if mesh.is_empty() {
        return Ok(valid);
    }
    let (w, h) = (width as f64, height as f64);
    for f in 0..mesh.faces.len() {
        let uv = mesh.face_uvs(f).ok_or(TexError::NoUvs)?;
        let tri = uv.map(|p| [p[0] * w, p[1] * h]);
        let lo = |a: usize| tri.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
        let hi = |a: usize| tri.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (lo(0) - 1.5).floor().max(0.0) as usize;
        let y0 = (lo(1) - 1.5).floor().max(0.0) as usize;
        let x1 = ((hi(0) + 0.5).ceil().max(0.0) as usize).min(width - 1);
        let y1 = ((hi(1) + 0.5).ceil().max(0.0) as usize).min(height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if square_meets_triangle([x as f64 + 0.5, y as f64 + 0.5], &tri) {
                    valid[y * width + x] = true;
                }
            }
        }
    }
    Ok(valid)
}

/// No triangle covers the pixel.
pub const NO_FACE: u32 = u32::MAX;

/// Nearest-surface fragment per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentBuffer {
    pub width: usize,
    pub height: usize,
    pub face: Vec<u32>,
    /// Perspective-correct barycentrics.
    pub bary: Vec<[f64; 3]>,
    /// Eye-space depth, `+inf` where uncovered.
    pub depth: Vec<f64>,
}

impl FragmentBuffer {
    pub fn covered(&self, pixel: usize) -> bool {
        self.face[pixel] != NO_FACE
    }

    pub fn coverage(&self) -> usize {
        self.face.iter().filter(|&&f| f != NO_FACE).count()
    }
}

struct ScreenTri {
    face: u32,
    p: [[f64; 2]; 3],
    inv_z: [f64; 3],
    area: f64,
    bbox: [f64; 4],
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Z-buffered perspective rasterization of both triangle sides. Triangles
/// with a vertex closer than the near plane are skipped. Ties in depth keep
/// the lower face index.
pub fn rasterize(mesh: &TriangleMesh, camera: &Camera) -> Result<FragmentBuffer, TexError> {
    if !mesh.is_empty() && mesh.uv.is_none() {
        return Err(TexError::NoUvs);
    }
    let (w, h) = (camera.width, camera.height);
    let tris: Vec<ScreenTri> = (0..mesh.faces.len())
        .filter_map(|f| {
            let mut p = [[0.0; 2]; 3];
            let mut inv_z = [0.0; 3];
            for (k, v) in mesh.triangle(f).iter().enumerate() {
                let c = camera.to_camera(*v);
                if c[2] < camera.near {
                    return None;
                }
                let (px, z) = camera.project(*v)?;
                p[k] = px;
                inv_z[k] = 1.0 / z;
            }
            let area = edge(p[0], p[1], p[2]);
            if area == 0.0 || !area.is_finite() {
                return None;
            }
            let xs = p.map(|q| q[0]);
            let ys = p.map(|q| q[1]);
            let bbox = [
                xs.iter().copied().fold(f64::INFINITY, f64::min),
                xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ys.iter().copied().fold(f64::INFINITY, f64::min),
                ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ];
            Some(ScreenTri {
                face: f as u32,
                p,
                inv_z,
                area,
                bbox,
            })
        })
        .collect();

    let rows: Vec<(Vec<u32>, Vec<[f64; 3]>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut face = vec![NO_FACE; w];
            let mut bary = vec![[0.0; 3]; w];
            let mut depth = vec![f64::INFINITY; w];
            let py = i as f64 + 0.5;
            for t in tris.iter().filter(|t| t.bbox[2] <= py && t.bbox[3] >= py) {
                let j0 = (t.bbox[0] - 0.5).ceil().max(0.0) as usize;
                let j1 = ((t.bbox[1] - 0.5).floor().max(-1.0) + 1.0) as usize;
                for j in j0..j1.min(w) {
                    let pt = [j as f64 + 0.5, py];
                    let b = [
                        edge(t.p[1], t.p[2], pt) / t.area,
                        edge(t.p[2], t.p[0], pt) / t.area,
                        edge(t.p[0], t.p[1], pt) / t.area,
                    ];
                    if b.iter().any(|&v| v < 0.0) {
                        continue;
                    }
                    let q = [b[0] * t.inv_z[0], b[1] * t.inv_z[1], b[2] * t.inv_z[2]];
                    let s = q[0] + q[1] + q[2];
                    let z = 1.0 / s;
                    if z < depth[j] {
                        depth[j] = z;
                        face[j] = t.face;
                        bary[j] = q.map(|v| v / s);
                    }
                }
            }
            (face, bary, depth)
        })
        .collect();
    let mut out = FragmentBuffer {
        width: w,
        height: h,
        face: Vec::with_capacity(w * h),
        bary: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
    };
    for (f, b, d) in rows {
        out.face.extend(f);
        out.bary.extend(b);
        out.depth.extend(d);
    }
    Ok(out)
}

/// Eye-space depth as a one-channel image, `+inf` where uncovered.
pub fn render_mesh_depth(frags: &FragmentBuffer) -> Image {
    Image {
        width: frags.width,
        height: frags.height,
        channels: 1,
        data: frags.depth.clone(),
    }
}

/// Bilinear lookups of every covered pixel as a sparse operator on texel
/// rows, with the number of UVs clamped into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TextureTaps {
    pub taps: Arc<SparseRows>,
    pub covered: Vec<bool>,
    pub uv_clamped: usize,
}

fn pixel_uv(frags: &FragmentBuffer, mesh: &TriangleMesh, pixel: usize) -> Option<[f64; 2]> {
    let f = frags.face[pixel];
    if f == NO_FACE {
        return None;
    }
    let t = mesh.face_uvs(f as usize)?;
    let b = frags.bary[pixel];
    Some([0, 1].map(|a| b[0] * t[0][a] + b[1] * t[1][a] + b[2] * t[2][a]))
}

/// Clamp-to-edge bilinear corners and fractions for a UV.
fn bilinear(uv: [f64; 2], w: usize, h: usize) -> ([usize; 2], [usize; 2], [f64; 2]) {
    let fx = uv[0] * w as f64 - 0.5;
    let fy = uv[1] * h as f64 - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let cx = |x: f64| (x.max(0.0) as usize).min(w - 1);
    let cy = |y: f64| (y.max(0.0) as usize).min(h - 1);
    ([cx(x0), cx(x0 + 1.0)], [cy(y0), cy(y0 + 1.0)], [tx, ty])
}

fn clamp_uv(uv: [f64; 2]) -> ([f64; 2], bool) {
    let c = uv.map(|v| v.clamp(0.0, 1.0));
    (c, c != uv)
}

pub fn texture_taps(
    frags: &FragmentBuffer,
    mesh: &TriangleMesh,
    width: usize,
    height: usize,
) -> Result<TextureTaps, TexError> {
    if frags.coverage() > 0 && mesh.uv.is_none() {
        return Err(TexError::NoUvs);
    }
    let mut rows = Vec::with_capacity(frags.face.len());
    let mut covered = Vec::with_capacity(frags.face.len());
    let mut clamped = 0;
    for p in 0..frags.face.len() {
        let Some(uv) = pixel_uv(frags, mesh, p) else {
            rows.push(Vec::new());
            covered.push(false);
            continue;
        };
        let (uv, was_clamped) = clamp_uv(uv);
        clamped += was_clamped as usize;
        let (xs, ys, [tx, ty]) = bilinear(uv, width, height);
        let mut row: Vec<(u32, f64)> = Vec::with_capacity(4);
        for (yi, wy) in [(ys[0], 1.0 - ty), (ys[1], ty)] {
            for (xi, wx) in [(xs[0], 1.0 - tx), (xs[1], tx)] {
                let wgt = wx * wy;
                if wgt == 0.0 {
                    continue;
                }
                let idx = (yi * width + xi) as u32;
                match row.iter_mut().find(|(i, _)| *i == idx) {
                    Some(slot) => slot.1 += wgt,
                    None => row.push((idx, wgt)),
                }
            }
        }
        rows.push(row);
        covered.push(true);
    }
    Ok(TextureTaps {
        taps: Arc::new(SparseRows { rows }),
        covered,
        uv_clamped: clamped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shading {
    pub image: Image,
    pub uv_clamped: usize,
}

/// Bilinear atlas lookups at covered pixels and `background` elsewhere.
pub fn shade_textured(
    frags: &FragmentBuffer,
    mesh: &TriangleMesh,
    atlas: &TextureAtlas,
    background: [f64; 3],
) -> Result<Shading, TexError> {
    if frags.coverage() > 0 && mesh.uv.is_none() {
        return Err(TexError::NoUvs);
    }
    let mut data = Vec::with_capacity(frags.face.len() * 3);
    let mut clamped = 0;
    for p in 0..frags.face.len() {
        let Some(uv) = pixel_uv(frags, mesh, p) else {
            data.extend(background);
            continue;
        };
        let (uv, was_clamped) = clamp_uv(uv);
        clamped += was_clamped as usize;
        let (xs, ys, [tx, ty]) = bilinear(uv, atlas.width, atlas.height);
        let t00 = atlas.texel(xs[0], ys[0]);
        let t10 = atlas.texel(xs[1], ys[0]);
        let t01 = atlas.texel(xs[0], ys[1]);
        let t11 = atlas.texel(xs[1], ys[1]);
        for c in 0..3 {
            let top = t00[c] + tx * (t10[c] - t00[c]);
            let bottom = t01[c] + tx * (t11[c] - t01[c]);
            data.push(top + ty * (bottom - top));
        }
    }
    Ok(Shading {
        image: Image {
            width: frags.width,
            height: frags.height,
            channels: 3,
            data,
        },
        uv_clamped: clamped,
    })
}

/// Shaded pixels (`n x 3`) on a tape whose parameters are the texels.
pub fn shade_on_tape(
    tape: &mut Tape,
    texels: Var,
    taps: &TextureTaps,
    background: [f64; 3],
) -> Result<Var, TexError> {
    let gathered = tape.gather_rows(texels, taps.taps.clone())?;
    let bg: Vec<f64> = taps
        .covered
        .iter()
        .flat_map(|&c| if c { [0.0; 3] } else { background })
        .collect();
    let bg = tape.constant(Mat::new(taps.covered.len(), 3, bg))?;
    Ok(tape.add(gathered, bg)?)
}
