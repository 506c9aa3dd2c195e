//! Initial atlas from the field's colors, and gutter dilation.

use std::collections::VecDeque;

use super::RetextureError;
use crate::diffengine::ParamVector;
use crate::field::SdfField;
use crate::meshing::{cross, norm, sub, TriangleMesh};
use crate::texrast::{coverage_mask, TexError, TextureAtlas};

/// Area-weighted unit vertex normals; isolated vertices get zero.
pub fn vertex_normals(mesh: &TriangleMesh) -> Vec<[f64; 3]> {
    let mut n = vec![[0.0; 3]; mesh.vertices.len()];
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
        let fn_ = cross(sub(b, a), sub(c, a));
        for &i in f {
            for k in 0..3 {
                n[i as usize][k] += fn_[k];
            }
        }
    }
    for v in &mut n {
        let l = norm(*v);
        if l > 0.0 {
            *v = v.map(|x| x / l);
        }
    }
    n
}

/// Barycentrics of `p` in the 2D triangle, or `None` when degenerate.
fn barycentric_2d(p: [f64; 2], t: &[[f64; 2]; 3]) -> Option<[f64; 3]> {
    let d = (t[1][1] - t[2][1]) * (t[0][0] - t[2][0]) + (t[2][0] - t[1][0]) * (t[0][1] - t[2][1]);
    if d.abs() < 1e-300 {
        return None;
    }
    let b0 = ((t[1][1] - t[2][1]) * (p[0] - t[2][0]) + (t[2][0] - t[1][0]) * (p[1] - t[2][1])) / d;
    let b1 = ((t[2][1] - t[0][1]) * (p[0] - t[2][0]) + (t[0][0] - t[2][0]) * (p[1] - t[2][1])) / d;
    Some([b0, b1, 1.0 - b0 - b1])
}

/// Surface samples for texel centres inside some UV triangle:
/// `(texel index, point, outward normal)`.
fn texel_surface_points(mesh: &TriangleMesh, width: usize, height: usize) -> Vec<(usize, [f64; 3], [f64; 3])> {
    let normals = vertex_normals(mesh);
    let mut owner: Vec<Option<(usize, [f64; 3])>> = vec![None; width * height];
    for f in 0..mesh.faces.len() {
        let Some(uv) = mesh.face_uvs(f) else { continue };
        let px = uv.map(|q| [q[0] * width as f64 - 0.5, q[1] * height as f64 - 0.5]);
        let range = |a: usize, n: usize| {
            let lo = px.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min).ceil().max(0.0);
            let hi = px.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max).floor().min(n as f64 - 1.0);
            lo as usize..(hi + 1.0).max(lo) as usize
        };
        for y in range(1, height) {
            for x in range(0, width) {
                let Some(b) = barycentric_2d([x as f64, y as f64], &px) else { continue };
                if b.iter().all(|&w| w >= -1e-9) && owner[y * width + x].is_none() {
                    owner[y * width + x] = Some((f, b.map(|w| w.max(0.0))));
                }
            }
        }
    }
    owner
        .into_iter()
        .enumerate()
        .filter_map(|(i, o)| {
            let (f, b) = o?;
            let face = mesh.faces[f];
            let mut p = [0.0; 3];
            let mut n = [0.0; 3];
            for k in 0..3 {
                let v = mesh.vertices[face[k] as usize];
                let vn = normals[face[k] as usize];
                for a in 0..3 {
                    p[a] += b[k] * v[a];
                    n[a] += b[k] * vn[a];
                }
            }
            let l = norm(n);
            let n = if l > 0.0 { n.map(|x| x / l) } else { mesh.face_normal(f) };
            Some((i, p, n))
        })
        .collect()
}

/// Atlas whose texels hold the field color at their surface point, viewed
/// against the interpolated normal. Texels outside every UV triangle are
/// dilated from the nearest baked texel; the mask marks chart coverage.
pub fn bake_atlas(
    mesh: &TriangleMesh,
    field: &SdfField,
    params: &ParamVector,
    width: usize,
    height: usize,
) -> Result<TextureAtlas, RetextureError> {
    if mesh.uv.is_none() {
        return Err(TexError::NoUvs.into());
    }
    let samples = texel_surface_points(mesh, width, height);
    let points: Vec<[f64; 3]> = samples.iter().map(|s| s.1).collect();
    let dirs: Vec<[f64; 3]> = samples.iter().map(|s| s.2.map(|x| -x)).collect();
    let colors = field.color_batch(params, &points, &dirs)?;
    let mut texels = vec![0.0; width * height * 3];
    let mut known = vec![false; width * height];
    for (&(i, _, _), c) in samples.iter().zip(&colors) {
        texels[3 * i..3 * i + 3].copy_from_slice(c);
        known[i] = true;
    }
    let valid = coverage_mask(mesh, width, height)?;
    let mut atlas = TextureAtlas::new(width, height, texels, valid)?;
    dilate(&mut atlas, &known);
    Ok(atlas)
}

/// Copies the color of the nearest known texel (4-neighbour breadth-first
/// order) into every unknown texel. Returns the number filled.
pub fn dilate(atlas: &mut TextureAtlas, known: &[bool]) -> usize {
    let (w, h) = (atlas.width, atlas.height);
    let mut done = known.to_vec();
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| done[i]).collect();
    let mut filled = 0;
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let neighbours = [
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
        ];
        for j in neighbours.into_iter().flatten() {
            if !done[j] {
                done[j] = true;
                filled += 1;
                let c: [f64; 3] = atlas.texels[3 * i..3 * i + 3].try_into().expect("rgb");
                atlas.texels[3 * j..3 * j + 3].copy_from_slice(&c);
                queue.push_back(j);
            }
        }
    }
    filled
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::meshing::{generate_uv_atlas, marching_cubes, AtlasConfig, Bounds, VoxelGrid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere_atlas() -> TriangleMesh {
        let g = VoxelGrid::from_fn(16, Bounds::cube(1.0), |p| norm(p) - 0.5);
        let m = marching_cubes(&g.unwrap(), 0.0);
        generate_uv_atlas(&m, &AtlasConfig { texels_per_unit: 48.0, ..AtlasConfig::default() }).unwrap().mesh
    }

    #[test]
    fn sphere_normals_point_outward() {
        let m = sphere_atlas();
        for (v, n) in m.vertices.iter().zip(vertex_normals(&m)) {
            let r = norm(*v);
            let cos = (0..3).map(|k| v[k] * n[k]).sum::<f64>() / r;
            assert!(cos > 0.95, "{cos}");
        }
    }

    #[test]
    fn dilation_fills_from_nearest() {
        let mut a = TextureAtlas::solid(5, 1, [0.0; 3]);
        a.texels[0..3].copy_from_slice(&[1.0, 0.0, 0.0]);
        a.texels[12..15].copy_from_slice(&[0.0, 0.0, 1.0]);
        let known = [true, false, false, false, true];
        assert_eq!(dilate(&mut a, &known), 3);
        assert_eq!(a.texel(1, 0), [1.0, 0.0, 0.0]);
        assert_eq!(a.texel(3, 0), [0.0, 0.0, 1.0]);
        let mut none = TextureAtlas::solid(2, 2, [0.3; 3]);
        assert_eq!(dilate(&mut none, &[false; 4]), 0);
        assert_eq!(none.texel(1, 1), [0.3; 3]);
    }

    #[test]
    fn bake_matches_field_colors_at_surface() {
        let m = sphere_atlas();
        let field = SdfField::new(FieldConfig { hidden_width: 16, hidden_layers: 2, color_width: 16, ..FieldConfig::default() });
        let params = field.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        let res = 64;
        let atlas = bake_atlas(&m, &field, &params, res, res).unwrap();
        let samples = texel_surface_points(&m, res, res);
        assert!(samples.len() > res * res / 10);
        for &(i, p, n) in samples.iter().step_by(97) {
            assert!((norm(p) - 0.5).abs() < 0.03);
            let c = field.color_batch(&params, &[p], &[n.map(|x| -x)]).unwrap()[0];
            assert_eq!(atlas.texels[3 * i..3 * i + 3], c);
        }
        assert!(atlas.texels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!(bake_atlas(&TriangleMesh::new(m.vertices.clone(), m.faces.clone()).unwrap(), &field, &params, 8, 8).is_err());
    }
}
