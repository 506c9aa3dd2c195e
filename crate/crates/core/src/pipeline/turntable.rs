//! Evenly spaced orbit renders of a textured mesh.

use std::path::{Path, PathBuf};

use super::{PipelineError, TurntableConfig};
use crate::meshing::TriangleMesh;
use crate::render::{turntable_cameras, Lens};
use crate::texrast::{rasterize, shade_textured, TextureAtlas};

/// Renders `config.frames` views at a fixed elevation, azimuths evenly
/// spaced from 0, into `frame_000.png` and onward. An empty mesh yields
/// background-only frames.
pub fn run_turntable(
    mesh: &TriangleMesh,
    atlas: &TextureAtlas,
    config: &TurntableConfig,
    out: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    if config.frames == 0 || config.resolution == 0 {
        return Err(PipelineError::Config("turntable needs at least one frame and pixel".into()));
    }
    std::fs::create_dir_all(out)?;
    let lens = Lens::square(config.fov_y_deg, config.resolution);
    let cameras = turntable_cameras(config.frames, config.elevation_deg, config.radius, &lens);
    let width = (config.frames - 1).to_string().len().max(3);
    cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let frags = rasterize(mesh, cam)?;
            let img = shade_textured(&frags, mesh, atlas, config.background)?.image;
            let path = out.join(format!("frame_{i:0width$}.png"));
            img.write_png(&path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::meshing::{generate_uv_atlas, AtlasConfig};

    /// Cube whose +z half of the atlas is red and the rest blue, so front
    /// and back views differ.
    fn two_tone_cube() -> (TriangleMesh, TextureAtlas) {
        let mut v = Vec::new();
        let mut f = Vec::new();
        for axis in 0..3 {
            for sign in [-0.5, 0.5] {
                let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
                let base = v.len() as u32;
                for (a, b) in [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)] {
                    let mut p = [0.0; 3];
                    p[axis] = sign;
                    p[u] = a;
                    p[w] = b;
                    v.push(p);
                }
                let quad: [[u32; 3]; 2] = if sign > 0.0 { [[0, 1, 2], [0, 2, 3]] } else { [[0, 2, 1], [0, 3, 2]] };
                f.extend(quad.map(|q| q.map(|i| base + i)));
            }
        }
        let mesh = TriangleMesh::new(v, f).unwrap();
        let uv = generate_uv_atlas(&mesh, &AtlasConfig { texels_per_unit: 8.0, ..AtlasConfig::default() }).unwrap();
        let res = uv.resolution;
        let mut atlas = TextureAtlas::for_mesh(&uv.mesh, res, res, [0.0, 0.0, 1.0]).unwrap();
        for (face, tri) in uv.mesh.faces.iter().enumerate() {
            let front = tri.iter().all(|&i| uv.mesh.vertices[i as usize][2] > 0.49);
            if !front {
                continue;
            }
            let c = uv.charts[face];
            for y in c.y..c.y + c.h {
                for x in c.x..c.x + c.w {
                    atlas.texels[3 * (y * res + x)..3 * (y * res + x) + 3].copy_from_slice(&[1.0, 0.0, 0.0]);
                }
            }
        }
        (uv.mesh, atlas)
    }

    #[test]
    fn default_protocol_is_sixty_frames_at_thirty_degrees() {
        let c = TurntableConfig::default();
        assert_eq!((c.frames, c.elevation_deg), (60, 30.0));
        let (mesh, atlas) = two_tone_cube();
        let dir = tempfile::tempdir().unwrap();
        let frames = run_turntable(&mesh, &atlas, &TurntableConfig { resolution: 16, ..c }, dir.path()).unwrap();
        assert_eq!(frames.len(), 60);
        assert!(frames.iter().all(|p| p.exists()));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 60);
    }

    #[test]
    fn front_and_back_frames_differ() {
        let (mesh, atlas) = two_tone_cube();
        let dir = tempfile::tempdir().unwrap();
        let c = TurntableConfig { frames: 4, resolution: 48, elevation_deg: 0.0, ..TurntableConfig::default() };
        let frames = run_turntable(&mesh, &atlas, &c, dir.path()).unwrap();
        let a = Image::read_png(&frames[0]).unwrap();
        let b = Image::read_png(&frames[2]).unwrap();
        let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
        assert!(diff > 0.05, "{diff}");
    }

    #[test]
    fn empty_mesh_gives_background_frames() {
        let mesh = TriangleMesh::new(Vec::new(), Vec::new()).unwrap();
        let atlas = TextureAtlas::solid(4, 4, [0.0; 3]);
        let dir = tempfile::tempdir().unwrap();
        let c = TurntableConfig { frames: 3, resolution: 8, background: [0.2, 0.4, 0.6], ..TurntableConfig::default() };
        let frames = run_turntable(&mesh, &atlas, &c, dir.path()).unwrap();
        assert_eq!(frames.len(), 3);
        for f in frames {
            let img = Image::read_png(&f).unwrap();
            assert!(img.max_abs_diff(&Image::solid(8, 8, [0.2, 0.4, 0.6])) < 1.0 / 255.0);
        }
    }
}
