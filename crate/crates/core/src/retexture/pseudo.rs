//! Pseudo-ground-truth views from one joint sampling pass over all four
//! canonical renders.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{joint_sample, tile_views, untile, JointSampleConfig, RetextureError, ViewSet};
use crate::guidance::{normalize_depth, Conditioning, ScoreModel};
use crate::image::Image;
use crate::meshing::TriangleMesh;
use crate::texrast::{rasterize, render_mesh_depth, shade_textured, TextureAtlas};

/// Sampler settings that produced a pseudo-ground-truth set.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub sampler: JointSampleConfig,
    pub seed: u64,
    pub prompt: String,
    pub trajectories: usize,
}

impl Provenance {
    pub fn to_text(&self) -> String {
        let s = &self.sampler;
        let mut out = String::new();
        let _ = writeln!(out, "prompt = {:?}", self.prompt);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "guidance_weight = {}", s.guidance_weight);
        let _ = writeln!(out, "strength = {}", s.strength);
        let _ = writeln!(out, "steps = {}", s.steps);
        let _ = writeln!(out, "t_min = {}", s.t_min);
        let _ = writeln!(out, "t_max = {}", s.t_max);
        let _ = writeln!(out, "start_level = {}", s.start_level());
        let _ = writeln!(out, "weighting = {:?}", s.schedule.weighting);
        let _ = writeln!(out, "trajectories = {}", self.trajectories);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGtSet {
    /// Front, right, back, left.
    pub views: [Image; 4],
    /// Normalized depth exactly as the sampler saw it.
    pub tiled_depth: Image,
    /// The tiled renders before sampling.
    pub tiled_input: Image,
    pub provenance: Provenance,
}

impl PseudoGtSet {
    /// Writes `pseudo_gt_{i}.grid` and `.png` per view, the tiled depth and
    /// `provenance.txt`.
    pub fn save(&self, dir: &Path) -> Result<(), RetextureError> {
        std::fs::create_dir_all(dir)?;
        for (i, v) in self.views.iter().enumerate() {
            v.save_grid(&dir.join(format!("pseudo_gt_{i}.grid")))?;
            v.write_png(&dir.join(format!("pseudo_gt_{i}.png")))?;
        }
        self.tiled_depth.save_grid(&dir.join("tiled_depth.grid"))?;
        self.tiled_input.save_grid(&dir.join("tiled_input.grid"))?;
        std::fs::write(dir.join("provenance.txt"), self.provenance.to_text())?;
        Ok(())
    }

    /// Reads the views saved by [`PseudoGtSet::save`]; the provenance is
    /// supplied by the caller since the text form is informational.
    pub fn load(dir: &Path, provenance: Provenance) -> Result<Self, RetextureError> {
        let views = [0, 1, 2, 3].map(|i| Image::load_grid(&dir.join(format!("pseudo_gt_{i}.grid"))));
        let [a, b, c, d] = views;
        Ok(Self {
            views: [a?, b?, c?, d?],
            tiled_depth: Image::load_grid(&dir.join("tiled_depth.grid"))?,
            tiled_input: Image::load_grid(&dir.join("tiled_input.grid"))?,
            provenance,
        })
    }
}

/// Renders color and depth at the four canonical views, tiles both with the
/// same layout, runs one joint sampling trajectory and splits the result.
#[allow(clippy::too_many_arguments)]
pub fn build_pseudo_gt(
    mesh: &TriangleMesh,
    atlas: &TextureAtlas,
    views: &ViewSet,
    model: &dyn ScoreModel,
    cond: &Conditioning,
    sampler: &JointSampleConfig,
    background: [f64; 3],
    seed: u64,
) -> Result<PseudoGtSet, RetextureError> {
    let mut colors = Vec::with_capacity(4);
    let mut depths = Vec::with_capacity(4);
    for cam in &views.cameras {
        let frags = rasterize(mesh, cam)?;
        colors.push(shade_textured(&frags, mesh, atlas, background)?.image);
        depths.push(render_mesh_depth(&frags));
    }
    let colors: [Image; 4] = colors.try_into().expect("four views");
    let depths: [Image; 4] = depths.try_into().expect("four views");
    let tiled_rgb = tile_views(&colors)?.image;
    let tiled_depth = normalize_depth(&tile_views(&depths)?.image);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = joint_sample(&tiled_rgb, &tiled_depth, model, cond, sampler, &mut rng)?;
    Ok(PseudoGtSet {
        views: untile(&sample.image)?,
        tiled_depth,
        tiled_input: tiled_rgb,
        provenance: Provenance {
            sampler: *sampler,
            seed,
            prompt: cond.prompt.clone(),
            trajectories: sample.trace.trajectories,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::NoiseOracle;
    use crate::render::Lens;
    use crate::retexture::fit::tests::{random_atlas, textured_cube};

    fn setup() -> (TriangleMesh, TextureAtlas, ViewSet) {
        let mesh = textured_cube(8.0);
        let atlas = random_atlas(&mesh, 32, 2);
        (mesh, atlas, ViewSet::new(3.0, &Lens::square(40.0, 24)))
    }

    #[test]
    fn oracle_model_returns_the_renders() {
        let (mesh, atlas, views) = setup();
        let sampler = JointSampleConfig::default();
        let set = build_pseudo_gt(&mesh, &atlas, &views, &NoiseOracle::new(true), &Conditioning::new("a crate"), &sampler, [1.0; 3], 7).unwrap();
        assert_eq!(set.views.len(), 4);
        for (v, cam) in set.views.iter().zip(&views.cameras) {
            assert_eq!((v.width, v.height, v.channels), (cam.width, cam.height, 3));
            let render = shade_textured(&rasterize(&mesh, cam).unwrap(), &mesh, &atlas, [1.0; 3]).unwrap().image;
            assert!(v.max_abs_diff(&render) < 1e-9);
        }
        assert_eq!(set.provenance.trajectories, 1);
        assert_eq!(set.provenance.seed, 7);
    }

    #[test]
    fn depth_quadrants_follow_the_color_layout() {
        let (mesh, atlas, views) = setup();
        let set = build_pseudo_gt(&mesh, &atlas, &views, &NoiseOracle::new(true), &Conditioning::new("p"), &JointSampleConfig::default(), [1.0; 3], 1).unwrap();
        let raw: Vec<Image> = views.cameras.iter().map(|c| render_mesh_depth(&rasterize(&mesh, c).unwrap())).collect();
        let finite = raw.iter().flat_map(|d| d.data.iter().copied()).filter(|d| d.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), d| (a.min(d), b.max(d)));
        let quads = untile(&set.tiled_depth).unwrap();
        let colors = untile(&set.tiled_input).unwrap();
        for i in 0..4 {
            for (p, (&q, &d)) in quads[i].data.iter().zip(&raw[i].data).enumerate() {
                if d.is_finite() {
                    assert!((q - (d - lo) / (hi - lo)).abs() < 1e-12);
                } else {
                    assert_eq!(q, 1.0);
                    assert_eq!(colors[i].pixel(p % 24, p / 24), &[1.0; 3]);
                }
            }
        }
    }

    #[test]
    fn persisted_set_round_trips() {
        let (mesh, atlas, views) = setup();
        let set = build_pseudo_gt(&mesh, &atlas, &views, &NoiseOracle::new(true), &Conditioning::new("a crate"), &JointSampleConfig::default(), [1.0; 3], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        for i in 0..4 {
            assert!(dir.path().join(format!("pseudo_gt_{i}.png")).exists());
        }
        let text = std::fs::read_to_string(dir.path().join("provenance.txt")).unwrap();
        for key in ["seed = 3", "guidance_weight = 7.5", "strength = 0.5", "steps = 20", "prompt = \"a crate\""] {
            assert!(text.contains(key), "{key}");
        }
        let back = PseudoGtSet::load(dir.path(), set.provenance.clone()).unwrap();
        for (a, b) in back.views.iter().zip(&set.views) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }

    #[test]
    fn depthless_model_is_rejected() {
        let (mesh, atlas, views) = setup();
        let r = build_pseudo_gt(&mesh, &atlas, &views, &NoiseOracle::new(false), &Conditioning::new("p"), &JointSampleConfig::default(), [1.0; 3], 0);
        assert!(matches!(r, Err(RetextureError::DepthRequired)));
    }
}
