//! Texture refinement on a frozen mesh: canonical views tiled 2x2 for one
//! joint img2img trajectory, pseudo-ground-truth fitting and a refinement
//! stage mixing photometric anchoring with a small score-distillation term.

mod bake;
mod fit;
mod pseudo;
mod sampler;

pub use bake::{bake_atlas, dilate, vertex_normals};
pub use fit::{
    stage_a_fit, stage_b_refine, texel_psnr, FitReport, RefinePoseSet, StageAConfig, StageBConfig,
};
pub use pseudo::{build_pseudo_gt, Provenance, PseudoGtSet};
pub use sampler::{joint_sample, JointSample, JointSampleConfig, SamplerTrace};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::GuidanceError;
use crate::image::{Image, ImageError};
use crate::render::{orbit_camera, Camera, Lens};
use crate::sds::SdsError;
use crate::texrast::TexError;

#[derive(Debug, Error)]
pub enum RetextureError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("joint sampling needs a depth-conditioned model")]
    DepthRequired,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Tex(#[from] TexError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Sds(#[from] SdsError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error(transparent)]
    Diff(#[from] crate::diffengine::DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The four canonical views in tiling order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalView {
    Front,
    Right,
    Back,
    Left,
}

impl CanonicalView {
    pub const ALL: [CanonicalView; 4] = [
        CanonicalView::Front,
        CanonicalView::Right,
        CanonicalView::Back,
        CanonicalView::Left,
    ];

    pub fn azimuth_deg(self) -> f64 {
        match self {
            CanonicalView::Front => 0.0,
            CanonicalView::Right => 90.0,
            CanonicalView::Back => 180.0,
            CanonicalView::Left => 270.0,
        }
    }

    /// Quadrant `(row, col)` in the 2x2 tiling.
    pub fn quadrant(self) -> (usize, usize) {
        match self {
            CanonicalView::Front => (0, 0),
            CanonicalView::Right => (0, 1),
            CanonicalView::Back => (1, 0),
            CanonicalView::Left => (1, 1),
        }
    }
}

/// Front, right, back and left cameras at equal radius and zero elevation.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub cameras: [Camera; 4],
}

impl ViewSet {
    pub fn new(radius: f64, lens: &Lens) -> Self {
        Self {
            cameras: CanonicalView::ALL.map(|v| orbit_camera(v.azimuth_deg(), 0.0, radius, lens)),
        }
    }

    pub fn camera(&self, view: CanonicalView) -> &Camera {
        &self.cameras[view as usize]
    }
}

/// Four equally sized images packed as front, right / back, left.
#[derive(Debug, Clone, PartialEq)]
pub struct TiledImage {
    pub image: Image,
}

pub fn tile_views(views: &[Image; 4]) -> Result<TiledImage, RetextureError> {
    let first = &views[0];
    if views.iter().any(|v| !v.same_shape(first)) {
        return Err(RetextureError::Shape("views differ in shape".into()));
    }
    let (w, h, c) = (first.width, first.height, first.channels);
    let mut out = Image::filled(2 * w, 2 * h, c, 0.0);
    for v in CanonicalView::ALL {
        let (qr, qc) = v.quadrant();
        let src = &views[v as usize];
        for y in 0..h {
            let s = &src.data[y * w * c..(y + 1) * w * c];
            let row = qr * h + y;
            let start = (row * 2 * w + qc * w) * c;
            out.data[start..start + w * c].copy_from_slice(s);
        }
    }
    Ok(TiledImage { image: out })
}

pub fn untile(tiled: &Image) -> Result<[Image; 4], RetextureError> {
    if tiled.width % 2 != 0 || tiled.height % 2 != 0 || tiled.width == 0 {
        return Err(RetextureError::Shape(format!(
            "{}x{} image cannot be split into quadrants",
            tiled.height, tiled.width
        )));
    }
    let (w, h, c) = (tiled.width / 2, tiled.height / 2, tiled.channels);
    Ok(CanonicalView::ALL.map(|v| {
        let (qr, qc) = v.quadrant();
        let mut data = Vec::with_capacity(w * h * c);
        for y in 0..h {
            let row = qr * h + y;
            let start = (row * 2 * w + qc * w) * c;
            data.extend_from_slice(&tiled.data[start..start + w * c]);
        }
        Image {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn solid_views_land_in_layout_order() {
        let colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
        let t = tile_views(&colors.map(|c| Image::solid(3, 2, c))).unwrap().image;
        assert_eq!((t.width, t.height), (6, 4));
        assert_eq!(t.pixel(0, 0), &colors[0]);
        assert_eq!(t.pixel(5, 0), &colors[1]);
        assert_eq!(t.pixel(0, 3), &colors[2]);
        assert_eq!(t.pixel(5, 3), &colors[3]);
    }

    #[test]
    fn view_set_azimuths() {
        let vs = ViewSet::new(3.0, &Lens::square(40.0, 8));
        for (cam, want) in vs.cameras.iter().zip([0.0, 90.0, 180.0, 270.0]) {
            let (az, el) = cam.azimuth_elevation();
            assert!((az - want).abs() < 1e-9 && el.abs() < 1e-9);
            assert!((nalgebra::Vector3::from(cam.center()).norm() - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_views_are_rejected() {
        let mut v = [0; 4].map(|_| Image::solid(2, 2, [0.0; 3]));
        v[2] = Image::solid(3, 2, [0.0; 3]);
        assert!(tile_views(&v).is_err());
        assert!(untile(&Image::solid(3, 2, [0.0; 3])).is_err());
    }

    proptest! {
        #[test]
        fn tiling_round_trips_bitwise(w in 1usize..7, h in 1usize..7, c in 1usize..4, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut img = || Image { width: w, height: h, channels: c, data: (0..w * h * c).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect() };
            let views = [img(), img(), img(), img()];
            let tiled = tile_views(&views).unwrap();
            let back = untile(&tiled.image).unwrap();
            for (a, b) in back.iter().zip(&views) {
                prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
                prop_assert!(a.same_shape(b));
            }
            let big = Image { width: 2 * w, height: 2 * h, channels: c, data: (0..4 * w * h * c).map(|i| i as f64 * 0.37).collect() };
            let again = tile_views(&untile(&big).unwrap()).unwrap().image;
            prop_assert!(again.data.iter().zip(&big.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
