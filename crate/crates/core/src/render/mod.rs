//! Cameras, ray sampling and differentiable volume compositing of the field.

mod camera;

pub use camera::{
    orbit_camera, sample_training_camera, turntable_cameras, Camera, CameraSampling, Lens, Ray,
};

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::{DiffError, Mat, ParamVector, Tape, Var};
use crate::field::{FieldError, SdfField};
use crate::image::Image;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("camera: {0}")]
    Camera(String),
    #[error("negative density {value} at sample {index}")]
    NegativeDensity { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Depth normalization guard for empty rays.
pub const DEPTH_EPS: f64 = 1e-8;

/// `m` depths in `[near, far]`, ascending. Without stratification these are
/// evenly spaced including both ends; with it, one uniform draw per bin.
pub fn sample_depths<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    m: usize,
    stratified: bool,
    rng: &mut R,
) -> Result<Vec<f64>, RenderError> {
    if m < 2 {
        return Err(RenderError::Shape(format!("need at least 2 samples, got {m}")));
    }
    if stratified {
        let bin = (far - near) / m as f64;
        Ok((0..m)
            .map(|i| near + (i as f64 + rng.random::<f64>()) * bin)
            .collect())
    } else {
        let step = (far - near) / (m - 1) as f64;
        Ok((0..m)
            .map(|i| if i + 1 == m { far } else { near + i as f64 * step })
            .collect())
    }
}

/// Spacing to the next sample; the last sample extends to `far`.
pub fn sample_deltas(depths: &[f64], far: f64) -> Vec<f64> {
    (0..depths.len())
        .map(|i| depths.get(i + 1).copied().unwrap_or(far) - depths[i])
        .collect()
}

/// Per-sample transmittance and weights of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeTerms {
    pub transmittance: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// `T_m = exp(-sum_{m' <= m} sigma delta)` and
/// `alpha_m = T_m (1 - exp(-sigma_m delta_m))`.
pub fn composite_terms(sigmas: &[f64], deltas: &[f64]) -> Result<CompositeTerms, RenderError> {
    if sigmas.len() != deltas.len() {
        return Err(RenderError::Shape(format!(
            "{} densities but {} intervals",
            sigmas.len(),
            deltas.len()
        )));
    }
    let mut optical = 0.0;
    let mut transmittance = Vec::with_capacity(sigmas.len());
    let mut alpha = Vec::with_capacity(sigmas.len());
    for (i, (&s, &d)) in sigmas.iter().zip(deltas).enumerate() {
        if s < 0.0 {
            return Err(RenderError::NegativeDensity { index: i, value: s });
        }
        let x = s * d;
        optical += x;
        let t = (-optical).exp();
        transmittance.push(t);
        alpha.push(t * -(-x).exp_m1());
    }
    Ok(CompositeTerms {
        transmittance,
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub acc: f64,
    pub depth: f64,
}

/// Composites one ray's samples over a solid background.
pub fn composite(
    colors: &[[f64; 3]],
    sigmas: &[f64],
    depths: &[f64],
    far: f64,
    background: [f64; 3],
) -> Result<Composite, RenderError> {
    if colors.len() != sigmas.len() || depths.len() != sigmas.len() || sigmas.is_empty() {
        return Err(RenderError::Shape(format!(
            "colors {}, densities {}, depths {}",
            colors.len(),
            sigmas.len(),
            depths.len()
        )));
    }
    let terms = composite_terms(sigmas, &sample_deltas(depths, far))?;
    let mut rgb = [0.0; 3];
    let (mut acc, mut weighted_depth) = (0.0, 0.0);
    for ((a, c), t) in terms.alpha.iter().zip(colors).zip(depths) {
        for k in 0..3 {
            rgb[k] += a * c[k];
        }
        acc += a;
        weighted_depth += a * t;
    }
    for k in 0..3 {
        rgb[k] += (1.0 - acc) * background[k];
    }
    Ok(Composite {
        rgb,
        acc,
        depth: weighted_depth / acc.max(DEPTH_EPS),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    /// Samples per ray.
    pub samples: usize,
    pub background: [f64; 3],
    pub stratified: bool,
    /// Rays per tape when rendering.
    pub chunk_rays: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            samples: 64,
            background: [0.5; 3],
            stratified: true,
            chunk_rays: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub rgb: Image,
    pub depth: Image,
    pub acc: Image,
}

/// Rays of one camera with their sample depths fixed, so a forward render and
/// its gradient see the same samples.
#[derive(Debug, Clone)]
pub struct RayPlan {
    pub width: usize,
    pub height: usize,
    pub samples: usize,
    pub far: f64,
    pub rays: Vec<Ray>,
    /// `rays.len() x samples`, row-major.
    pub depths: Vec<f64>,
}

impl RayPlan {
    pub fn new<R: Rng + ?Sized>(
        camera: &Camera,
        settings: &RenderSettings,
        rng: &mut R,
    ) -> Result<Self, RenderError> {
        let rays = camera.rays();
        let mut depths = Vec::with_capacity(rays.len() * settings.samples);
        for _ in 0..rays.len() {
            depths.extend(sample_depths(
                camera.near,
                camera.far,
                settings.samples,
                settings.stratified,
                rng,
            )?);
        }
        Ok(Self {
            width: camera.width,
            height: camera.height,
            samples: settings.samples,
            far: camera.far,
            rays,
            depths,
        })
    }

    pub fn ray_depths(&self, ray: usize) -> &[f64] {
        &self.depths[ray * self.samples..(ray + 1) * self.samples]
    }
}

/// Tape handles for a rendered range of rays.
#[derive(Debug, Clone, Copy)]
pub struct RenderVars {
    /// `n x 3` composited colors.
    pub rgb: Var,
    /// `n x 1` accumulated opacity.
    pub acc: Var,
    /// `n x samples` compositing weights.
    pub weights: Var,
}

/// Records the rendering of rays `range` of `plan` on `tape`.
pub fn render_on_tape(
    tape: &mut Tape,
    field: &SdfField,
    plan: &RayPlan,
    range: Range<usize>,
    background: [f64; 3],
) -> Result<RenderVars, DiffError> {
    let m = plan.samples;
    let n = range.len();
    let mut points = Vec::with_capacity(n * m);
    let mut dirs = Vec::with_capacity(n * m);
    let mut deltas = Vec::with_capacity(n * m);
    for r in range.clone() {
        let ray = plan.rays[r];
        let ts = plan.ray_depths(r);
        for &t in ts {
            points.push([0, 1, 2].map(|k| ray.origin[k] + t * ray.dir[k]));
            dirs.push(ray.dir);
        }
        deltas.extend(sample_deltas(ts, plan.far));
    }
    let vars = field.eval_on_tape(tape, &points, &dirs)?;
    let sigma = tape.reshape(vars.sigma, n, m)?;
    let delta = tape.constant(Mat::new(n, m, deltas))?;
    let x = tape.mul(sigma, delta)?;
    let optical = tape.cumsum_cols(x)?;
    let neg_optical = tape.neg(optical)?;
    let trans = tape.exp(neg_optical)?;
    let neg_x = tape.neg(x)?;
    let keep = tape.exp(neg_x)?;
    let opacity = tape.rsub_scalar(1.0, keep)?;
    let weights = tape.mul(trans, opacity)?;
    let acc = tape.sum_cols(weights)?;
    let w_col = tape.reshape(weights, n * m, 1)?;
    let weighted = tape.mul(vars.color, w_col)?;
    let fg = tape.sum_row_groups(weighted, m)?;
    let clear = tape.rsub_scalar(1.0, acc)?;
    let bg = tape.constant(Mat::new(1, 3, background.to_vec()))?;
    let bg = tape.mul(clear, bg)?;
    let rgb = tape.add(fg, bg)?;
    Ok(RenderVars { rgb, acc, weights })
}

fn chunks(n: usize, size: usize) -> Vec<Range<usize>> {
    let size = size.max(1);
    (0..n.div_ceil(size))
        .map(|c| c * size..((c + 1) * size).min(n))
        .collect()
}

struct ChunkOut {
    rgb: Vec<f64>,
    acc: Vec<f64>,
    depth: Vec<f64>,
}

fn forward_chunk(
    field: &SdfField,
    params: &ParamVector,
    plan: &RayPlan,
    range: Range<usize>,
    background: [f64; 3],
) -> Result<ChunkOut, DiffError> {
    let mut tape = Tape::new(params);
    let vars = render_on_tape(&mut tape, field, plan, range.clone(), background)?;
    let acc = tape.value(vars.acc).data.clone();
    let weights = tape.value(vars.weights);
    let depth = range
        .clone()
        .enumerate()
        .map(|(i, r)| {
            let wd: f64 = weights
                .row(i)
                .iter()
                .zip(plan.ray_depths(r))
                .map(|(w, t)| w * t)
                .sum();
            wd / acc[i].max(DEPTH_EPS)
        })
        .collect();
    Ok(ChunkOut {
        rgb: tape.value(vars.rgb).data.clone(),
        acc,
        depth,
    })
}

/// Forward render of a planned set of rays.
pub fn render_plan(
    field: &SdfField,
    params: &ParamVector,
    plan: &RayPlan,
    settings: &RenderSettings,
) -> Result<RenderedImage, RenderError> {
    field.check_layout(params)?;
    let parts: Result<Vec<ChunkOut>, DiffError> = chunks(plan.rays.len(), settings.chunk_rays)
        .into_par_iter()
        .map(|range| forward_chunk(field, params, plan, range, settings.background))
        .collect();
    let parts = parts?;
    let (w, h) = (plan.width, plan.height);
    let cat = |f: fn(&ChunkOut) -> &Vec<f64>| parts.iter().flat_map(|p| f(p).iter().copied()).collect();
    Ok(RenderedImage {
        rgb: Image::new(w, h, 3, cat(|p| &p.rgb)).expect("chunk sizes add up"),
        acc: Image::new(w, h, 1, cat(|p| &p.acc)).expect("chunk sizes add up"),
        depth: Image::new(w, h, 1, cat(|p| &p.depth)).expect("chunk sizes add up"),
    })
}

/// Renders the field from `camera`: per pixel, ray, depths, field, density,
/// compositing.
pub fn render_image<R: Rng + ?Sized>(
    field: &SdfField,
    params: &ParamVector,
    camera: &Camera,
    settings: &RenderSettings,
    rng: &mut R,
) -> Result<RenderedImage, RenderError> {
    let plan = RayPlan::new(camera, settings, rng)?;
    render_plan(field, params, &plan, settings)
}

/// Gradient of `<rgb_seed, rgb(params)>` for a planned render. The render is
/// recomputed chunk by chunk and the chunk gradients are summed in a fixed
/// order, so the result does not depend on the thread count.
pub fn render_vjp(
    field: &SdfField,
    params: &ParamVector,
    plan: &RayPlan,
    settings: &RenderSettings,
    rgb_seed: &[f64],
) -> Result<Vec<f64>, RenderError> {
    field.check_layout(params)?;
    if rgb_seed.len() != plan.rays.len() * 3 {
        return Err(RenderError::Shape(format!(
            "seed has {} entries for {} rays",
            rgb_seed.len(),
            plan.rays.len()
        )));
    }
    let parts: Result<Vec<Vec<f64>>, DiffError> = chunks(plan.rays.len(), settings.chunk_rays)
        .into_par_iter()
        .map(|range| {
            let seed = &rgb_seed[range.start * 3..range.end * 3];
            if seed.iter().all(|&g| g == 0.0) {
                return Ok(vec![0.0; params.len()]);
            }
            let mut tape = Tape::new(params);
            let vars = render_on_tape(&mut tape, field, plan, range.clone(), settings.background)?;
            tape.backward(vars.rgb, &Mat::new(range.len(), 3, seed.to_vec()))
        })
        .collect();
    let mut total = vec![0.0; params.len()];
    for part in parts? {
        for (t, g) in total.iter_mut().zip(part) {
            *t += g;
        }
    }
    Ok(total)
}

/// Renders, asks `pixel_grad` for `dL/d rgb` of the finished image, and
/// chains it back to the parameters.
pub fn render_with_grad<R, F>(
    field: &SdfField,
    params: &ParamVector,
    camera: &Camera,
    settings: &RenderSettings,
    rng: &mut R,
    pixel_grad: F,
) -> Result<(RenderedImage, Vec<f64>), RenderError>
where
    R: Rng + ?Sized,
    F: FnOnce(&RenderedImage) -> Result<Vec<f64>, RenderError>,
{
    let plan = RayPlan::new(camera, settings, rng)?;
    let image = render_plan(field, params, &plan, settings)?;
    let seed = pixel_grad(&image)?;
    let grad = render_vjp(field, params, &plan, settings, &seed)?;
    Ok((image, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::{finite_difference_gradient, max_relative_error, value_and_grad};
    use crate::field::{init_sphere, DensityTransformParams, FieldConfig, SphereFit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// The compositing equations written out term by term, sharing nothing with `composite`.
    fn literal_composite(
        colors: &[[f64; 3]],
        sigmas: &[f64],
        depths: &[f64],
        far: f64,
        bg: [f64; 3],
    ) -> ([f64; 3], f64, Vec<f64>) {
        let m = sigmas.len();
        let delta = |i: usize| if i + 1 < m { depths[i + 1] - depths[i] } else { far - depths[i] };
        let mut ts = Vec::new();
        let mut alphas = Vec::new();
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..=i {
                s += sigmas[j] * delta(j);
            }
            let t = (-s).exp();
            ts.push(t);
            alphas.push(t * (1.0 - (-sigmas[i] * delta(i)).exp()));
        }
        let acc: f64 = alphas.iter().sum();
        let mut rgb = [0.0; 3];
        for k in 0..3 {
            for i in 0..m {
                rgb[k] += alphas[i] * colors[i][k];
            }
            rgb[k] += (1.0 - acc) * bg[k];
        }
        (rgb, acc, ts)
    }

    #[test]
    fn depth_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_depths(1.0, 3.0, 2, false, &mut rng).unwrap(), vec![1.0, 3.0]);
        assert!(sample_depths(1.0, 3.0, 1, false, &mut rng).is_err());
        let s = sample_depths(1.0, 3.0, 8, true, &mut rng).unwrap();
        for (i, t) in s.iter().enumerate() {
            assert!(*t >= 1.0 + i as f64 * 0.25 && *t <= 1.0 + (i + 1) as f64 * 0.25);
        }
        let a = sample_depths(1.0, 3.0, 8, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_depths(1.0, 3.0, 8, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stratified_bin_means_are_bin_centres() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = 4;
        let mut sums = vec![0.0; m];
        let draws = 10_000;
        for _ in 0..draws {
            for (s, t) in sums.iter_mut().zip(sample_depths(2.0, 6.0, m, true, &mut rng).unwrap()) {
                *s += t;
            }
        }
        for (i, s) in sums.iter().enumerate() {
            let centre = 2.0 + (i as f64 + 0.5);
            assert!((s / draws as f64 - centre).abs() < 0.02 * centre);
        }
    }

    #[test]
    fn empty_space_shows_background() {
        let bg = [0.2, 0.4, 0.6];
        let c = composite(&[[1.0, 0.0, 0.0]; 5], &[0.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0], 6.0, bg).unwrap();
        assert_eq!(c.acc, 0.0);
        assert_eq!(c.rgb, bg);
    }

    #[test]
    fn single_dense_sample_uses_inclusive_transmittance() {
        let c = composite(&[[1.0, 1.0, 1.0]], &[20.0], &[1.0], 2.0, [0.0; 3]).unwrap();
        let expected = (-20.0f64).exp() * (1.0 - (-20.0f64).exp());
        assert!((c.acc - expected).abs() < 1e-18);
        let (_, acc, _) = literal_composite(&[[1.0, 1.0, 1.0]], &[20.0], &[1.0], 2.0, [0.0; 3]);
        assert!((c.acc - acc).abs() < 1e-18);
    }

    #[test]
    fn negative_density_rejected() {
        assert!(matches!(
            composite(&[[0.0; 3]; 2], &[1.0, -1.0], &[0.0, 1.0], 2.0, [0.0; 3]),
            Err(RenderError::NegativeDensity { index: 1, .. })
        ));
    }

    fn random_ray(rng: &mut ChaCha8Rng, m: usize) -> (Vec<[f64; 3]>, Vec<f64>, Vec<f64>, f64) {
        let colors = (0..m).map(|_| [(); 3].map(|_| rng.random::<f64>())).collect();
        let sigmas = (0..m).map(|_| rng.random_range(0.0..20.0)).collect();
        let mut depths: Vec<f64> = (0..m).map(|_| rng.random_range(1.0..4.0)).collect();
        depths.sort_by(f64::total_cmp);
        (colors, sigmas, depths, 4.0)
    }

    #[test]
    fn composite_matches_literal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let (c, s, d, far) = random_ray(&mut rng, 16);
            let bg = [0.1, 0.5, 0.9];
            let got = composite(&c, &s, &d, far, bg).unwrap();
            let (rgb, acc, ts) = literal_composite(&c, &s, &d, far, bg);
            assert!((got.acc - acc).abs() < 1e-12);
            for k in 0..3 {
                assert!((got.rgb[k] - rgb[k]).abs() < 1e-12);
            }
            let terms = composite_terms(&s, &sample_deltas(&d, far)).unwrap();
            for (a, b) in terms.transmittance.iter().zip(&ts) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn transmittance_monotone_and_opacity_bounded(seed in any::<u64>(), m in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, s, d, far) = random_ray(&mut rng, m);
            let terms = composite_terms(&s, &sample_deltas(&d, far)).unwrap();
            prop_assert!(terms.transmittance[0] <= 1.0);
            for w in terms.transmittance.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(terms.alpha.iter().sum::<f64>() <= 1.0 + 1e-9);
        }
    }

    fn tiny_field() -> SdfField {
        SdfField::new(FieldConfig {
            num_frequencies: 1,
            hidden_width: 8,
            hidden_layers: 1,
            color_width: 4,
            ..FieldConfig::default()
        })
    }

    #[test]
    fn tape_render_matches_scalar_composite() {
        let field = tiny_field();
        let params = field.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let cam = orbit_camera(20.0, 10.0, 2.5, &Lens::square(40.0, 4));
        let settings = RenderSettings {
            samples: 12,
            ..RenderSettings::default()
        };
        let plan = RayPlan::new(&cam, &settings, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let img = render_plan(&field, &params, &plan, &settings).unwrap();
        for r in [0, 5, 15] {
            let ray = plan.rays[r];
            let ts = plan.ray_depths(r);
            let mut colors = Vec::new();
            let mut sigmas = Vec::new();
            for &t in ts {
                let x = [0, 1, 2].map(|k| ray.origin[k] + t * ray.dir[k]);
                let s = field.eval(&params, x, ray.dir).unwrap();
                colors.push(s.c);
                sigmas.push(s.sigma);
            }
            let c = composite(&colors, &sigmas, ts, plan.far, settings.background).unwrap();
            let (px, py) = (r % 4, r / 4);
            for k in 0..3 {
                assert!((img.rgb.pixel(px, py)[k] - c.rgb[k]).abs() < 1e-12);
            }
            assert!((img.acc.pixel(px, py)[0] - c.acc).abs() < 1e-12);
            assert!((img.depth.pixel(px, py)[0] - c.depth).abs() < 1e-9);
        }
    }

    #[test]
    fn vanishing_density_renders_background() {
        let field = tiny_field();
        let mut params = field.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        field.set_density_params(
            &mut params,
            DensityTransformParams {
                alpha: 1e-300,
                beta: 0.1,
            },
        );
        let cam = orbit_camera(0.0, 0.0, 2.5, &Lens::square(40.0, 6));
        let settings = RenderSettings::default();
        let img = render_image(&field, &params, &cam, &settings, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(img.rgb, Image::solid(6, 6, settings.background));
    }

    #[test]
    fn mean_pixel_gradient_matches_central_differences() {
        let field = tiny_field();
        let params = field.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        let cam = orbit_camera(45.0, 30.0, 2.5, &Lens::square(40.0, 4));
        let settings = RenderSettings {
            samples: 16,
            stratified: false,
            ..RenderSettings::default()
        };
        let plan = RayPlan::new(&cam, &settings, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let program = |t: &mut Tape| {
            let v = render_on_tape(t, &field, &plan, 0..16, settings.background)?;
            let s = t.sum(v.rgb)?;
            t.scale(s, 1.0 / 48.0)
        };
        let ad = value_and_grad(&params, program).unwrap().gradient;
        let fd = finite_difference_gradient(&params, program, 5e-5).unwrap();
        assert!(max_relative_error(&ad, &fd, 1e-5) < 1e-3);

        let seed = vec![1.0 / 48.0; 48];
        let chunked = render_vjp(&field, &params, &plan, &RenderSettings { chunk_rays: 5, ..settings }, &seed).unwrap();
        assert!(max_relative_error(&chunked, &ad, 1e-12) < 1e-10);
    }

    #[test]
    fn sphere_render_is_opaque_at_centre_and_clear_at_border() {
        let field = SdfField::new(FieldConfig {
            num_frequencies: 2,
            hidden_width: 32,
            hidden_layers: 2,
            color_width: 8,
            ..FieldConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = init_sphere(&field, 0.5, SphereFit::default(), &mut rng).unwrap();
        let cam = orbit_camera(0.0, 0.0, 3.0, &Lens::square(40.0, 16));
        // Inclusive transmittance caps opacity near exp(-alpha delta), so the
        // sampling must be fine enough that alpha * delta is small.
        let settings = RenderSettings {
            samples: 512,
            stratified: false,
            ..RenderSettings::default()
        };
        let img = render_image(&field, &params, &cam, &settings, &mut rng).unwrap();
        for (x, y) in [(7, 7), (8, 8)] {
            assert!(img.acc.pixel(x, y)[0] > 0.9, "centre acc {}", img.acc.pixel(x, y)[0]);
        }
        for i in 0..16 {
            for (x, y) in [(i, 0), (i, 15), (0, i), (15, i)] {
                assert!(img.acc.pixel(x, y)[0] < 0.1, "border acc {}", img.acc.pixel(x, y)[0]);
            }
        }
    }
}
