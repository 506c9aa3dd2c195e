//! Deterministic img2img sampling over a tiled image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RetextureError;
use crate::guidance::{add_noise, cfg_combine, Conditioning, NoiseSchedule, ScoreModel};
use crate::image::Image;
use crate::sds::standard_normal_image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointSampleConfig {
    /// Starting noise level; clamped into `[t_min, t_max]`.
    pub strength: f64,
    pub steps: usize,
    pub guidance_weight: f64,
    pub t_min: f64,
    /// Cap on the starting level, where `alpha_t` is still positive.
    pub t_max: f64,
    pub schedule: NoiseSchedule,
}

impl Default for JointSampleConfig {
    fn default() -> Self {
        Self {
            strength: 0.5,
            steps: 20,
            guidance_weight: 7.5,
            t_min: 1e-3,
            t_max: 0.98,
            schedule: NoiseSchedule::default(),
        }
    }
}

impl JointSampleConfig {
    pub fn validate(&self) -> Result<(), RetextureError> {
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(RetextureError::Config(format!(
                "strength must lie in (0, 1], got {}",
                self.strength
            )));
        }
        if self.steps == 0 {
            return Err(RetextureError::Config("sampler needs at least one step".into()));
        }
        if !(self.t_min > 0.0 && self.t_min <= self.t_max && self.t_max < 1.0) {
            return Err(RetextureError::Config("need 0 < t_min <= t_max < 1".into()));
        }
        Ok(())
    }

    pub fn start_level(&self) -> f64 {
        self.strength.clamp(self.t_min, self.t_max)
    }

    /// `steps` levels spaced evenly from the start level down to `t_min`.
    pub fn levels(&self) -> Vec<f64> {
        let t0 = self.start_level();
        if self.steps == 1 {
            return vec![t0];
        }
        let n = (self.steps - 1) as f64;
        (0..self.steps)
            .map(|k| t0 + (self.t_min - t0) * k as f64 / n)
            .collect()
    }
}

/// What the sampler did, for structural checks.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerTrace {
    /// Independent noise trajectories started; always one.
    pub trajectories: usize,
    pub levels: Vec<f64>,
    /// Image shape of every model query.
    pub query_shapes: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub image: Image,
    pub trace: SamplerTrace,
}

/// Noises the tiled input to the start level with a single draw, then walks
/// the levels down with the deterministic update
/// `x' = alpha' x0_hat + sigma' eps_hat` using guided, depth-conditioned
/// predictions. Returns the final `x0_hat` clamped to `[0, 1]`.
pub fn joint_sample<R: Rng + ?Sized>(
    tiled_rgb: &Image,
    tiled_depth: &Image,
    model: &dyn ScoreModel,
    cond: &Conditioning,
    config: &JointSampleConfig,
    rng: &mut R,
) -> Result<JointSample, RetextureError> {
    config.validate()?;
    if !model.accepts_depth() {
        return Err(RetextureError::DepthRequired);
    }
    if tiled_depth.width != tiled_rgb.width || tiled_depth.height != tiled_rgb.height || tiled_depth.channels != 1 {
        return Err(RetextureError::Shape("depth must be a one-channel image matching the colors".into()));
    }
    let sched = &config.schedule;
    let levels = config.levels();
    let eps = standard_normal_image(rng, tiled_rgb);
    model.observe_injected_noise(&eps);
    let mut x = add_noise(tiled_rgb, levels[0], &eps, sched)?;
    let mut trace = SamplerTrace {
        trajectories: 1,
        levels: levels.clone(),
        query_shapes: Vec::with_capacity(levels.len()),
    };
    let mut x0 = x.clone();
    for (k, &t) in levels.iter().enumerate() {
        trace.query_shapes.push(x.shape());
        let (c, u) = model.predict_pair(&x, t, cond, Some(tiled_depth))?;
        let eps_hat = cfg_combine(&c, &u, config.guidance_weight)?;
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        x0.data
            .iter_mut()
            .zip(x.data.iter().zip(&eps_hat.data))
            .for_each(|(o, (xi, e))| *o = (xi - s * e) / a);
        if let Some(&next) = levels.get(k + 1) {
            let (a2, s2) = (sched.alpha(next), sched.sigma(next));
            x.data
                .iter_mut()
                .zip(x0.data.iter().zip(&eps_hat.data))
                .for_each(|(o, (x0i, e))| *o = a2 * x0i + s2 * e);
        }
    }
    Ok(JointSample {
        image: x0.map(|v| v.clamp(0.0, 1.0)),
        trace,
    })
}
