//! Score distillation: the per-step pixel gradient and the stage-1 loop that
//! pushes field renders toward the guidance model's high-density regions.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::{DiffError, LayoutBuilder, Mat, ParamVector, Tape};
use crate::field::{FieldError, SdfField};
use crate::guidance::{
    add_noise, cfg_combine, view_conditioning, Conditioning, GuidanceError, NoiseSchedule,
    ScoreModel,
};
use crate::image::Image;
use crate::optim::Adam;
use crate::render::{sample_training_camera, CameraSampling, RayPlan, RenderError, RenderSettings};

#[derive(Debug, Error)]
pub enum SdsError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdsConfig {
    pub guidance_weight: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub steps: usize,
    pub lr: f64,
    /// Cameras per step; their gradients are averaged.
    pub batch: usize,
    pub resolution: usize,
    pub checkpoint_every: usize,
    pub eikonal_weight: f64,
    pub eikonal_points: usize,
    pub schedule: NoiseSchedule,
    pub render: RenderSettings,
    pub cameras: CameraSampling,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            guidance_weight: 100.0,
            t_min: 0.02,
            t_max: 0.98,
            steps: 2000,
            lr: 1e-3,
            batch: 1,
            resolution: 64,
            checkpoint_every: 500,
            eikonal_weight: 0.01,
            eikonal_points: 256,
            schedule: NoiseSchedule::default(),
            render: RenderSettings::default(),
            cameras: CameraSampling::default(),
        }
    }
}

impl SdsConfig {
    pub fn validate(&self) -> Result<(), SdsError> {
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(SdsError::Config(format!(
                "need 0 < t_min < t_max <= 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.resolution < 8 {
            return Err(SdsError::Config(format!(
                "resolution must be at least 8, got {}",
                self.resolution
            )));
        }
        if self.batch == 0 {
            return Err(SdsError::Config("batch must be at least 1".into()));
        }
        if !(self.guidance_weight >= 0.0 && self.lr > 0.0) {
            return Err(SdsError::Config("guidance weight and lr must be positive".into()));
        }
        Ok(())
    }
}

/// One SDS draw: `w(t) (eps_hat - eps)` together with the sampled `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdsSample {
    pub t: f64,
    pub grad: Image,
}

/// SDS pixel gradient for a fixed `t` and noise draw. The score model is
/// treated as a constant: nothing is differentiated through it.
#[allow(clippy::too_many_arguments)]
pub fn sds_gradient_with_noise(
    rendered: &Image,
    t: f64,
    eps: &Image,
    model: &dyn ScoreModel,
    cond: &Conditioning,
    depth: Option<&Image>,
    schedule: &NoiseSchedule,
    guidance_weight: f64,
) -> Result<Image, SdsError> {
    let noisy = add_noise(rendered, t, eps, schedule)?;
    model.observe_injected_noise(eps);
    let (c, u) = model.predict_pair(&noisy, t, cond, depth)?;
    let eps_hat = cfg_combine(&c, &u, guidance_weight)?;
    let w = schedule.weight(t);
    Ok(Image {
        data: eps_hat
            .data
            .iter()
            .zip(&eps.data)
            .map(|(p, e)| w * (p - e))
            .collect(),
        ..*rendered
    })
}

pub fn standard_normal_image<R: Rng + ?Sized>(rng: &mut R, like: &Image) -> Image {
    Image {
        data: (0..like.data.len()).map(|_| StandardNormal.sample(rng)).collect(),
        ..*like
    }
}

/// Draws `t ~ U[t_min, t_max]` and `eps ~ N(0, I)` and returns the SDS pixel
/// gradient.
#[allow(clippy::too_many_arguments)]
pub fn sds_pixel_gradient<R: Rng + ?Sized>(
    rendered: &Image,
    model: &dyn ScoreModel,
    cond: &Conditioning,
    depth: Option<&Image>,
    schedule: &NoiseSchedule,
    t_range: (f64, f64),
    guidance_weight: f64,
    rng: &mut R,
) -> Result<SdsSample, SdsError> {
    let t = rng.random_range(t_range.0..=t_range.1);
    let eps = standard_normal_image(rng, rendered);
    let grad = sds_gradient_with_noise(rendered, t, &eps, model, cond, depth, schedule, guidance_weight)?;
    Ok(SdsSample { t, grad })
}

/// A training view produced by an [`SdsTarget`].
pub struct TargetView<P> {
    pub image: Image,
    pub cond: Conditioning,
    pub plan: P,
}

/// Something whose parameters produce images that SDS can push on.
pub trait SdsTarget {
    type Plan;

    fn render<R: Rng + ?Sized>(
        &self,
        params: &ParamVector,
        prompt: &str,
        rng: &mut R,
    ) -> Result<TargetView<Self::Plan>, SdsError>;

    /// Chains a pixel gradient of `view.image` back to the parameters.
    fn backprop(
        &self,
        params: &ParamVector,
        view: &TargetView<Self::Plan>,
        pixel_grad: &Image,
    ) -> Result<Vec<f64>, SdsError>;

    /// Gradient of any regularizer, added once per step.
    fn regularizer_grad<R: Rng + ?Sized>(
        &self,
        _params: &ParamVector,
        _rng: &mut R,
    ) -> Result<Option<Vec<f64>>, SdsError> {
        Ok(None)
    }
}

/// Volume-rendered SDF field seen from random training cameras.
pub struct FieldTarget<'a> {
    pub field: &'a SdfField,
    pub settings: RenderSettings,
    pub cameras: CameraSampling,
    pub resolution: usize,
    pub eikonal_weight: f64,
    pub eikonal_points: usize,
}

impl<'a> FieldTarget<'a> {
    pub fn new(field: &'a SdfField, config: &SdsConfig) -> Self {
        Self {
            field,
            settings: config.render,
            cameras: config.cameras,
            resolution: config.resolution,
            eikonal_weight: config.eikonal_weight,
            eikonal_points: config.eikonal_points,
        }
    }
}

impl SdsTarget for FieldTarget<'_> {
    type Plan = RayPlan;

    fn render<R: Rng + ?Sized>(
        &self,
        params: &ParamVector,
        prompt: &str,
        rng: &mut R,
    ) -> Result<TargetView<RayPlan>, SdsError> {
        let camera = sample_training_camera(rng, &self.cameras, self.resolution);
        let plan = RayPlan::new(&camera, &self.settings, rng)?;
        let image = crate::render::render_plan(self.field, params, &plan, &self.settings)?;
        Ok(TargetView {
            image: image.rgb,
            cond: view_conditioning(prompt, &camera),
            plan,
        })
    }

    fn backprop(
        &self,
        params: &ParamVector,
        view: &TargetView<RayPlan>,
        pixel_grad: &Image,
    ) -> Result<Vec<f64>, SdsError> {
        Ok(crate::render::render_vjp(
            self.field,
            params,
            &view.plan,
            &self.settings,
            &pixel_grad.data,
        )?)
    }

    fn regularizer_grad<R: Rng + ?Sized>(
        &self,
        params: &ParamVector,
        rng: &mut R,
    ) -> Result<Option<Vec<f64>>, SdsError> {
        if self.eikonal_weight == 0.0 || self.eikonal_points == 0 {
            return Ok(None);
        }
        let b = self.field.config().bound;
        let pts: Vec<[f64; 3]> = (0..self.eikonal_points)
            .map(|_| [(); 3].map(|_| rng.random_range(-b..b)))
            .collect();
        let mut tape = Tape::new(params);
        let e = self.field.eikonal_on_tape(&mut tape, &pts, 1e-3)?;
        let g = tape.backward(e, &Mat::scalar(self.eikonal_weight))?;
        Ok(Some(g))
    }
}

/// Test mode in which the parameters are the image itself, so SDS can be
/// checked without a renderer.
pub struct DirectPixels {
    pub width: usize,
    pub height: usize,
}

impl DirectPixels {
    pub fn params(&self, init: &Image) -> Result<ParamVector, SdsError> {
        if init.width != self.width || init.height != self.height || init.channels != 3 {
            return Err(SdsError::Config("initial image has the wrong shape".into()));
        }
        let mut b = LayoutBuilder::new();
        b.push("pixels", self.width * self.height, 3);
        Ok(ParamVector::from_values(Arc::new(b.build()), init.data.clone())?)
    }

    pub fn image(&self, params: &ParamVector) -> Image {
        Image::new(self.width, self.height, 3, params.values().to_vec())
            .expect("pixel parameters match the image shape")
    }
}

impl SdsTarget for DirectPixels {
    type Plan = ();

    fn render<R: Rng + ?Sized>(
        &self,
        params: &ParamVector,
        prompt: &str,
        _rng: &mut R,
    ) -> Result<TargetView<()>, SdsError> {
        Ok(TargetView {
            image: self.image(params),
            cond: Conditioning::new(prompt),
            plan: (),
        })
    }

    fn backprop(
        &self,
        _params: &ParamVector,
        _view: &TargetView<()>,
        pixel_grad: &Image,
    ) -> Result<Vec<f64>, SdsError> {
        Ok(pixel_grad.data.clone())
    }
}

/// Per-step record written to the telemetry log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

impl StepRecord {
    /// `step t grad_norm wall_time`, space separated.
    pub fn line(&self) -> String {
        format!(
            "{} {:.6} {:.6e} {:.3}",
            self.step, self.t, self.grad_norm, self.wall_time
        )
    }
}

/// Hooks the optimization loop calls; all optional.
pub trait Stage1Observer {
    fn on_step(&mut self, _record: &StepRecord) -> Result<(), SdsError> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _step: usize, _params: &ParamVector) -> Result<(), SdsError> {
        Ok(())
    }
}

pub struct NoObserver;

impl Stage1Observer for NoObserver {}

/// Appends telemetry lines to a writer.
pub struct TelemetryWriter<W: Write>(pub W);

impl<W: Write> Stage1Observer for TelemetryWriter<W> {
    fn on_step(&mut self, record: &StepRecord) -> Result<(), SdsError> {
        writeln!(self.0, "{}", record.line())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Outcome {
    pub params: ParamVector,
    pub steps: usize,
    pub last_grad_norm: f64,
}

/// Stage-1 loop: render a training view, take an SDS pixel gradient, chain it
/// through the render and apply an Adam update.
pub fn stage1_optimize<T, R>(
    target: &T,
    params: ParamVector,
    model: &dyn ScoreModel,
    prompt: &str,
    config: &SdsConfig,
    rng: &mut R,
    observer: &mut dyn Stage1Observer,
) -> Result<Stage1Outcome, SdsError>
where
    T: SdsTarget,
    R: Rng + ?Sized,
{
    config.validate()?;
    let mut params = params;
    let mut opt = Adam::new(config.lr);
    let start = Instant::now();
    let mut last_grad_norm = 0.0;
    for step in 0..config.steps {
        let mut grad = vec![0.0; params.len()];
        let mut t_sum = 0.0;
        for _ in 0..config.batch {
            let view = target.render(&params, prompt, rng)?;
            let sample = sds_pixel_gradient(
                &view.image,
                model,
                &view.cond,
                None,
                &config.schedule,
                (config.t_min, config.t_max),
                config.guidance_weight,
                rng,
            )?;
            t_sum += sample.t;
            let g = target.backprop(&params, &view, &sample.grad)?;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b / config.batch as f64;
            }
        }
        if let Some(reg) = target.regularizer_grad(&params, rng)? {
            for (a, b) in grad.iter_mut().zip(reg) {
                *a += b;
            }
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            observer.on_checkpoint(step, &params)?;
            return Err(SdsError::NonFinite { step });
        }
        opt.step(params.values_mut(), &grad);
        last_grad_norm = norm;
        observer.on_step(&StepRecord {
            step,
            t: t_sum / config.batch as f64,
            grad_norm: norm,
            wall_time: start.elapsed().as_secs_f64(),
        })?;
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            observer.on_checkpoint(step + 1, &params)?;
        }
    }
    Ok(Stage1Outcome {
        params,
        steps: config.steps,
        last_grad_norm,
    })
}
