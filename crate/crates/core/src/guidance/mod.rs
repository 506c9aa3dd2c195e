//! Noise schedule, noising, classifier-free guidance and the score models
//! that predict noise from a noisy image.

pub mod mock;
mod remote;

pub use remote::{RemoteConfig, RemoteGuidanceClient, WireRequest, WireResponse};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::render::Camera;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: [usize; 3], got: [usize; 3] },
    #[error("timestep {0} outside (0, 1]")]
    Timestep(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("model does not accept depth conditioning")]
    DepthUnsupported,
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: usize },
    #[error("server answered HTTP {status} after {attempts} attempt(s)")]
    Status { status: u16, attempts: usize },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: usize },
    #[error("malformed response: {0}")]
    Malformed(String),
}

fn check_shape(expected: &Image, got: &Image) -> Result<(), GuidanceError> {
    if expected.same_shape(got) {
        Ok(())
    } else {
        Err(GuidanceError::Shape {
            expected: expected.shape(),
            got: got.shape(),
        })
    }
}

/// SDS weighting `w(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Constant,
    SigmaSquared,
    SigmaCubed,
}

/// Variance-preserving schedule with `sigma(t) = t` and
/// `alpha(t) = sqrt(1 - t^2)` on `t` in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub weighting: Weighting,
}

impl NoiseSchedule {
    pub fn check(&self, t: f64) -> Result<(), GuidanceError> {
        if t > 0.0 && t <= 1.0 {
            Ok(())
        } else {
            Err(GuidanceError::Timestep(t))
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    pub fn alpha(&self, t: f64) -> f64 {
        ((1.0 - t) * (1.0 + t)).sqrt()
    }

    pub fn weight(&self, t: f64) -> f64 {
        match self.weighting {
            Weighting::Constant => 1.0,
            Weighting::SigmaSquared => self.sigma(t).powi(2),
            Weighting::SigmaCubed => self.sigma(t).powi(3),
        }
    }
}

/// `alpha_t image + sigma_t eps`.
pub fn add_noise(
    image: &Image,
    t: f64,
    eps: &Image,
    schedule: &NoiseSchedule,
) -> Result<Image, GuidanceError> {
    schedule.check(t)?;
    check_shape(image, eps)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(Image {
        data: image
            .data
            .iter()
            .zip(&eps.data)
            .map(|(x, e)| a * x + s * e)
            .collect(),
        ..*image
    })
}

/// `eps_uncond + w (eps_cond - eps_uncond)`.
pub fn cfg_combine(cond: &Image, uncond: &Image, weight: f64) -> Result<Image, GuidanceError> {
    check_shape(cond, uncond)?;
    if !(weight >= 0.0) {
        return Err(GuidanceError::Invalid(format!(
            "guidance weight must be non-negative, got {weight}"
        )));
    }
    Ok(Image {
        data: cond
            .data
            .iter()
            .zip(&uncond.data)
            .map(|(c, u)| u + weight * (c - u))
            .collect(),
        ..*cond
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewTag {
    Front,
    Side,
    Back,
    Overhead,
}

impl ViewTag {
    pub fn suffix(self) -> &'static str {
        match self {
            ViewTag::Front => "front view",
            ViewTag::Side => "side view",
            ViewTag::Back => "back view",
            ViewTag::Overhead => "overhead view",
        }
    }

    /// Quadrants split at +-45 and +-135 degrees of azimuth; anything above
    /// 60 degrees of elevation is overhead.
    pub fn from_angles(azimuth_deg: f64, elevation_deg: f64) -> Self {
        if elevation_deg > 60.0 {
            return ViewTag::Overhead;
        }
        let az = azimuth_deg.rem_euclid(360.0);
        if !(45.0..315.0).contains(&az) {
            ViewTag::Front
        } else if (135.0..225.0).contains(&az) {
            ViewTag::Back
        } else {
            ViewTag::Side
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub prompt: String,
    pub view: Option<ViewTag>,
    pub uncond: bool,
}

impl Conditioning {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            view: None,
            uncond: false,
        }
    }

    /// The text a model sees: empty when unconditional, otherwise the prompt
    /// with its view suffix.
    pub fn text(&self) -> String {
        match (self.uncond, self.view) {
            (true, _) => String::new(),
            (false, Some(v)) => format!("{}, {}", self.prompt, v.suffix()),
            (false, None) => self.prompt.clone(),
        }
    }

    pub fn unconditional(&self) -> Self {
        Self {
            uncond: true,
            ..self.clone()
        }
    }
}

/// View-dependent prompt for a camera looking at the origin.
pub fn view_conditioning(prompt: &str, camera: &Camera) -> Conditioning {
    let (az, el) = camera.azimuth_elevation();
    Conditioning {
        prompt: prompt.to_string(),
        view: Some(ViewTag::from_angles(az, el)),
        uncond: false,
    }
}

/// A noise predictor `eps(noisy; y, t)`.
pub trait ScoreModel: Send + Sync {
    fn accepts_depth(&self) -> bool;

    /// Receives the noise a sampler injected before it asks for predictions.
    /// Real models ignore it; [`NoiseOracle`] answers with it.
    fn observe_injected_noise(&self, _eps: &Image) {}

    fn predict_noise(
        &self,
        noisy: &Image,
        t: f64,
        cond: &Conditioning,
        depth: Option<&Image>,
    ) -> Result<Image, GuidanceError>;

    /// Conditional and unconditional predictions for the same input.
    fn predict_pair(
        &self,
        noisy: &Image,
        t: f64,
        cond: &Conditioning,
        depth: Option<&Image>,
    ) -> Result<(Image, Image), GuidanceError> {
        let c = self.predict_noise(noisy, t, cond, depth)?;
        let u = self.predict_noise(noisy, t, &cond.unconditional(), depth)?;
        Ok((c, u))
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn accepts_depth(&self) -> bool {
        (**self).accepts_depth()
    }
    fn observe_injected_noise(&self, eps: &Image) {
        (**self).observe_injected_noise(eps)
    }
    fn predict_noise(
        &self,
        noisy: &Image,
        t: f64,
        cond: &Conditioning,
        depth: Option<&Image>,
    ) -> Result<Image, GuidanceError> {
        (**self).predict_noise(noisy, t, cond, depth)
    }
    fn predict_pair(
        &self,
        noisy: &Image,
        t: f64,
        cond: &Conditioning,
        depth: Option<&Image>,
    ) -> Result<(Image, Image), GuidanceError> {
        (**self).predict_pair(noisy, t, cond, depth)
    }
}

/// Test model whose prediction is exactly the noise last injected by the
/// sampler, a perfect denoiser.
#[derive(Debug, Default)]
pub struct NoiseOracle {
    last: std::sync::Mutex<Option<Image>>,
    pub depth_capable: bool,
}

impl NoiseOracle {
    pub fn new(depth_capable: bool) -> Self {
        Self {
            last: std::sync::Mutex::new(None),
            depth_capable,
        }
    }
}

impl ScoreModel for NoiseOracle {
    fn accepts_depth(&self) -> bool {
        self.depth_capable
    }

    fn observe_injected_noise(&self, eps: &Image) {
        *self.last.lock().expect("oracle poisoned") = Some(eps.clone());
    }

    fn predict_noise(
        &self,
        noisy: &Image,
        _t: f64,
        _cond: &Conditioning,
        _depth: Option<&Image>,
    ) -> Result<Image, GuidanceError> {
        let last = self.last.lock().expect("oracle poisoned");
        let eps = last
            .as_ref()
            .ok_or_else(|| GuidanceError::Invalid("no noise observed yet".into()))?;
        check_shape(noisy, eps)?;
        Ok(eps.clone())
    }
}

/// Mean of the analytic prior.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorMean {
    /// The same RGB value at every pixel.
    Color([f64; 3]),
    Image(Image),
    /// `color` inside a centred disc whose radius is `radius` times half the
    /// shorter image side, `background` outside.
    Disc {
        color: [f64; 3],
        background: [f64; 3],
        radius: f64,
    },
}

impl PriorMean {
    fn value(&self, index: usize, like: &Image) -> f64 {
        let k = (index % like.channels).min(2);
        match self {
            PriorMean::Color(c) => c[k],
            PriorMean::Image(img) => img.data[index],
            PriorMean::Disc { color, background, radius } => {
                let p = index / like.channels;
                let dx = (p % like.width) as f64 + 0.5 - like.width as f64 / 2.0;
                let dy = (p / like.width) as f64 + 0.5 - like.height as f64 / 2.0;
                let r = radius * like.width.min(like.height) as f64 / 2.0;
                if dx * dx + dy * dy <= r * r {
                    color[k]
                } else {
                    background[k]
                }
            }
        }
    }
}

/// Exact denoiser for data distributed as `N(mu, s^2 I)`. `s = 0` is the
/// delta prior, which recovers the injected noise exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPriorScore {
    pub mean: PriorMean,
    pub std: f64,
    pub schedule: NoiseSchedule,
    /// Prior used for unconditional predictions; the conditional one if unset.
    pub uncond_mean: Option<PriorMean>,
    pub depth_capable: bool,
}

impl GaussianPriorScore {
    pub fn new(mean: PriorMean, std: f64) -> Result<Self, GuidanceError> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(GuidanceError::Invalid(format!("prior std must be >= 0, got {std}")));
        }
        Ok(Self {
            mean,
            std,
            schedule: NoiseSchedule::default(),
            uncond_mean: None,
            depth_capable: true,
        })
    }

    /// `sigma_t (noisy - alpha_t mu) / (alpha_t^2 s^2 + sigma_t^2)`.
    pub fn predict(&self, noisy: &Image, t: f64, mean: &PriorMean) -> Result<Image, GuidanceError> {
        self.schedule.check(t)?;
        if let PriorMean::Image(m) = mean {
            check_shape(noisy, m)?;
        }
        let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
        let denom = a * a * self.std * self.std + s * s;
        Ok(Image {
            data: noisy
                .data
                .iter()
                .enumerate()
                .map(|(i, x)| s * (x - a * mean.value(i, noisy)) / denom)
                .collect(),
            ..*noisy
        })
    }
}

impl ScoreModel for GaussianPriorScore {
    fn accepts_depth(&self) -> bool {
        self.depth_capable
    }

    fn predict_noise(
        &self,
        noisy: &Image,
        t: f64,
        cond: &Conditioning,
        depth: Option<&Image>,
    ) -> Result<Image, GuidanceError> {
        if depth.is_some() && !self.depth_capable {
            return Err(GuidanceError::DepthUnsupported);
        }
        let mean = match (&self.uncond_mean, cond.uncond) {
            (Some(u), true) => u,
            _ => &self.mean,
        };
        self.predict(noisy, t, mean)
    }
}

/// Min-max normalizes finite depths to `[0, 1]`; uncovered (infinite)
/// pixels map to 1.
pub fn normalize_depth(depth: &Image) -> Image {
    let finite = depth.data.iter().copied().filter(|d| d.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
        (lo.min(d), hi.max(d))
    });
    let span = hi - lo;
    depth.map(|d| {
        if !d.is_finite() {
            1.0
        } else if span > 0.0 {
            (d - lo) / span
        } else {
            0.0
        }
    })
}
