//! Run configuration: TOML with every section optional and unknown keys
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::field::{FieldConfig, SphereFit};
use crate::guidance::{GaussianPriorScore, PriorMean, RemoteConfig, RemoteGuidanceClient, ScoreModel};
use crate::meshing::{AtlasConfig, MeshingConfig};
use crate::render::{Lens, RenderSettings};
use crate::retexture::{JointSampleConfig, RefinePoseSet, StageAConfig, StageBConfig, ViewSet};
use crate::sds::SdsConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub radius: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub tolerance: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        let fit = SphereFit::default();
        Self {
            radius: 0.5,
            steps: fit.steps,
            batch: fit.batch,
            lr: fit.lr,
            tolerance: fit.tolerance,
        }
    }
}

impl InitConfig {
    pub fn sphere_fit(&self) -> SphereFit {
        SphereFit {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            tolerance: self.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TexturingConfig {
    /// Side of the square canonical and refinement renders.
    pub render_resolution: usize,
    pub view_radius: f64,
    pub fov_y_deg: f64,
    pub background: [f64; 3],
    pub sampler: JointSampleConfig,
    pub stage_a: StageAConfig,
    pub stage_b: StageBConfig,
    pub refine_azimuths: usize,
    pub refine_elevations_deg: Vec<f64>,
}

impl Default for TexturingConfig {
    fn default() -> Self {
        Self {
            render_resolution: 256,
            view_radius: 3.0,
            fov_y_deg: 40.0,
            background: [1.0; 3],
            sampler: JointSampleConfig::default(),
            stage_a: StageAConfig::default(),
            stage_b: StageBConfig::default(),
            refine_azimuths: 8,
            refine_elevations_deg: vec![-20.0, 20.0],
        }
    }
}

impl TexturingConfig {
    pub fn lens(&self) -> Lens {
        Lens::square(self.fov_y_deg, self.render_resolution)
    }

    pub fn views(&self) -> ViewSet {
        ViewSet::new(self.view_radius, &self.lens())
    }

    pub fn poses(&self) -> Result<RefinePoseSet, PipelineError> {
        Ok(RefinePoseSet::rings(
            self.refine_azimuths,
            &self.refine_elevations_deg,
            self.view_radius,
            &self.lens(),
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Analytic,
    Remote,
}

impl std::str::FromStr for Backend {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "analytic" => Ok(Backend::Analytic),
            "remote" => Ok(Backend::Remote),
            other => Err(PipelineError::Config(format!("unknown backend `{other}`"))),
        }
    }
}

/// Gaussian-prior stand-in for a diffusion model. Geometry is guided toward
/// a centred disc of `color` over `background`; texturing toward `color`
/// everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticPrior {
    pub color: [f64; 3],
    pub background: [f64; 3],
    /// Disc radius as a fraction of half the shorter image side.
    pub silhouette_radius: f64,
    pub uncond_color: [f64; 3],
    pub std: f64,
}

impl Default for AnalyticPrior {
    fn default() -> Self {
        Self {
            color: [0.75, 0.45, 0.25],
            background: [0.5; 3],
            silhouette_radius: 0.5,
            uncond_color: [0.5; 3],
            std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub backend: Backend,
    pub analytic: AnalyticPrior,
    pub remote: RemoteConfig,
}

impl GuidanceConfig {
    /// Model for texturing.
    pub fn build(&self) -> Result<Box<dyn ScoreModel>, PipelineError> {
        self.build_with(PriorMean::Color(self.analytic.color))
    }

    /// Model for geometry optimization.
    pub fn build_stage1(&self) -> Result<Box<dyn ScoreModel>, PipelineError> {
        let a = &self.analytic;
        self.build_with(PriorMean::Disc {
            color: a.color,
            background: a.background,
            radius: a.silhouette_radius,
        })
    }

    fn build_with(&self, mean: PriorMean) -> Result<Box<dyn ScoreModel>, PipelineError> {
        Ok(match self.backend {
            Backend::Analytic => {
                let mut m = GaussianPriorScore::new(mean, self.analytic.std)?;
                m.uncond_mean = Some(PriorMean::Color(self.analytic.uncond_color));
                Box::new(m)
            }
            Backend::Remote => Box::new(RemoteGuidanceClient::new(self.remote.clone())?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurntableConfig {
    pub frames: usize,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_y_deg: f64,
    pub resolution: usize,
    pub background: [f64; 3],
}

impl Default for TurntableConfig {
    fn default() -> Self {
        Self {
            frames: 60,
            elevation_deg: 30.0,
            radius: 3.0,
            fov_y_deg: 40.0,
            resolution: 256,
            background: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub prompt: String,
    pub seed: u64,
    pub output: PathBuf,
    pub field: FieldConfig,
    pub init: InitConfig,
    pub stage1: SdsConfig,
    pub meshing: MeshingConfig,
    pub texturing: TexturingConfig,
    pub guidance: GuidanceConfig,
    pub turntable: TurntableConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            prompt: "a wooden crate".into(),
            seed: 0,
            output: PathBuf::from("runs/default"),
            field: FieldConfig::default(),
            init: InitConfig::default(),
            stage1: SdsConfig::default(),
            meshing: MeshingConfig::default(),
            texturing: TexturingConfig::default(),
            guidance: GuidanceConfig::default(),
            turntable: TurntableConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Desk-scale settings: a small field, 32x32 renders, 200 SDS steps and a
    /// 32^3 meshing lattice.
    pub fn smoke() -> Self {
        let d = Self::default();
        Self {
            field: FieldConfig {
                num_frequencies: 4,
                hidden_width: 32,
                hidden_layers: 2,
                color_width: 16,
                ..d.field
            },
            init: InitConfig { steps: 1500, batch: 256, ..d.init },
            stage1: SdsConfig {
                steps: 200,
                lr: 3e-4,
                resolution: 32,
                checkpoint_every: 100,
                eikonal_points: 64,
                render: RenderSettings { samples: 32, ..d.stage1.render },
                ..d.stage1
            },
            meshing: MeshingConfig {
                resolution: 32,
                atlas: AtlasConfig { texels_per_unit: 48.0, ..d.meshing.atlas },
                ..d.meshing
            },
            texturing: TexturingConfig {
                render_resolution: 32,
                sampler: JointSampleConfig { steps: 10, ..d.texturing.sampler },
                stage_a: StageAConfig { steps: 60, ..d.texturing.stage_a },
                stage_b: StageBConfig { steps: 16, ..d.texturing.stage_b },
                refine_azimuths: 4,
                ..d.texturing
            },
            turntable: TurntableConfig { resolution: 64, ..d.turntable },
            ..d
        }
    }

    /// Parses and validates. A run manifest is accepted too; its embedded
    /// `config` table is used.
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let value: toml::Table = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let config: PipelineConfig = match value.get("config") {
            Some(toml::Value::Table(t)) if value.contains_key("manifest_version") => {
                t.clone().try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?
            }
            _ => toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Every setting, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.prompt.trim().is_empty() {
            return bad("prompt is empty".into());
        }
        self.stage1.validate()?;
        self.texturing.sampler.validate()?;
        if self.meshing.resolution < 8 {
            return bad(format!("meshing resolution must be at least 8, got {}", self.meshing.resolution));
        }
        let b = self.meshing.bounds;
        if (0..3).any(|k| !(b.min[k] < b.max[k])) {
            return bad("meshing bounds must have min < max on every axis".into());
        }
        if !(self.init.radius > 0.0 && self.init.radius < self.field.bound) {
            return bad(format!("init radius {} must lie inside the field bound {}", self.init.radius, self.field.bound));
        }
        let t = &self.texturing;
        if t.render_resolution < 8 {
            return bad(format!("render resolution must be at least 8, got {}", t.render_resolution));
        }
        if !(t.view_radius > 0.0 && t.fov_y_deg > 0.0 && t.fov_y_deg < 180.0) {
            return bad("view radius and field of view must be positive".into());
        }
        for (name, lr) in [("stage_a", t.stage_a.lr), ("stage_b", t.stage_b.lr)] {
            if !(lr > 0.0 && lr <= 2.0) {
                return bad(format!("{name} lr must lie in (0, 2], got {lr}"));
            }
        }
        let a = &self.guidance.analytic;
        if !(a.silhouette_radius > 0.0 && a.std >= 0.0) {
            return bad("analytic prior needs a positive silhouette radius and a non-negative std".into());
        }
        if t.stage_b.lambda_sds < 0.0 {
            return bad("lambda_sds must be non-negative".into());
        }
        t.poses()?;
        if self.turntable.resolution == 0 {
            return bad("turntable resolution must be positive".into());
        }
        if self.guidance.backend == Backend::Remote && self.guidance.remote.endpoint.is_empty() {
            return bad("remote backend needs an endpoint".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.turntable.frames, 60);
        assert_eq!(c.turntable.elevation_deg, 30.0);
        assert_eq!(c.texturing.stage_b.guidance_weight, 7.5);
        assert_eq!(c.texturing.poses().unwrap().cameras.len(), 16);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = PipelineConfig::from_toml_str("prompt = \"a teapot\"\nseed = 4\n[stage1]\nsteps = 10\n").unwrap();
        assert_eq!(c.prompt, "a teapot");
        assert_eq!(c.stage1.steps, 10);
        assert_eq!(c.stage1.guidance_weight, 100.0);
        assert_eq!(c.meshing, MeshingConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for text in [
            "promt = \"x\"",
            "[stage1]\nstepz = 3",
            "[texturing.sampler]\nstrength = 0.0",
            "[guidance]\nbackend = \"imagen\"",
            "prompt = \"\"",
            "[meshing]\nresolution = 4",
            "[texturing]\nrefine_azimuths = 1\nrefine_elevations_deg = [0.0]",
        ] {
            assert!(PipelineConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn backend_parses_from_flags() {
        assert_eq!("remote".parse::<Backend>().unwrap(), Backend::Remote);
        assert!("local".parse::<Backend>().is_err());
    }
}
