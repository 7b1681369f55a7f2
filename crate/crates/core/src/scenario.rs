//! Scenario files: everything needed to rebuild a synthetic experiment.
//!
//! The required keys describe the rig, the scene and the fusion module.
//! Optional keys fall back to the defaults in [`Scenario::default`].
//!
//! ```
//! use epitrans::scenario::Scenario;
//!
//! let json = r#"{
//!     "cameras": 4, "angle_deg": 30, "radius_mm": 3000, "joints": 5,
//!     "channels": 16, "sigma_px": 1.5, "K": 32, "noise_px": 0, "seed": 1,
//!     "variant": "identity", "weight_mode": "softmax"
//! }"#;
//! let s = Scenario::from_json(json).unwrap();
//! assert_eq!(s.k, 32);
//! assert_eq!(s.map_size, [128, 128]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionParams, FusionVariant, WeightMode};
use crate::synth::{make_rig, make_scene, PipelineConfig, Rig, Scene};
use crate::triangulation::RansacConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub cameras: usize,
    /// Separation between consecutive optical axes.
    pub angle_deg: f64,
    pub radius_mm: f64,
    pub joints: usize,
    pub channels: usize,
    /// Descriptor blob width, feature-map pixels.
    pub sigma_px: f64,
    #[serde(rename = "K", alias = "k")]
    pub k: usize,
    pub noise_px: f64,
    pub seed: u64,
    pub variant: FusionVariant,
    pub weight_mode: WeightMode,

    /// Image `[width, height]`.
    #[serde(default = "defaults::image_size")]
    pub image_size: [u32; 2],
    /// Feature-map `[width, height]`.
    #[serde(default = "defaults::map_size")]
    pub map_size: [usize; 2],
    #[serde(default = "defaults::focal_px")]
    pub focal_px: f64,
    /// Joints are drawn inside a cube of this side centred on the origin.
    #[serde(default = "defaults::extent_mm")]
    pub extent_mm: f64,
    #[serde(default = "defaults::head_size_px")]
    pub head_size_px: f64,
    #[serde(default = "defaults::target_angle_deg")]
    pub target_angle_deg: f64,
    #[serde(default = "defaults::ransac_threshold_px")]
    pub ransac_threshold_px: f64,
    #[serde(default = "defaults::ransac_iterations")]
    pub ransac_iterations: usize,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub profile_view: usize,
}

mod defaults {
    pub fn image_size() -> [u32; 2] {
        [256, 256]
    }
    pub fn map_size() -> [usize; 2] {
        [128, 128]
    }
    pub fn focal_px() -> f64 {
        400.0
    }
    pub fn extent_mm() -> f64 {
        1000.0
    }
    pub fn head_size_px() -> f64 {
        20.0
    }
    pub fn target_angle_deg() -> f64 {
        24.0
    }
    pub fn ransac_threshold_px() -> f64 {
        5.0
    }
    pub fn ransac_iterations() -> usize {
        100
    }
    pub fn temperature() -> f64 {
        1.0
    }
}

impl Default for Scenario {
    /// Ten cameras 24° apart, 21 joints, no noise.
    fn default() -> Self {
        Self {
            cameras: 10,
            angle_deg: 24.0,
            radius_mm: 3000.0,
            joints: 21,
            channels: 16,
            sigma_px: 1.5,
            k: crate::sampler::DEFAULT_SAMPLES,
            noise_px: 0.0,
            seed: 7,
            variant: FusionVariant::IdentityGaussian,
            weight_mode: WeightMode::Softmax,
            image_size: defaults::image_size(),
            map_size: defaults::map_size(),
            focal_px: defaults::focal_px(),
            extent_mm: defaults::extent_mm(),
            head_size_px: defaults::head_size_px(),
            target_angle_deg: defaults::target_angle_deg(),
            ransac_threshold_px: defaults::ransac_threshold_px(),
            ransac_iterations: defaults::ransac_iterations(),
            temperature: defaults::temperature(),
            profile_view: 0,
        }
    }
}

/// Everything [`run_pipeline`](crate::synth::run_pipeline) needs.
#[derive(Debug, Clone)]
pub struct Built {
    pub rig: Rig,
    pub scene: Scene,
    pub params: FusionParams,
    pub pipeline: PipelineConfig,
}

impl Scenario {
    /// Parses JSON. Errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Format(format!("config key `{path}`: {}", e.inner()))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            k: self.k,
            noise_px: self.noise_px,
            seed: self.seed,
            sigma_px: self.sigma_px,
            map_wh: (self.map_size[0], self.map_size[1]),
            target_angle_deg: self.target_angle_deg,
            head_size_px: self.head_size_px,
            ransac: RansacConfig {
                threshold_px: self.ransac_threshold_px,
                iterations: self.ransac_iterations,
            },
            profile_view: self.profile_view,
        }
    }

    pub fn rig(&self) -> Result<Rig> {
        make_rig(
            self.cameras,
            self.angle_deg,
            self.radius_mm,
            (self.image_size[0], self.image_size[1]),
            self.focal_px,
            self.seed,
        )
    }

    pub fn scene(&self) -> Result<Scene> {
        make_scene(self.joints, self.extent_mm, self.channels, self.seed)
    }

    /// Zero `W_z` plus seeded embeddings.
    pub fn params(&self) -> Result<FusionParams> {
        FusionParams::seeded(self.variant, self.weight_mode, self.channels, self.seed)?.with_temperature(self.temperature)
    }

    /// Checks ranges that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.angle_deg > 0.0 && self.angle_deg < 180.0) {
            return Err(Error::InvalidAngle(self.angle_deg));
        }
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if !(self.noise_px >= 0.0 && self.noise_px.is_finite()) {
            return bad(format!("noise_px must be a finite non-negative number, got {}", self.noise_px));
        }
        if !(self.sigma_px > 0.0 && self.sigma_px.is_finite()) {
            return bad(format!("sigma_px must be positive, got {}", self.sigma_px));
        }
        if self.map_size[0] < 2 || self.map_size[1] < 2 {
            return bad("map_size must be at least 2×2".into());
        }
        if self.profile_view >= self.cameras {
            return bad(format!("profile_view {} out of range", self.profile_view));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Built> {
        self.validate()?;
        Ok(Built {
            rig: self.rig()?,
            scene: self.scene()?,
            params: self.params()?,
            pipeline: self.pipeline_config(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let s = Scenario::default();
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
        assert!(s.to_json().contains("\"K\": 64"));
    }

    #[test]
    fn errors_name_the_key() {
        let mut v: serde_json::Value = serde_json::from_str(&Scenario::default().to_json()).unwrap();
        v["angle_deg"] = "wide".into();
        let err = Scenario::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("angle_deg"), "{err}");

        v["angle_deg"] = 24.into();
        v["bogus"] = 1.into();
        let err = Scenario::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");

        v.as_object_mut().unwrap().remove("bogus");
        v.as_object_mut().unwrap().remove("seed");
        let err = Scenario::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn enum_spellings() {
        let mut v: serde_json::Value = serde_json::from_str(&Scenario::default().to_json()).unwrap();
        v["variant"] = "bottleneck".into();
        v["weight_mode"] = "max".into();
        let s = Scenario::from_json(&v.to_string()).unwrap();
        assert_eq!(s.variant, FusionVariant::BottleneckEmbeddedGaussian);
        assert_eq!(s.weight_mode, WeightMode::Max);
    }

    #[test]
    fn zero_angle_is_a_domain_error() {
        let s = Scenario {
            angle_deg: 0.0,
            ..Scenario::default()
        };
        assert_eq!(s.build().unwrap_err(), Error::InvalidAngle(0.0));
    }
}
