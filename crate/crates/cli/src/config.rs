//! Pipeline configuration. Every section has embedded defaults, so an empty
//! file is valid; unknown keys are rejected with their full path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use detail_core::bake::{BakeOptions, DEFAULT_PIXELS_PER_METER, DEFAULT_RESOLUTION};
use detail_core::material::default_vocabulary;
use detail_core::patch::DEFAULT_STRIDE;
use detail_core::recovery::{DeformOptions, PenetrationOptions, RecoveryWeights};
use detail_core::PATCH_SIZE;
use detail_nets::backbone::BackboneSource;
use detail_nets::classifier::{ClassifierConfig, DEFAULT_PATCHES_PER_VOTE};
use detail_nets::enhancer::EnhancerConfig;
use detail_nets::evaluate::DEFAULT_PATCHES_PER_FRAME;
use detail_nets::gram::LayerConfig;
use detail_nets::train::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; `--seed` overrides it.
    pub seed: u64,
    pub materials: Vec<String>,
    pub paths: PathsConfig,
    pub backbone: BackboneSource,
    pub layers: LayerConfig,
    pub patch: PatchConfig,
    pub bake: BakeConfig,
    pub enhancer: EnhancerSection,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub vote: VoteConfig,
    pub recovery: RecoveryConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            materials: default_vocabulary(),
            paths: PathsConfig::default(),
            backbone: BackboneSource::default(),
            layers: LayerConfig::default(),
            patch: PatchConfig::default(),
            bake: BakeConfig::default(),
            enhancer: EnhancerSection::default(),
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            vote: VoteConfig::default(),
            recovery: RecoveryConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Enhancer checkpoint used by `enhance`.
    pub enhancer: Option<PathBuf>,
    /// Classifier checkpoint used by `enhance` when no material is given.
    pub classifier: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub size: usize,
    pub stride: usize,
    /// Pixel density the networks work at.
    pub pixels_per_meter: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { size: PATCH_SIZE, stride: DEFAULT_STRIDE, pixels_per_meter: DEFAULT_PIXELS_PER_METER }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BakeConfig {
    pub width: usize,
    pub height: usize,
    pub pixels_per_meter: f64,
    pub overlap_tolerance: usize,
}

impl Default for BakeConfig {
    fn default() -> Self {
        let d = BakeOptions::default();
        Self {
            width: DEFAULT_RESOLUTION,
            height: DEFAULT_RESOLUTION,
            pixels_per_meter: DEFAULT_PIXELS_PER_METER,
            overlap_tolerance: d.overlap_tolerance,
        }
    }
}

impl BakeConfig {
    pub fn options(&self, frame_index: usize) -> BakeOptions {
        BakeOptions {
            width: self.width,
            height: self.height,
            pixels_per_meter: self.pixels_per_meter,
            overlap_tolerance: self.overlap_tolerance,
            frame_index,
        }
    }
}

/// Enhancer architecture; the material count comes from `materials`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancerSection {
    pub widths: [usize; 4],
    pub out_init_scale: f64,
}

impl Default for EnhancerSection {
    fn default() -> Self {
        let d = EnhancerConfig::default();
        Self { widths: d.widths, out_init_scale: d.out_init_scale }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteConfig {
    pub patches_per_frame: usize,
    /// Frames of a sequence that take part in the vote (0 = all).
    pub max_frames: usize,
}

impl Default for VoteConfig {
    fn default() -> Self {
        Self { patches_per_frame: DEFAULT_PATCHES_PER_VOTE, max_frames: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    pub eta: f64,
    pub omega: f64,
    pub phi: f64,
    pub subdivision_levels: usize,
    pub max_iters: usize,
    pub initial_step: f64,
    pub rel_tol: f64,
    pub max_rounds: usize,
    pub tolerance: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        let w = RecoveryWeights::default();
        let d = DeformOptions::default();
        let p = PenetrationOptions::default();
        Self {
            eta: w.eta,
            omega: w.omega,
            phi: w.phi,
            subdivision_levels: 1,
            max_iters: d.max_iters,
            initial_step: d.initial_step,
            rel_tol: d.rel_tol,
            max_rounds: p.max_rounds,
            tolerance: p.tolerance,
        }
    }
}

impl RecoveryConfig {
    pub fn weights(&self) -> RecoveryWeights {
        RecoveryWeights { eta: self.eta, omega: self.omega, phi: self.phi }
    }

    pub fn deform(&self) -> DeformOptions {
        DeformOptions { max_iters: self.max_iters, initial_step: self.initial_step, rel_tol: self.rel_tol, record_iterates: false }
    }

    pub fn penetration(&self) -> PenetrationOptions {
        PenetrationOptions { phi: self.phi, max_rounds: self.max_rounds, tolerance: self.tolerance, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Random patches per frame for the distribution metric.
    pub patches_per_frame: usize,
    /// Aligned random windows per frame for the improvement score.
    pub improvement_patches: usize,
    /// Fine exemplar patches in the style pool.
    pub pool_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { patches_per_frame: DEFAULT_PATCHES_PER_FRAME, improvement_patches: 8, pool_size: 64 }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner().message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.materials.len() < 2 {
            return bad("`materials` needs at least two entries".into());
        }
        if self.patch.size != PATCH_SIZE {
            return bad(format!("`patch.size` must be {PATCH_SIZE}"));
        }
        if self.patch.stride == 0 || self.patch.stride > self.patch.size {
            return bad(format!("`patch.stride` must be in 1..={}", self.patch.size));
        }
        if !(self.patch.pixels_per_meter > 0.0) || !(self.bake.pixels_per_meter > 0.0) {
            return bad("pixel densities must be positive".into());
        }
        let r = &self.recovery;
        for (k, v) in [("eta", r.eta), ("omega", r.omega), ("phi", r.phi)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("`recovery.{k}` must be positive, got {v}"));
            }
        }
        self.train.validate().map_err(|e| CliError::Config(format!("`train`: {e}")))?;
        self.enhancer_config(0).validate().map_err(|e| CliError::Config(format!("`enhancer`: {e}")))?;
        Ok(())
    }

    /// Applies a `--seed` override to every seeded stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.classifier.seed = self.seed;
        self
    }

    pub fn enhancer_config(&self, seed: u64) -> EnhancerConfig {
        EnhancerConfig {
            widths: self.enhancer.widths,
            materials: self.materials.len(),
            patch_size: self.patch.size,
            out_init_scale: self.enhancer.out_init_scale,
            seed,
        }
    }

    pub fn defaults_toml() -> String {
        toml::to_string(&Self::default()).expect("defaults serialise")
    }
}
