//! Run configuration and ablation plans: TOML schema, validation,
//! canonical hashing, and CLI overrides.
//!
//! The hash embedded in every artifact is computed on the canonical
//! serialization of the fully resolved config, after overrides and grid
//! defaults, so two runs share a hash exactly when they would do the same
//! work.

use crate::blackbox::BlackBoxConfig;
use crate::diffusion::{build_linear_schedule, NoiseSchedule};
use crate::distortions::{default_sweep_specs, DistortionKind, DistortionSpec};
use crate::error::{Result, VeilError};
use crate::metrics::{DefenseTask, MetricsConfig};
use crate::models::{DenoiserKind, IdentityEncoder, ManipulatorKind};
use crate::whitebox::WhiteBoxConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

fn schema_default() -> u32 {
    CONFIG_SCHEMA_VERSION
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    Whitebox,
    Blackbox,
}

impl fmt::Display for DefenseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DefenseMode::Whitebox => "whitebox",
            DefenseMode::Blackbox => "blackbox",
        })
    }
}

/// Diffusion schedule shape; defaults to the published linear schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSettings {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        ScheduleSettings {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSettings {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Which models the run threatens and defends with: a toy kind plus seed,
/// or a serialized weights file (one of the two per model).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSelection {
    pub manipulator: Option<ManipulatorKind>,
    pub manipulator_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manipulator_weights: Option<PathBuf>,
    pub denoiser: Option<DenoiserKind>,
    pub denoiser_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoiser_weights: Option<PathBuf>,
    pub encoder_seed: u64,
    pub encoder_dim: usize,
}

impl Default for ModelSelection {
    fn default() -> Self {
        ModelSelection {
            manipulator: Some(ManipulatorKind::AttributeEditor),
            manipulator_seed: 0,
            manipulator_weights: None,
            denoiser: Some(DenoiserKind::Linear),
            denoiser_seed: 0,
            denoiser_weights: None,
            encoder_seed: 0,
            encoder_dim: 32,
        }
    }
}

impl ModelSelection {
    pub fn validate(&self) -> Result<()> {
        match (&self.manipulator, &self.manipulator_weights) {
            (Some(_), Some(_)) => {
                return Err(VeilError::Config(
                    "choose either a toy manipulator kind or a weights file, not both".into(),
                ))
            }
            (None, None) => {
                return Err(VeilError::Config(
                    "select a manipulator: a toy kind or a weights file".into(),
                ))
            }
            _ => {}
        }
        match (&self.denoiser, &self.denoiser_weights) {
            (Some(_), Some(_)) => {
                return Err(VeilError::Config(
                    "choose either a toy denoiser kind or a weights file, not both".into(),
                ))
            }
            (None, None) => {
                return Err(VeilError::Config(
                    "select a denoiser: a toy kind or a weights file".into(),
                ))
            }
            _ => {}
        }
        if self.encoder_dim < 2 {
            return Err(VeilError::Config(format!(
                "encoder_dim must be >= 2, got {}",
                self.encoder_dim
            )));
        }
        Ok(())
    }
}

/// Evaluation thresholds and the task whose success criterion applies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSettings {
    pub task: DefenseTask,
    pub dsr_l2_threshold: f64,
    pub dsr_idsim_threshold: f64,
    pub psnr_peak: f64,
    pub ssim_window: usize,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        MetricsSettings {
            task: DefenseTask::AttributeEditing,
            dsr_l2_threshold: 0.05,
            dsr_idsim_threshold: 0.4,
            psnr_peak: 2.0,
            ssim_window: 11,
        }
    }
}

impl MetricsSettings {
    pub fn to_metrics_config(&self, encoder: Arc<IdentityEncoder>) -> MetricsConfig {
        MetricsConfig {
            dsr_l2_threshold: self.dsr_l2_threshold,
            dsr_idsim_threshold: self.dsr_idsim_threshold,
            psnr_peak: self.psnr_peak,
            ssim_window: self.ssim_window,
            identity_encoder: encoder,
            perceptual: None,
        }
    }

    fn validate(&self) -> Result<()> {
        // same scalar rules the metrics layer enforces, surfaced at load time
        for (name, v) in [
            ("dsr_l2_threshold", self.dsr_l2_threshold),
            ("dsr_idsim_threshold", self.dsr_idsim_threshold),
            ("psnr_peak", self.psnr_peak),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(VeilError::Config(format!(
                    "metrics.{name} must be finite and > 0, got {v}"
                )));
            }
        }
        if self.ssim_window % 2 == 0 || self.ssim_window == 0 {
            return Err(VeilError::Config(format!(
                "metrics.ssim_window must be odd, got {}",
                self.ssim_window
            )));
        }
        Ok(())
    }
}

/// One full run: which defense, on what, with which models, evaluated how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_default")]
    pub schema_version: u32,
    pub mode: DefenseMode,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleSettings,
    #[serde(default)]
    pub models: ModelSelection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whitebox: Option<WhiteBoxConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blackbox: Option<BlackBoxConfig>,
    #[serde(default)]
    pub metrics: MetricsSettings,
    #[serde(default)]
    pub distortions: Vec<DistortionSpec>,
}

impl RunConfig {
    /// A minimal valid config; tests and plan builders start here.
    pub fn skeleton(mode: DefenseMode, input_dir: PathBuf, output_dir: PathBuf) -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            mode,
            input_dir,
            output_dir,
            seed: 0,
            schedule: ScheduleSettings::default(),
            models: ModelSelection::default(),
            whitebox: None,
            blackbox: None,
            metrics: MetricsSettings::default(),
            distortions: Vec::new(),
        }
    }

    /// Effective white-box settings (mode must match; absent section means
    /// defaults).
    pub fn whitebox_settings(&self) -> Result<WhiteBoxConfig> {
        if self.mode != DefenseMode::Whitebox {
            return Err(VeilError::Config(
                "whitebox settings requested from a blackbox run".into(),
            ));
        }
        Ok(self.whitebox.clone().unwrap_or_default())
    }

    /// Effective black-box settings (mode must match).
    pub fn blackbox_settings(&self) -> Result<BlackBoxConfig> {
        if self.mode != DefenseMode::Blackbox {
            return Err(VeilError::Config(
                "blackbox settings requested from a whitebox run".into(),
            ));
        }
        Ok(self.blackbox.clone().unwrap_or_default())
    }

    /// Trajectory depth of the active mode, for cross-checks.
    fn active_trajectory(&self) -> Result<(usize, usize, usize)> {
        Ok(match self.mode {
            DefenseMode::Whitebox => {
                let wb = self.whitebox_settings()?;
                (wb.t1, wb.t2, wb.inject_start_step)
            }
            DefenseMode::Blackbox => {
                let bb = self.blackbox_settings()?;
                (bb.t1, bb.t2, bb.inject_start_step)
            }
        })
    }

    /// Fill empty distortion grids with the family defaults.
    pub fn normalize(&mut self) {
        for spec in &mut self.distortions {
            if spec.parameter_grid.is_empty() {
                spec.parameter_grid = spec.kind.default_grid();
            }
        }
        if self.distortions.is_empty() {
            self.distortions = default_sweep_specs();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(VeilError::Config(format!(
                "unsupported config schema version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match self.mode {
            DefenseMode::Whitebox => {
                if self.blackbox.is_some() {
                    return Err(VeilError::Config(
                        "whitebox mode does not accept a [blackbox] section".into(),
                    ));
                }
                self.whitebox_settings()?.validate()?;
            }
            DefenseMode::Blackbox => {
                if self.whitebox.is_some() {
                    return Err(VeilError::Config(
                        "blackbox mode does not accept a [whitebox] section \
                         (projection weights and the outer update sign need input gradients)"
                            .into(),
                    ));
                }
                self.blackbox_settings()?.validate()?;
            }
        }
        self.schedule.build()?;
        let (t1, _, _) = self.active_trajectory()?;
        if t1 > self.schedule.steps {
            return Err(VeilError::Config(format!(
                "t1 = {t1} exceeds the schedule length {}",
                self.schedule.steps
            )));
        }
        self.models.validate()?;
        self.metrics.validate()?;
        for spec in &self.distortions {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Command-line flags that override the loaded config.
#[derive(Clone, Debug, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

/// Applies overrides in place; call before hashing so the hash reflects
/// what actually ran. Worker count is an execution knob, not config: it
/// never reaches the hash.
pub fn apply_overrides(cfg: &mut RunConfig, overrides: &CliOverrides) {
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &overrides.out_dir {
        cfg.output_dir = dir.clone();
    }
}

/// Canonical text form used for hashing and artifact embedding.
pub fn canonical_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg)
        .map_err(|e| VeilError::Format(format!("config serialization failed: {e}")))
}

/// Hex SHA-256 of the canonical form.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let text = canonical_toml(cfg)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Parse and fully resolve a config from TOML text. Never panics on
/// malformed input; every failure is a typed error.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut cfg: RunConfig =
        toml::from_str(text).map_err(|e| VeilError::Config(format!("config parse error: {e}")))?;
    cfg.normalize();
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| VeilError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_run_config(&text)
}

/// Swept hyperparameter families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    T1,
    T2,
    InjectStepT,
    Alpha,
    GradientProjection,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::T1 => "t1",
            AblationAxis::T2 => "t2",
            AblationAxis::InjectStepT => "inject_step_t",
            AblationAxis::Alpha => "alpha",
            AblationAxis::GradientProjection => "gradient_projection",
        })
    }
}

/// Fixed distortion operating points probed for every ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistortionProbes {
    pub jpeg_quality: f64,
    pub gaussian_kernel: f64,
    pub average_kernel: f64,
    pub downscale_factor: f64,
}

impl Default for DistortionProbes {
    fn default() -> Self {
        DistortionProbes {
            jpeg_quality: 70.0,
            gaussian_kernel: 5.0,
            average_kernel: 5.0,
            downscale_factor: 0.5,
        }
    }
}

impl DistortionProbes {
    pub fn specs(&self) -> [DistortionSpec; 4] {
        let single = |kind: DistortionKind, p: f64| DistortionSpec {
            kind,
            parameter: p,
            parameter_grid: vec![p],
        };
        [
            single(DistortionKind::Jpeg, self.jpeg_quality),
            single(DistortionKind::GaussianBlur, self.gaussian_kernel),
            single(DistortionKind::AverageBlur, self.average_kernel),
            single(DistortionKind::Downscale, self.downscale_factor),
        ]
    }

    fn validate(&self) -> Result<()> {
        for spec in self.specs() {
            spec.validate()?;
        }
        Ok(())
    }
}

/// One hyperparameter axis swept over a base run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    #[serde(default = "schema_default")]
    pub schema_version: u32,
    pub axis: AblationAxis,
    pub values: Vec<f64>,
    #[serde(default)]
    pub probes: DistortionProbes,
    pub base: RunConfig,
}

fn require_integer(axis: AblationAxis, v: f64) -> Result<usize> {
    if !v.is_finite() || v.fract() != 0.0 || v < 1.0 {
        return Err(VeilError::Config(format!(
            "axis {axis} needs positive integer values, got {v}"
        )));
    }
    Ok(v as usize)
}

impl AblationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(VeilError::Config(format!(
                "unsupported plan schema version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.base.validate()?;
        self.probes.validate()?;
        if self.values.is_empty() {
            return Err(VeilError::Config("ablation needs at least one value".into()));
        }
        for (i, &v) in self.values.iter().enumerate() {
            if self.values[..i].contains(&v) {
                return Err(VeilError::Config(format!(
                    "duplicate ablation value {v} (each value names an output directory)"
                )));
            }
            // per-value feasibility, so failures surface before any work
            apply_axis_value(&self.base, self.axis, v)?;
        }
        Ok(())
    }
}

pub fn parse_ablation_plan(text: &str) -> Result<AblationPlan> {
    let mut plan: AblationPlan =
        toml::from_str(text).map_err(|e| VeilError::Config(format!("plan parse error: {e}")))?;
    plan.base.normalize();
    plan.validate()?;
    Ok(plan)
}

pub fn load_ablation_plan(path: &Path) -> Result<AblationPlan> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| VeilError::Config(format!("cannot read plan {}: {e}", path.display())))?;
    parse_ablation_plan(&text)
}

/// The base config with one axis value applied. The denoising-depth axis
/// also pins the injection window to the full trajectory, matching how the
/// default couples them.
pub fn apply_axis_value(base: &RunConfig, axis: AblationAxis, value: f64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match cfg.mode {
        DefenseMode::Whitebox => {
            let mut wb = cfg.whitebox_settings()?;
            match axis {
                AblationAxis::T1 => wb.t1 = require_integer(axis, value)?,
                AblationAxis::T2 => {
                    let v = require_integer(axis, value)?;
                    wb.t2 = v;
                    wb.inject_start_step = v;
                }
                AblationAxis::InjectStepT => wb.inject_start_step = require_integer(axis, value)?,
                AblationAxis::Alpha => wb.alpha = value,
                AblationAxis::GradientProjection => {
                    if value != 0.0 && value != 1.0 {
                        return Err(VeilError::Config(format!(
                            "gradient_projection values must be 0 (off) or 1 (on), got {value}"
                        )));
                    }
                    wb.projection.enabled = value != 0.0;
                }
            }
            cfg.whitebox = Some(wb);
        }
        DefenseMode::Blackbox => {
            let mut bb = cfg.blackbox_settings()?;
            match axis {
                AblationAxis::T1 => bb.t1 = require_integer(axis, value)?,
                AblationAxis::T2 => {
                    let v = require_integer(axis, value)?;
                    bb.t2 = v;
                    bb.inject_start_step = v;
                }
                AblationAxis::InjectStepT => bb.inject_start_step = require_integer(axis, value)?,
                AblationAxis::Alpha => bb.alpha = value,
                AblationAxis::GradientProjection => {
                    return Err(VeilError::Config(
                        "gradient projection is a whitebox-only setting; \
                         a blackbox run has no fidelity gradient to project"
                            .into(),
                    ))
                }
            }
            cfg.blackbox = Some(bb);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Human-readable value label used in directory names and table rows.
pub fn axis_value_label(axis: AblationAxis, value: f64) -> String {
    match axis {
        AblationAxis::GradientProjection => {
            if value == 0.0 { "off".into() } else { "on".into() }
        }
        _ => format!("{value}"),
    }
}
