//! Whole-pipeline configuration, one TOML file with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::EncoderSpec;
use crate::env::{EnvConfig, Interaction};
use crate::error::{Error, Result};
use crate::render::SceneStyle;
use crate::sac::SacConfig;
use crate::transfer::TransferConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Parent of `<timestamp>-<seed>/` run directories.
    pub runs_dir: String,
    pub csv_name: String,
    pub markdown_name: String,
    pub metrics_name: String,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            runs_dir: "runs".into(),
            csv_name: "results.csv".into(),
            markdown_name: "results.md".into(),
            metrics_name: "metrics.csv".into(),
        }
    }
}

impl ReportConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("runs_dir", &self.runs_dir),
            ("csv_name", &self.csv_name),
            ("markdown_name", &self.markdown_name),
            ("metrics_name", &self.metrics_name),
        ] {
            if v.is_empty() {
                return Err(Error::Config(format!("report.{k}: must not be empty")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub render: SceneStyle,
    pub agent: EncoderSpec,
    pub sac: SacConfig,
    pub transfer: TransferConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            env: EnvConfig::default(),
            render: SceneStyle::default(),
            agent: EncoderSpec::default(),
            sac: SacConfig::default(),
            transfer: TransferConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates. Syntax errors carry TOML line/column info.
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        validate_style(&self.render)?;
        validate_agent(&self.agent, &self.render)?;
        self.sac.validate()?;
        self.transfer.validate()?;
        self.report.validate()
    }
}

fn validate_style(s: &SceneStyle) -> Result<()> {
    let bad = |k: &str, why: &str| Err(Error::Config(format!("render.{k}: {why}")));
    if s.resolution == 0 {
        return bad("resolution", "must be at least 1");
    }
    if !(s.fov_deg > 0.0 && s.fov_deg < 180.0) {
        return bad("fov_deg", "must be in (0, 180)");
    }
    if !(s.eye_height > 0.0 && s.eye_height.is_finite()) {
        return bad("eye_height", "must be positive");
    }
    if !(s.baseline >= 0.0 && s.baseline.is_finite()) {
        return bad("baseline", "must be non-negative");
    }
    if !(0.0..=1.0).contains(&s.ambient) {
        return bad("ambient", "must be in [0, 1]");
    }
    let colors = [("floor_color", s.floor_color), ("sky_color", s.sky_color)];
    for (k, c) in colors {
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad(k, "components must be in [0, 1]");
        }
    }
    if s.light.iter().all(|v| *v == 0.0) || s.light.iter().any(|v| !v.is_finite()) {
        return bad("light", "must be a finite non-zero direction");
    }
    let g = &s.geometry;
    let dims = [
        g.ball_radius,
        g.pyramid_base,
        g.pyramid_height,
        g.doll_body_radius,
        g.doll_head_radius,
    ];
    if dims.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return bad("geometry", "all sizes must be positive");
    }
    Ok(())
}

fn validate_agent(a: &EncoderSpec, style: &SceneStyle) -> Result<()> {
    let bad = |k: &str, why: String| Err(Error::Config(format!("agent.{k}: {why}")));
    if a.in_channels != 6 {
        return bad("in_channels", format!("binocular frames have 6 channels, got {}", a.in_channels));
    }
    if a.input_size != style.resolution {
        return bad(
            "input_size",
            format!("{} does not match render.resolution {}", a.input_size, style.resolution),
        );
    }
    if a.interactions != Interaction::COUNT {
        return bad(
            "interactions",
            format!("must equal the number of interaction types ({})", Interaction::COUNT),
        );
    }
    if a.hidden == 0 || a.features_per_interaction == 0 {
        return bad("hidden", "layer widths must be at least 1".into());
    }
    if a.convs.is_empty() {
        return bad("convs", "need at least one convolution".into());
    }
    a.feature_sizes()?;
    Ok(())
}
