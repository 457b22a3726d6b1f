use std::path::Path;

use avseg_core::model::ModelConfig;
use avseg_core::synthdata::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::exit::{CliError, CONFIG};

pub const SCHEMA_VERSION: u32 = 1;

/// Everything a run reads from its JSON config. Missing keys take their
/// defaults, unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    /// Dataset seed.
    pub seed: u64,
    pub clips: usize,
    /// Fractions of easy, case-1 and case-2 clips.
    pub mix: [f64; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            seed: 7,
            clips: 300,
            mix: [0.4, 0.3, 0.3],
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::new(CONFIG, format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != SCHEMA_VERSION {
            return Err(CliError::new(
                CONFIG,
                format!(
                    "config version {} is not supported (expected {SCHEMA_VERSION})",
                    self.version
                ),
            ));
        }
        self.model.validate()?;
        self.synth.validate()?;
        check_geometry(&self.model, &self.synth).map_err(|m| CliError::new(CONFIG, m))
    }
}

/// Image size, frame count, classes and audio width must agree.
pub fn check_geometry(model: &ModelConfig, synth: &SynthConfig) -> Result<(), String> {
    let m = (
        model.height,
        model.width,
        model.frames,
        model.classes,
        model.audio_dim,
    );
    let s = (
        synth.height,
        synth.width,
        synth.frames,
        synth.classes,
        synth.audio_dim,
    );
    if m != s {
        return Err(format!(
            "model expects (height, width, frames, classes, audio_dim) = {m:?} but the data has {s:?}"
        ));
    }
    Ok(())
}

pub fn parse_mix(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|p| format!("mix needs three fractions, got {}", p.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"model": {"lr": 0.1, "bogus": 1}}"#).is_err()
        );
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": true}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"model": {"steps": 5}}"#).unwrap();
        assert_eq!(partial.model.steps, 5);
        assert_eq!(partial.model.lr, ModelConfig::default().lr);
    }

    #[test]
    fn mismatched_geometry_fails() {
        let mut cfg = RunConfig::default();
        cfg.synth.frames = 5;
        assert_eq!(cfg.validate().unwrap_err().code, CONFIG);
    }

    #[test]
    fn mix_parsing() {
        assert_eq!(parse_mix("0.4,0.3,0.3").unwrap(), [0.4, 0.3, 0.3]);
        assert!(parse_mix("0.5,0.5").is_err());
        assert!(parse_mix("a,b,c").is_err());
    }
}
