//! Declarative run, training and sweep files (TOML or JSON, unknown keys rejected).

use std::fs;
use std::path::{Path, PathBuf};

use harmonize_core::codec::{ImageTensor, PixelMask, SpaceToDepth};
use harmonize_core::harmonizer::HarmonizeConfig;
use harmonize_core::toy::{load_snapshot, texture_fixture, StubTextEncoder, ToyDenoiser, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::exit::{CliResult, Failure};

/// One harmonization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub foreground: PathBuf,
    pub background: PathBuf,
    pub mask: PathBuf,
    pub backend: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_codec_factor")]
    pub codec_factor: usize,
    #[serde(default)]
    pub harmonize: HarmonizeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// `t_aug = ⌊ratio · T⌋`.
    TAugRatio,
    OmegaSty,
    OmegaC,
    OmegaSta,
    Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Number(f64),
    Text(String),
}

impl AxisValue {
    pub fn label(&self) -> String {
        match self {
            AxisValue::Number(v) => format!("{v}"),
            AxisValue::Text(s) => s.clone(),
        }
    }
}

/// Either the built-in texture fixture or three image files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum FixtureSpec {
    Builtin { size: usize, seed: u64 },
    Files { foreground: PathBuf, background: PathBuf, mask: PathBuf },
}

impl FixtureSpec {
    pub fn name(&self) -> String {
        match self {
            FixtureSpec::Builtin { size, seed } => format!("texture-{size}-{seed}"),
            FixtureSpec::Files { foreground, .. } => foreground.display().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub backend: PathBuf,
    pub output_dir: PathBuf,
    pub axis: Axis,
    pub values: Vec<AxisValue>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_fixtures")]
    pub fixtures: Vec<FixtureSpec>,
    #[serde(default = "default_codec_factor")]
    pub codec_factor: usize,
    #[serde(default)]
    pub base: HarmonizeConfig,
}

pub const MAX_SWEEP_RUNS: usize = 500;

fn default_codec_factor() -> usize {
    1
}

fn default_fixtures() -> Vec<FixtureSpec> {
    vec![FixtureSpec::Builtin { size: 32, seed: 0 }]
}

pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
        _ => toml::from_str(&text).map_err(|e| e.to_string()),
    };
    parsed.map_err(|e| Failure::config(format!("{}: {}", path.display(), e.trim())))
}

/// Fails with a config error naming `field` when `path` does not exist.
pub fn require_file(field: &str, path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::config(format!("{field}: file not found: {}", path.display())))
    }
}

pub struct Inputs {
    pub foreground: ImageTensor,
    pub background: ImageTensor,
    pub mask: PixelMask,
}

pub fn read_inputs(foreground: &Path, background: &Path, mask: &Path) -> CliResult<Inputs> {
    require_file("foreground", foreground)?;
    require_file("background", background)?;
    require_file("mask", mask)?;
    Ok(Inputs {
        foreground: ImageTensor::read_png(foreground).map_err(|e| Failure::from(e).context("foreground"))?,
        background: ImageTensor::read_png(background).map_err(|e| Failure::from(e).context("background"))?,
        mask: PixelMask::read_png(mask).map_err(|e| Failure::from(e).context("mask"))?,
    })
}

impl FixtureSpec {
    pub fn materialize(&self) -> CliResult<Inputs> {
        match self {
            FixtureSpec::Builtin { size, seed } => {
                let f = texture_fixture(*size, *seed);
                Ok(Inputs {
                    foreground: f.foreground,
                    background: f.background,
                    mask: f.mask,
                })
            }
            FixtureSpec::Files {
                foreground,
                background,
                mask,
            } => read_inputs(foreground, background, mask),
        }
    }
}

/// Frozen toy backend, its text encoder and the codec a run uses.
pub struct Backend {
    pub model: ToyDenoiser,
    pub encoder: StubTextEncoder,
    pub codec: SpaceToDepth,
}

pub fn load_backend(path: &Path, codec_factor: usize) -> CliResult<Backend> {
    require_file("backend", path)?;
    let (model, _) = load_snapshot(path).map_err(|e| Failure::from(e).context("backend"))?;
    let encoder = StubTextEncoder::new(model.config().text_dim, model.config().text_seed);
    let codec = SpaceToDepth::new(codec_factor).map_err(|e| Failure::from(e).context("codec_factor"))?;
    Ok(Backend { model, encoder, codec })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    const SWEEP_TOML: &str = r#"
backend = "m.snap"
output_dir = "out"
axis = "prompt"
values = ["", "disc"]
seeds = [0, 1]
"#;

    #[test]
    fn sweep_spec_parses_with_default_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let spec: SweepSpec = load(&write(dir.path(), "s.toml", SWEEP_TOML)).unwrap();
        assert_eq!(spec.axis, Axis::Prompt);
        assert_eq!(spec.values, vec![AxisValue::Text(String::new()), AxisValue::Text("disc".into())]);
        assert_eq!(spec.fixtures, vec![FixtureSpec::Builtin { size: 32, seed: 0 }]);
        assert_eq!(spec.codec_factor, 1);
    }

    #[test]
    fn json_and_toml_agree() {
        let dir = tempfile::tempdir().unwrap();
        let from_toml: SweepSpec = load(&write(dir.path(), "s.toml", SWEEP_TOML)).unwrap();
        let json = serde_json::to_string(&from_toml).unwrap();
        let from_json: SweepSpec = load(&write(dir.path(), "s.json", &json)).unwrap();
        assert_eq!(from_toml, from_json);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{SWEEP_TOML}colour = 1\n");
        let err = load::<SweepSpec>(&write(dir.path(), "s.toml", &text)).unwrap_err();
        assert_eq!(err.code, crate::exit::CONFIG);
        assert!(err.message.contains("colour"), "{}", err.message);
    }

    #[test]
    fn missing_file_names_the_field() {
        let err = require_file("mask", Path::new("/nonexistent/mask.png")).unwrap_err();
        assert_eq!(err.code, crate::exit::CONFIG);
        assert!(err.message.starts_with("mask:"));
    }

    #[test]
    fn axis_values_keep_their_type() {
        let v: Vec<AxisValue> = serde_json::from_str(r#"[0.5, "disc", 3]"#).unwrap();
        assert_eq!(v[0], AxisValue::Number(0.5));
        assert_eq!(v[1], AxisValue::Text("disc".into()));
        assert_eq!(v[2].label(), "3");
    }
}
