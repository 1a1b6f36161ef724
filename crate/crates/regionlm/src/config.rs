//! Run configuration: one TOML file drives every command. Every field has
//! a default, the committed reference config spells all of them out, and
//! validation catches cross-module shape conflicts before any allocation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{parse_categories, QuestionType, SynthConfig};
use crate::encoder::EncoderConfig;
use crate::eval::EvalConfig;
use crate::lm::LmConfig;
use crate::model::ModelConfig;
use crate::seq;
use crate::train::{default_stage_plan, StagePlan, TrainError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub patch: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection { patch: 8, dim: 32, seed: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub lm_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
    pub tie_head: bool,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            lm_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            vocab_size: seq::VOCAB_SIZE,
            max_seq: 256,
            seed: 102,
            tie_head: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConnectorSection {
    pub r: usize,
}

impl Default for ConnectorSection {
    fn default() -> Self {
        ConnectorSection { r: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerSection {
    pub layers: usize,
}

impl Default for RefinerSection {
    fn default() -> Self {
        RefinerSection { layers: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Training dataset path; also where `synth` writes.
    pub train: PathBuf,
    /// Held-out dataset path for `eval`.
    pub eval: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { train: "data/train.jsonl".into(), eval: "data/eval.jsonl".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_samples: usize,
    /// Comma list of category names, or "all".
    pub categories: String,
    pub canvas: (usize, usize),
    pub pixels_per_meter: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub min_lr_separation: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            n_samples: 64,
            categories: "all".into(),
            canvas: s.canvas,
            pixels_per_meter: s.pixels_per_meter,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            min_size: s.min_size,
            max_size: s.max_size,
            min_lr_separation: s.min_lr_separation,
        }
    }
}

impl SynthSection {
    pub fn scene(&self) -> SynthConfig {
        SynthConfig {
            canvas: self.canvas,
            pixels_per_meter: self.pixels_per_meter,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_size: self.min_size,
            max_size: self.max_size,
            min_lr_separation: self.min_lr_separation,
        }
    }
}

/// Per-stage overrides; anything omitted falls back to the stage default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub grad_accum: Option<usize>,
    pub base_lr: Option<f64>,
    pub warmup_frac: Option<f64>,
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesSection {
    pub stage1: StageSection,
    pub stage2: StageSection,
    pub stage3: StageSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed: connector/refiner init, sample shuffling, synthesis.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub encoder: EncoderSection,
    pub connector: ConnectorSection,
    pub refiner: RefinerSection,
    pub lm: LmSection,
    pub data: DataSection,
    pub synth: SynthSection,
    pub eval: EvalConfig,
    pub stages: StagesSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 7,
            out_dir: "runs/default".into(),
            encoder: EncoderSection::default(),
            connector: ConnectorSection::default(),
            refiner: RefinerSection::default(),
            lm: LmSection::default(),
            data: DataSection::default(),
            synth: SynthSection::default(),
            eval: EvalConfig::default(),
            stages: StagesSection::default(),
        }
    }
}

impl RunConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { patch: self.encoder.patch, dim: self.encoder.dim, seed: self.encoder.seed }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            lm_dim: self.lm.lm_dim,
            n_layers: self.lm.n_layers,
            n_heads: self.lm.n_heads,
            ffn_mult: self.lm.ffn_mult,
            vocab_size: self.lm.vocab_size,
            max_seq: self.lm.max_seq,
            seed: self.lm.seed,
            tie_head: self.lm.tie_head,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(),
            connector_r: self.connector.r,
            refiner_layers: self.refiner.layers,
            lm: self.lm_config(),
            seed: self.seed,
        }
    }

    pub fn categories(&self) -> Result<BTreeSet<QuestionType>, ConfigError> {
        parse_categories(&self.synth.categories)
            .map_err(|e| invalid(format!("synth.categories: {e}")))
    }

    fn stage_section(&self, stage_id: u8) -> &StageSection {
        match stage_id {
            1 => &self.stages.stage1,
            2 => &self.stages.stage2,
            _ => &self.stages.stage3,
        }
    }

    pub fn stage_plan(&self, stage_id: u8) -> Result<StagePlan, ConfigError> {
        let mut plan = default_stage_plan(stage_id).map_err(config_from_train)?;
        let s = self.stage_section(stage_id);
        if let Some(v) = s.steps {
            plan.steps = v;
        }
        if let Some(v) = s.batch_size {
            plan.batch_size = v;
        }
        if let Some(v) = s.grad_accum {
            plan.grad_accum = v;
        }
        if let Some(v) = s.base_lr {
            plan.base_lr = v;
        }
        if let Some(v) = s.warmup_frac {
            plan.warmup_frac = v;
        }
        if let Some(v) = s.weight_decay {
            plan.weight_decay = v;
        }
        plan.validate().map_err(config_from_train)?;
        Ok(plan)
    }

    pub fn stage_plans(&self) -> Result<Vec<StagePlan>, ConfigError> {
        (1..=3).map(|i| self.stage_plan(i)).collect()
    }

    /// Cross-module consistency; run before any allocation or file work.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version {} unsupported; this build reads {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.model_config()
            .validate()
            .map_err(|e| invalid(format!("model: {e}")))?;
        let (ch, cw) = self.synth.canvas;
        let patch = self.encoder.patch;
        if ch == 0 || cw == 0 || ch % patch != 0 || cw % patch != 0 {
            return Err(invalid(format!(
                "synth canvas {ch}x{cw} must be a positive multiple of encoder patch {patch}"
            )));
        }
        let (gh, gw) = (ch / patch, cw / patch);
        let r = self.connector.r;
        if gh % r != 0 || gw % r != 0 {
            return Err(invalid(format!(
                "feature grid {gh}x{gw} is not divisible by connector factor {r}"
            )));
        }
        // refined cells must be finer than the smallest object, or nearest
        // resampling can produce an empty region
        let refined = (gh / r) << self.refiner.layers;
        let cell = ch.div_ceil(refined.max(1));
        if cell >= self.synth.min_size {
            return Err(invalid(format!(
                "refined grid {refined}x{refined} has {cell}px cells; objects of size {} can \
                 vanish under nearest resampling; add refiner layers or shrink the canvas",
                self.synth.min_size
            )));
        }
        if self.synth.n_samples == 0 {
            return Err(invalid("synth.n_samples must be positive"));
        }
        self.categories()?;
        if self.eval.max_new_tokens == 0 {
            return Err(invalid("eval.max_new_tokens must be positive"));
        }
        let n_vis = (gh / r) * (gw / r);
        if self.lm.max_seq < n_vis + 16 {
            return Err(invalid(format!(
                "lm.max_seq {} cannot fit the {n_vis} image tokens plus a prompt",
                self.lm.max_seq
            )));
        }
        self.stage_plans()?;
        Ok(())
    }
}

fn config_from_train(e: TrainError) -> ConfigError {
    invalid(format!("stages: {e}"))
}

/// Parses a config document. Entry point for untrusted input.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
    parse_config(&text)
}

/// The default configuration as a TOML document.
pub fn reference_toml() -> String {
    toml::to_string_pretty(&RunConfig::default()).expect("defaults serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = reference_toml();
        let parsed = parse_config(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn stage_overrides_apply() {
        let text = r#"
[stages.stage1]
steps = 5
base_lr = 2e-4
[stages.stage3]
batch_size = 2
"#;
        let cfg = parse_config(text).unwrap();
        let p1 = cfg.stage_plan(1).unwrap();
        assert_eq!(p1.steps, 5);
        assert_eq!(p1.base_lr, 2e-4);
        let p2 = cfg.stage_plan(2).unwrap();
        assert_eq!(p2.base_lr, 1e-4);
        let p3 = cfg.stage_plan(3).unwrap();
        assert_eq!(p3.batch_size, 2);
        assert_eq!(p3.base_lr, 5e-5);
    }

    #[test]
    fn broken_configs_are_rejected() {
        let cases: &[(&str, &str)] = &[
            ("schema_version = 99", "schema_version"),
            ("[encoder]\npatch = 0", "model"),
            ("[encoder]\npatch = 7", "multiple of encoder patch"),
            ("[connector]\nr = 3", "divisible by connector factor"),
            ("[lm]\nlm_dim = 30", "model"),
            ("[lm]\nvocab_size = 100", "model"),
            ("[refiner]\nlayers = 1", "vanish under nearest resampling"),
            ("[synth]\nn_samples = 0", "n_samples"),
            ("[synth]\ncategories = \"bogus\"", "categories"),
            ("[stages.stage2]\nbase_lr = -1.0", "stages"),
            ("[stages.stage1]\nwarmup_frac = 1.5", "stages"),
            ("[eval]\nmax_new_tokens = 0", "max_new_tokens"),
            ("[lm]\nmax_seq = 8", "cannot fit"),
        ];
        for (snippet, needle) in cases {
            let err = parse_config(snippet).unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains(needle), "{snippet:?} produced {msg:?}");
        }
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let err = parse_config("bogus_key = 1").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
        let err = parse_config("[lm]\nbogus = 2").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn committed_reference_config_is_current() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, reference_toml(), "configs/reference.toml is stale");
        assert_eq!(parse_config(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn category_filter_parses() {
        let mut cfg = RunConfig::default();
        cfg.synth.categories = "count,distance".into();
        let cats = cfg.categories().unwrap();
        assert_eq!(cats.len(), 2);
        assert!(cats.contains(&QuestionType::Count));
    }
}
