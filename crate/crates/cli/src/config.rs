//! Run configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use fader::attenuation::ScalingMode;
use fader::backbone::BackboneTrainConfig;
use fader::datasets::ToySpec;
use fader::fader::FaderTrainConfig;
use fader::masking::{MaskKind, MaskProviderConfig};
use fader::scoring::{EvalOptions, MaskingMode, DEFAULT_GMS_C};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: PathBuf,
    /// `[H, W]` every image is resized to.
    pub resolution: [usize; 2],
    /// Fail on anomalous test images without a ground-truth mask.
    pub strict: bool,
    /// Used by `synth-data`.
    pub toy: ToySpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/toy"),
            resolution: [64, 64],
            strict: true,
            toy: ToySpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringSection {
    /// Mask provider applied to test images.
    pub mask: MaskProviderConfig,
    pub masking: MaskingMode,
    pub keep_quantile: f64,
    pub scaling: ScalingMode,
    pub levels: Option<usize>,
    pub window: Option<usize>,
    pub gms_c: f64,
    pub batch_size: usize,
    /// Write every anomaly map as a 16-bit PNG.
    pub export_maps: bool,
}

impl Default for ScoringSection {
    fn default() -> Self {
        Self {
            mask: MaskProviderConfig {
                kind: MaskKind::Saliency,
                ..MaskProviderConfig::default()
            },
            masking: MaskingMode::Soft,
            keep_quantile: 0.75,
            scaling: ScalingMode::Nearest,
            levels: None,
            window: None,
            gms_c: DEFAULT_GMS_C,
            batch_size: 16,
            export_maps: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Artifact directory name; defaults to a hash of the configuration.
    pub name: Option<String>,
    pub precision: Precision,
    /// Backbone checkpoint to use instead of the run's own.
    pub backbone_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seed of every section.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub data: DataSection,
    /// Mask provider used while training.
    pub mask: MaskProviderConfig,
    pub backbone: BackboneTrainConfig,
    pub fader: FaderTrainConfig,
    pub scoring: ScoringSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            mask: MaskProviderConfig {
                kind: MaskKind::RandomMulti,
                ..MaskProviderConfig::default()
            },
            backbone: BackboneTrainConfig::default(),
            fader: FaderTrainConfig::default(),
            scoring: ScoringSection::default(),
            run: RunSection::default(),
        }
    }
}

/// Turns a serde "unknown field" error into the dotted key it refers to.
fn unknown_key(text: &str, err: &toml::de::Error) -> Option<String> {
    let msg = err.message();
    let field = msg.strip_prefix("unknown field `")?.split('`').next()?;
    let start = err.span()?.start;
    let header = text[..start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && !l.starts_with("[["))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    Some(match header {
        Some(h) if !h.is_empty() => format!("{h}.{field}"),
        _ => field.to_string(),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| match unknown_key(text, &e) {
            Some(key) => CliError::Usage(format!("unknown configuration key `{key}`")),
            None => CliError::Usage(format!("invalid configuration: {e}")),
        })?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.data.toy.seed = s;
            self.mask.seed = s;
            self.backbone.seed = s;
            self.backbone.unet.init_seed = s;
            self.fader.seed = s;
            self.fader.ranking.seed = s;
            self.scoring.mask.seed = s;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: fader::Error| CliError::Usage(e.to_string());
        self.data.toy.validate().map_err(usage)?;
        self.mask.validate().map_err(usage)?;
        self.backbone.validate().map_err(usage)?;
        self.fader.validate().map_err(usage)?;
        self.scoring.mask.validate().map_err(usage)?;
        if !(self.scoring.keep_quantile > 0.0 && self.scoring.keep_quantile < 1.0) {
            return Err(CliError::Usage("scoring.keep_quantile must lie in (0,1)".into()));
        }
        if !(self.scoring.gms_c > 0.0) {
            return Err(CliError::Usage("scoring.gms_c must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex digest of the configuration without its naming fields.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.name = None;
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_name(&self) -> String {
        self.run.name.clone().unwrap_or_else(|| format!("run-{}", self.hash()))
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            mask: self.scoring.mask.clone(),
            masking: self.scoring.masking,
            keep_quantile: self.scoring.keep_quantile,
            scaling: self.scoring.scaling,
            levels: self.scoring.levels,
            window: self.scoring.window,
            gms_c: self.scoring.gms_c,
            batch_size: self.scoring.batch_size,
            keep_maps: self.scoring.export_maps,
        }
    }
}

/// `<output_dir>/<run_name>/{checkpoints, reports, viz, logs}`
#[derive(Clone, Debug)]
pub struct Layout {
    pub run_dir: PathBuf,
    pub backbone_ckpt: PathBuf,
    pub fader_mlp_ckpt: PathBuf,
    pub fader_decoder_ckpt: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        let run_dir = cfg.output_dir.join(cfg.run_name());
        let ck = run_dir.join("checkpoints");
        Self {
            backbone_ckpt: cfg
                .run
                .backbone_checkpoint
                .clone()
                .unwrap_or_else(|| ck.join("backbone.ckpt")),
            fader_mlp_ckpt: ck.join("fader_mlp.ckpt"),
            fader_decoder_ckpt: ck.join("fader_decoder.ckpt"),
            run_dir,
        }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.run_dir.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.run_dir.join("reports")
    }

    pub fn viz(&self) -> PathBuf {
        self.run_dir.join("viz")
    }

    pub fn logs(&self) -> PathBuf {
        self.run_dir.join("logs")
    }

    pub fn create(&self) -> std::io::Result<()> {
        for d in [self.checkpoints(), self.reports(), self.viz(), self.logs()] {
            std::fs::create_dir_all(d)?;
        }
        Ok(())
    }
}
