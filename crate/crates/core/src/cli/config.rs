//! Run configuration: one TOML file with a section per subcommand, plus `--key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentConfig, SceneConfig};
use crate::error::{Error, Result};
use crate::experiments::{SceneBenchConfig, ScoreVariant, ToyBenchConfig};
use crate::metrics::DEFAULT_TARGET_TPR;
use crate::nn::{NetworkConfig, TrainConfig};

pub const RESOLVED_CONFIG_FILE: &str = "config.toml";
pub const PROVENANCE_FILE: &str = "provenance.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub out: PathBuf,
    pub seed: u64,
    /// Replace the dataset files of a non-empty `out`.
    pub force: bool,
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_negatives: usize,
    pub negative_min: usize,
    pub negative_max: usize,
    /// Toy points per role and split.
    pub toy_per_role: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = SceneConfig::default();
        SynthConfig {
            out: "data".into(),
            seed: 0,
            force: false,
            image_size: s.image_size,
            n_train: s.n_train,
            n_val: s.n_val,
            n_test: s.n_test,
            n_negatives: s.n_negatives,
            negative_min: s.negative_min,
            negative_max: s.negative_max,
            toy_per_role: ToyBenchConfig::default().n_per_role,
        }
    }
}

impl SynthConfig {
    pub fn scenes(&self) -> SceneConfig {
        SceneConfig {
            image_size: self.image_size,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            n_negatives: self.n_negatives,
            negative_min: self.negative_min,
            negative_max: self.negative_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Checkpoint with training state to continue from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    pub seed: u64,
    pub num_classes: usize,
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    pub epochs: u64,
    pub batch_size: usize,
    pub beta: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub cosine: bool,
    pub norm_momentum: f64,
    pub crop_size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub hflip_prob: f64,
    pub paste_count: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let b = SceneBenchConfig::default();
        TrainSection {
            data: "data".into(),
            out: "run".into(),
            resume: None,
            seed: 0,
            num_classes: crate::data::scene::SCENE_CLASSES,
            widths: b.widths,
            kernel_size: b.kernel_size,
            epochs: b.train.epochs,
            batch_size: b.train.batch_size,
            beta: b.train.beta,
            lr_start: b.train.lr_start,
            lr_end: b.train.lr_end,
            cosine: b.train.cosine,
            norm_momentum: b.train.norm_momentum,
            crop_size: b.augment.crop_size,
            scale_min: b.augment.scale_min,
            scale_max: b.augment.scale_max,
            hflip_prob: b.augment.hflip_prob,
            paste_count: b.augment.paste_count,
        }
    }
}

impl TrainSection {
    pub fn network(&self, input_channels: usize) -> NetworkConfig {
        NetworkConfig {
            input_channels,
            widths: self.widths.clone(),
            num_classes: self.num_classes,
            kernel_size: self.kernel_size,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            beta: self.beta,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            cosine: self.cosine,
            norm_momentum: self.norm_momentum,
            seed: self.seed,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            hflip_prob: self.hflip_prob,
            crop_size: self.crop_size,
            paste_count: self.paste_count,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Manifest split to score, or `all`.
    pub split: String,
    pub out: PathBuf,
    pub num_classes: usize,
    /// `hybrid`, `generative`, `discriminative` or `all`.
    pub score: String,
    /// Writes open-set label maps fused at this threshold.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            checkpoint: "run/checkpoint.dhck".into(),
            data: "data".into(),
            split: "test".into(),
            out: "scores".into(),
            num_classes: crate::data::scene::SCENE_CLASSES,
            score: "all".into(),
            tau: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub data: PathBuf,
    pub scores: PathBuf,
    pub split: String,
    pub out: PathBuf,
    pub num_classes: usize,
    pub score: String,
    pub target_tpr: f64,
    /// Open-mIoU with thresholds calibrated on the opposite fold.
    pub two_fold: bool,
    /// Distance bins `[edges[i], edges[i+1])` in meters; empty disables binning.
    pub bin_edges: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            data: "data".into(),
            scores: "scores".into(),
            split: "test".into(),
            out: "eval".into(),
            num_classes: crate::data::scene::SCENE_CLASSES,
            score: "all".into(),
            target_tpr: DEFAULT_TARGET_TPR,
            two_fold: true,
            bin_edges: vec![0.0, 10.0, 20.0, 30.0, 40.0, 60.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub n_per_role: usize,
    pub widths: Vec<usize>,
    pub chunk: usize,
    pub epochs: u64,
    pub batch_size: usize,
    pub beta: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub cosine: bool,
    pub norm_momentum: f64,
}

impl Default for ToySection {
    fn default() -> Self {
        let b = ToyBenchConfig::default();
        ToySection {
            out: "toy".into(),
            seeds: (0..5).collect(),
            n_per_role: b.n_per_role,
            widths: b.widths,
            chunk: b.chunk,
            epochs: b.train.epochs,
            batch_size: b.train.batch_size,
            beta: b.train.beta,
            lr_start: b.train.lr_start,
            lr_end: b.train.lr_end,
            cosine: b.train.cosine,
            norm_momentum: b.train.norm_momentum,
        }
    }
}

impl ToySection {
    pub fn bench(&self) -> ToyBenchConfig {
        ToyBenchConfig {
            n_per_role: self.n_per_role,
            widths: self.widths.clone(),
            chunk: self.chunk,
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch_size,
                beta: self.beta,
                lr_start: self.lr_start,
                lr_end: self.lr_end,
                cosine: self.cosine,
                norm_momentum: self.norm_momentum,
                seed: 0,
            },
        }
    }
}

/// The whole config file. Missing sections and keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainSection,
    pub score: ScoreSection,
    pub eval: EvalSection,
    pub toy: ToySection,
}

pub const SECTIONS: [&str; 5] = ["synth", "train", "score", "eval", "toy"];

/// `all` or a single variant name.
pub fn parse_variants(s: &str) -> Result<Vec<ScoreVariant>> {
    if s == "all" {
        Ok(ScoreVariant::ALL.to_vec())
    } else {
        Ok(vec![ScoreVariant::parse(s)?])
    }
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Splits `--key=value`, `--key value` and bare `--flag` (= true) arguments.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key=value, got {arg:?}")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else if i + 1 < args.len() && !args[i + 1].starts_with("--") {
            out.push((key.to_string(), args[i + 1].clone()));
            i += 1;
        } else {
            out.push((key.to_string(), "true".to_string()));
        }
        i += 1;
    }
    Ok(out)
}

/// Reads `path` (or the defaults), applies overrides and validates every key.
///
/// An override key is `section.key`, or a bare `key` of `command`'s section.
pub fn load(path: Option<&Path>, command: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (key, raw) in overrides {
        let (section, field) = match key.split_once('.') {
            Some((s, f)) => (s, f),
            None => (command, key.as_str()),
        };
        if !SECTIONS.contains(&section) {
            return Err(Error::Config(format!("unknown config section {section:?} in --{key}")));
        }
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(t) = entry else {
            return Err(Error::Config(format!("config key {section:?} must be a section")));
        };
        t.insert(field.to_string(), override_value(raw));
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the resolved config and a provenance sidecar carrying its hash into `dir`.
pub fn write_resolved(dir: &Path, command: &str, cfg: &RunConfig) -> Result<String> {
    let text = to_toml(cfg)?;
    let hash = sha256_hex(text.as_bytes());
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG_FILE), &text)?;
    fs::write(
        dir.join(PROVENANCE_FILE),
        format!(
            "command = \"{command}\"\nconfig_sha256 = \"{hash}\"\nversion = \"{}\"\n",
            env!("CARGO_PKG_VERSION")
        ),
    )?;
    Ok(hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = to_toml(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_to_the_command_section() {
        let cfg = load(
            None,
            "train",
            &ov(&[
                ("epochs", "3"),
                ("widths", "[4, 4]"),
                ("out", "/tmp/x"),
                ("synth.seed", "9"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.widths, vec![4, 4]);
        assert_eq!(cfg.train.out, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.synth.seed, 9);
    }

    #[test]
    fn overrides_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[train]\nepochs = 7\nbeta = 0.5\n").unwrap();
        let cfg = load(Some(&p), "train", &ov(&[("beta", "0")])).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.beta, 0.0);
    }

    #[test]
    fn non_finite_tau_parses() {
        let cfg = load(None, "score", &ov(&[("tau", "-inf")])).unwrap();
        assert_eq!(cfg.score.tau, Some(f64::NEG_INFINITY));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(
            load(None, "train", &ov(&[("epoch", "3")])),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            load(None, "train", &ov(&[("nope.x", "3")])),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            load(None, "train", &ov(&[("epochs", "many")])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn override_syntax() {
        let args: Vec<String> = ["--a=1", "--b", "2", "--force", "--c=x=y"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            parse_overrides(&args).unwrap(),
            ov(&[("a", "1"), ("b", "2"), ("force", "true"), ("c", "x=y")])
        );
        assert!(parse_overrides(&["oops".to_string()]).is_err());
    }
}
