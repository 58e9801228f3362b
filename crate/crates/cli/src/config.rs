use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pose_distill::data::{generate_synthetic_dataset, load_reid_root, Dataset, SynthSpec};
use pose_distill::eval::Protocol;
use pose_distill::losses::LossWeights;
use pose_distill::models::{ModelConfig, Preset};
use pose_distill::train::{Stage, TrainConfig};
use pose_distill::{Error, Result};
use serde::{Deserialize, Serialize};

/// Rows of the component analysis, one preset each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// All losses, separate identity-discriminator backbone.
    #[default]
    Full,
    /// Same-pose loss switched off.
    NoSp,
    /// Identity discriminator reuses the encoder.
    ShareE,
    /// Siamese encoder and verification head only.
    Baseline,
    /// Encoder with an identity classifier, no pair head.
    Single,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::NoSp, Ablation::ShareE, Ablation::Baseline, Ablation::Single];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSp => "no_sp",
            Ablation::ShareE => "share_e",
            Ablation::Baseline => "baseline",
            Ablation::Single => "single",
        }
    }

    /// Last stage the preset trains.
    pub fn final_stage(self) -> Stage {
        match self {
            Ablation::Baseline | Ablation::Single => Stage::I,
            _ => Stage::III,
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Ablation::Full | Ablation::Baseline => {}
            Ablation::NoSp => cfg.loss.lambda_sp = 0.0,
            Ablation::ShareE => cfg.model.share_encoder_with_id_disc = true,
            Ablation::Single => cfg.model.single_branch_classifier = true,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation `{s}` (expected one of full, no_sp, share_e, baseline, single)"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Rendered in memory from `synth` (training) and `test` (query/gallery).
    #[default]
    Synth,
    /// Standard reID layout under `root`.
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: Source,
    pub root: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Held-out identities for evaluation.
    pub test: SynthSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let test = SynthSpec { first_identity: 1000, seed: synth.seed + 1, query_gallery: true, ..synth.clone() };
        Self { source: Source::Synth, root: None, synth, test }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Same-identity same-camera junk filtering; defaults to on for
    /// directory data and off for synthetic data.
    pub junk_same_camera: Option<bool>,
    pub max_rank: Option<usize>,
    pub normalize: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub preset: Ablation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let mut dataset = DatasetSection::default();
        let model = ModelConfig::for_preset(preset);
        for s in [&mut dataset.synth, &mut dataset.test] {
            s.height = model.image_height;
            s.width = model.image_width;
        }
        Self {
            preset,
            dataset,
            model,
            loss: LossWeights::default(),
            train: TrainConfig::for_preset(preset),
            eval: EvalSection::default(),
            ablation: AblationSection { preset: Ablation::Full },
        }
    }

    /// Preset defaults, then the file's keys, then flags; then the ablation preset is applied.
    pub fn resolve(file: Option<&str>, over: &Overrides) -> Result<Self> {
        let cfg_err = |e: String| Error::Config(e);
        let doc: toml::Table = match file {
            Some(text) => text.parse().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?,
            None => toml::Table::new(),
        };
        let file_preset = match doc.get("preset") {
            Some(v) => Some(Preset::deserialize(v.clone()).map_err(|e| cfg_err(format!("preset: {e}")))?),
            None => None,
        };
        let preset = over.preset.or(file_preset).unwrap_or(Preset::Desk);
        let base = toml::Table::try_from(Self::for_preset(preset)).map_err(|e| cfg_err(e.to_string()))?;
        let mut merged = toml::Value::Table(base);
        merge(&mut merged, toml::Value::Table(doc));
        let mut cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.preset = preset;
        if let Some(seed) = over.seed {
            cfg.train.seed = seed;
        }
        if let Some(a) = over.ablation {
            cfg.ablation.preset = a;
        }
        cfg.ablation.preset.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, over: &Overrides) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
            None => None,
        };
        Self::resolve(text.as_deref(), over)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) | Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        // the class count of the classifier ablation comes from the training data
        let mut model = self.model.clone();
        if model.single_branch_classifier {
            model.num_classes = model.num_classes.max(2);
        }
        model.validate().map_err(cfg)?;
        self.loss.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        if self.model.preset != self.preset {
            return Err(Error::Config(format!("model preset {:?} disagrees with run preset {:?}", self.model.preset, self.preset)));
        }
        match self.dataset.source {
            Source::Synth => {
                for (what, s) in [("dataset.synth", &self.dataset.synth), ("dataset.test", &self.dataset.test)] {
                    s.validate().map_err(|e| Error::Config(format!("{what}: {e}")))?;
                    if (s.height, s.width) != (self.model.image_height, self.model.image_width) {
                        return Err(Error::Config(format!(
                            "{what} renders {}x{} images but the model expects {}x{}",
                            s.height, s.width, self.model.image_height, self.model.image_width
                        )));
                    }
                }
                if self.dataset.synth.query_gallery || !self.dataset.test.query_gallery {
                    return Err(Error::Config("dataset.synth must be a training set and dataset.test a query/gallery set".into()));
                }
                let train_ids = self.dataset.synth.first_identity..self.dataset.synth.first_identity + self.dataset.synth.n_identities;
                let test_ids = self.dataset.test.first_identity..self.dataset.test.first_identity + self.dataset.test.n_identities;
                if train_ids.start < test_ids.end && test_ids.start < train_ids.end {
                    return Err(Error::Config("training and test identities overlap".into()));
                }
            }
            Source::Directory => {
                if self.dataset.root.is_none() {
                    return Err(Error::Config("dataset.source = \"directory\" needs dataset.root".into()));
                }
            }
        }
        if self.eval.max_rank == Some(0) {
            return Err(Error::Config("eval.max_rank must be >= 1".into()));
        }
        Ok(())
    }

    pub fn protocol(&self) -> Protocol {
        let d = Protocol::default();
        Protocol {
            junk_same_camera: self.eval.junk_same_camera.unwrap_or(self.dataset.source == Source::Directory),
            max_rank: self.eval.max_rank.unwrap_or(d.max_rank),
        }
    }

    pub fn normalize(&self) -> bool {
        self.eval.normalize.unwrap_or(true)
    }

    /// Training split plus the held-out query/gallery splits.
    pub fn dataset(&self) -> Result<Dataset> {
        match self.dataset.source {
            Source::Synth => generate_synthetic_dataset(&self.dataset.synth)?.merge(generate_synthetic_dataset(&self.dataset.test)?),
            Source::Directory => {
                let root = self.dataset.root.as_ref().expect("validated");
                if !root.is_dir() {
                    return Err(Error::MissingDependency(format!("dataset directory {} does not exist", root.display())));
                }
                load_reid_root(root, self.model.image_height, self.model.image_width)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::resolve(None, &Overrides::default()).unwrap();
        assert_eq!(cfg, RunConfig::for_preset(Preset::Desk));
        let again = RunConfig::resolve(Some(&cfg.to_toml()), &Overrides::default()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["colour = 3", "[model]\nembed = 3", "[train.stage2]\nepoch = 3", "[dataset.synth]\nids = 4"] {
            let e = RunConfig::resolve(Some(text), &Overrides::default()).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        }
    }

    #[test]
    fn partial_sections_keep_preset_defaults() {
        let cfg = RunConfig::resolve(Some("[model]\nembed_dim = 64\n[train]\nseed = 9"), &Overrides::default()).unwrap();
        assert_eq!(cfg.model.embed_dim, 64);
        assert_eq!(cfg.model.noise_dim, ModelConfig::desk().noise_dim);
        assert_eq!(cfg.train.seed, 9);
        let full = RunConfig::resolve(None, &Overrides { preset: Some(Preset::Full), ..Default::default() }).unwrap();
        assert_eq!(full.model, ModelConfig::full());
        assert_eq!(full.dataset.synth.height, 256);
    }

    #[test]
    fn ablations_toggle_the_right_knobs() {
        let get = |a| RunConfig::resolve(None, &Overrides { ablation: Some(a), ..Default::default() }).unwrap();
        assert_eq!(get(Ablation::NoSp).loss.lambda_sp, 0.0);
        assert!(get(Ablation::ShareE).model.share_encoder_with_id_disc);
        assert!(get(Ablation::Single).model.single_branch_classifier);
        assert_eq!(get(Ablation::Full), RunConfig::for_preset(Preset::Desk));
        let from_file = RunConfig::resolve(Some("[ablation]\npreset = \"no_sp\""), &Overrides::default()).unwrap();
        assert_eq!(from_file.loss.lambda_sp, 0.0);
    }

    #[test]
    fn flags_beat_the_file() {
        let over = Overrides { seed: Some(3), ..Default::default() };
        let cfg = RunConfig::resolve(Some("[train]\nseed = 9"), &over).unwrap();
        assert_eq!(cfg.train.seed, 3);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["[loss]\nlambda_r = -1.0", "[train]\nbatch_pairs = 0", "[dataset]\nsource = \"directory\"", "[dataset.test]\nfirst_identity = 0"] {
            assert!(matches!(RunConfig::resolve(Some(text), &Overrides::default()), Err(Error::Config(_))), "{text}");
        }
    }
}
