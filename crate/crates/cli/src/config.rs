//! Experiment configuration: a TOML document layered over a named profile.
//!
//! Loading order, later wins: profile defaults, the config file, the
//! `PERSONAFL_OUTPUT_DIR` / `PERSONAFL_SEED` environment variables,
//! command-line flags. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use personafl::decoding::{BeamConfig, RerankGrid};
use personafl::eval::BleuConfig;
use personafl::federated::{FedConfig, Strategy};
use personafl::model::{ModelConfig, VocabId};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_OUTPUT_DIR: &str = "PERSONAFL_OUTPUT_DIR";
pub const ENV_SEED: &str = "PERSONAFL_SEED";

const FULL_PROFILE: &str = r#"
schema = 1
seed = 0
output_dir = "output"

[data]
speakers = []
vocab_cap = 30000
pretrain_split = { train = 0.8, dev = 0.1, test = 0.1 }
finetune_split = { train = 0.8, dev = 0.1, test = 0.1 }

[model]
embed_dim = 100
hidden_size = 100
persona_dim = 128
num_layers = 4
max_len = 20
dropout = 0.2
persona = true

[pretrain]
epochs = 60
batch_size = 1024
lr = 0.01
clip_threshold = 5.0
inverse = true

[fed]
strategy = "fedavg"
local_epochs = 1
total_rounds = 90
mu = 0.01
drop_fraction = 0.25
batch_size = 1024
lr = 0.01
clip_threshold = 5.0
workers = 0
literal_private_scaling = false
record_wallclock = false

[decode]
beam_size = 200
max_len = 20

[bleu]
max_n = 4
smoothing = "add_one"
"#;

/// Desk-scale overrides applied on top of the full-scale profile.
const TINY_OVERRIDES: &str = r#"
[data]
vocab_cap = 500

[model]
embed_dim = 32
hidden_size = 32
persona_dim = 16
num_layers = 2
max_len = 12
dropout = 0.1

[pretrain]
epochs = 5
batch_size = 16
lr = 1.0

[fed]
total_rounds = 5
batch_size = 16
lr = 1.0

[decode]
beam_size = 8
max_len = 12
"#;

pub const PROFILES: [&str; 2] = ["full", "tiny"];

/// Where a corpus comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusSource {
    /// Movie-dialog style lines and conversations files.
    Cornell { lines: PathBuf, conversations: PathBuf },
    /// `SPEAKER: text` scripts, blank line between scenes.
    Script { files: Vec<PathBuf> },
    /// Cached pairs, one `{speaker, q_tokens, r_tokens}` object per line.
    Jsonl { file: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fractions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub pretrain: CorpusSource,
    pub finetune: CorpusSource,
    /// Responders kept in the fine-tuning corpus; empty keeps everyone.
    pub speakers: Vec<String>,
    pub vocab_cap: usize,
    pub pretrain_split: Fractions,
    pub finetune_split: Fractions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub persona_dim: usize,
    pub num_layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Persona embeddings during fine-tuning.
    pub persona: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_threshold: f64,
    /// Also train the response-to-question model used for reranking.
    pub inverse: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedSection {
    pub strategy: Strategy,
    pub local_epochs: usize,
    pub total_rounds: usize,
    pub mu: f64,
    pub drop_fraction: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_threshold: f64,
    pub workers: usize,
    pub literal_private_scaling: bool,
    pub record_wallclock: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub profile: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub fed: FedSection,
    pub decode: BeamConfig,
    #[serde(default)]
    pub rerank: RerankGrid,
    pub bleu: BleuConfig,
}

/// Values that beat the file: flags first, then environment.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
}

fn profile_table(name: &str) -> Result<Table, CliError> {
    let mut base: Table = toml::from_str(FULL_PROFILE).expect("built-in profile parses");
    match name {
        "full" => {}
        "tiny" => merge(&mut base, toml::from_str(TINY_OVERRIDES).expect("built-in profile parses")),
        other => {
            return Err(CliError::Config(format!(
                "unknown profile {other:?}; known profiles: {}",
                PROFILES.join(", ")
            )))
        }
    }
    base.insert("profile".into(), Value::String(name.into()));
    Ok(base)
}

/// Recursive merge: tables merge key by key, anything else is replaced.
fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl CorpusSource {
    fn resolve(&mut self, base: &Path) {
        match self {
            CorpusSource::Cornell { lines, conversations } => {
                resolve(base, lines);
                resolve(base, conversations);
            }
            CorpusSource::Script { files } => files.iter_mut().for_each(|f| resolve(base, f)),
            CorpusSource::Jsonl { file } => resolve(base, file),
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` over its profile. Relative paths are taken relative to
    /// `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path, ov: &Overrides) -> Result<Self, CliError> {
        let user: Table = toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        let profile = match (&ov.profile, user.get("profile")) {
            (Some(p), _) => p.clone(),
            (None, Some(Value::String(p))) => p.clone(),
            (None, Some(_)) => return Err(CliError::Config("profile must be a string".into())),
            (None, None) => "full".into(),
        };
        let mut table = profile_table(&profile)?;
        merge(&mut table, user);
        table.insert("profile".into(), Value::String(profile));
        let mut cfg: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("config: {e}")))?;

        if let Some(d) = ov.output_dir.clone().or_else(|| std::env::var_os(ENV_OUTPUT_DIR).map(PathBuf::from)) {
            cfg.output_dir = d;
        }
        if let Some(s) = ov.seed {
            cfg.seed = s;
        } else if let Ok(s) = std::env::var(ENV_SEED) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{ENV_SEED} must be an unsigned integer, got {s:?}")))?;
        }
        if let Some(st) = ov.strategy {
            cfg.fed.strategy = st;
        }
        resolve(base_dir, &mut cfg.output_dir);
        cfg.data.pretrain.resolve(base_dir);
        cfg.data.finetune.resolve(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, ov: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, ov)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "config schema {} is not supported (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        if self.data.vocab_cap == 0 {
            return Err(CliError::Config("data.vocab_cap must be positive".into()));
        }
        if self.model.max_len < 2 {
            return Err(CliError::Config("model.max_len must be at least 2".into()));
        }
        if self.pretrain.batch_size == 0 || !self.pretrain.lr.is_finite() || self.pretrain.lr < 0.0 || self.pretrain.clip_threshold.is_nan() || self.pretrain.clip_threshold <= 0.0 {
            return Err(CliError::Config("pretrain batch_size, lr and clip_threshold must be positive".into()));
        }
        if self.decode.beam_size == 0 || self.decode.max_len == 0 {
            return Err(CliError::Config("decode beam_size and max_len must be positive".into()));
        }
        if self.bleu.max_n == 0 {
            return Err(CliError::Config("bleu.max_n must be positive".into()));
        }
        self.split_spec(&self.data.pretrain_split, 0).validate()?;
        self.split_spec(&self.data.finetune_split, 0).validate()?;
        self.fed_config().validate()?;
        self.model_config(VocabId::NUM_RESERVED + 1, 1, false).validate()?;
        Ok(())
    }

    pub fn split_spec(&self, f: &Fractions, seed: u64) -> personafl::corpus::SplitSpec {
        personafl::corpus::SplitSpec {
            train: f.train,
            dev: f.dev,
            test: f.test,
            seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize, num_speakers: usize, persona: bool) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.model.embed_dim,
            hidden_size: self.model.hidden_size,
            persona_dim: self.model.persona_dim,
            num_layers: self.model.num_layers,
            num_speakers,
            persona_enabled: persona,
            max_len: self.model.max_len,
            dropout: self.model.dropout,
        }
    }

    /// Federated settings; the seed is derived from the global one.
    pub fn fed_config(&self) -> FedConfig {
        let f = &self.fed;
        FedConfig {
            strategy: f.strategy,
            local_epochs: f.local_epochs,
            total_rounds: f.total_rounds,
            mu: f.mu,
            drop_fraction: f.drop_fraction,
            lr: f.lr,
            batch_size: f.batch_size,
            clip_threshold: f.clip_threshold,
            seed: personafl::rng::derive_seed(self.seed, &[crate::pipeline::stream::FED]),
            workers: f.workers,
            literal_private_scaling: f.literal_private_scaling,
            record_wallclock: f.record_wallclock,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema = 1
profile = "tiny"
[data]
pretrain = { format = "cornell", lines = "l.txt", conversations = "c.txt" }
finetune = { format = "script", files = ["a.txt", "/abs/b.txt"] }
"#;

    fn load(text: &str, ov: &Overrides) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::from_toml_str(text, Path::new("/base"), ov)
    }

    #[test]
    fn profile_defaults_fill_in() {
        let c = load(MINIMAL, &Overrides::default()).unwrap();
        assert_eq!(c.profile, "tiny");
        assert_eq!(c.model.hidden_size, 32);
        assert_eq!(c.model.persona_dim, 16);
        assert_eq!(c.decode.beam_size, 8);
        assert_eq!(c.fed.mu, 0.01);
        assert_eq!(c.rerank, RerankGrid::default());
        assert_eq!(
            c.data.finetune,
            CorpusSource::Script { files: vec!["/base/a.txt".into(), "/abs/b.txt".into()] }
        );
        let full = load(MINIMAL, &Overrides { profile: Some("full".into()), ..Default::default() }).unwrap();
        assert_eq!(full.model.hidden_size, 100);
        assert_eq!(full.model.num_layers, 4);
        assert_eq!(full.decode.beam_size, 200);
        assert_eq!(full.pretrain.batch_size, 1024);
        assert_eq!(full.data.vocab_cap, 30000);
    }

    #[test]
    fn file_values_and_flags_override() {
        let text = format!("{MINIMAL}\n[model]\nhidden_size = 7\n[fed]\nstrategy = \"fedprox\"\n");
        let c = load(&text, &Overrides::default()).unwrap();
        assert_eq!(c.model.hidden_size, 7);
        assert_eq!(c.model.embed_dim, 32);
        assert_eq!(c.fed.strategy, Strategy::FedProx);
        let ov = Overrides {
            seed: Some(99),
            output_dir: Some("out2".into()),
            strategy: Some(Strategy::FedDrop),
            ..Default::default()
        };
        let c = load(&text, &ov).unwrap();
        assert_eq!(c.seed, 99);
        assert_eq!(c.output_dir, PathBuf::from("/base/out2"));
        assert_eq!(c.fed.strategy, Strategy::FedDrop);
    }

    #[test]
    fn bad_documents_are_rejected() {
        let unknown = format!("{MINIMAL}\n[model]\nwidth = 3\n");
        assert!(matches!(load(&unknown, &Overrides::default()), Err(CliError::Config(_))));
        let schema = MINIMAL.replace("schema = 1", "schema = 2");
        assert!(load(&schema, &Overrides::default()).is_err());
        let profile = MINIMAL.replace("\"tiny\"", "\"huge\"");
        assert!(load(&profile, &Overrides::default()).is_err());
        let no_data = "schema = 1\n";
        assert!(load(no_data, &Overrides::default()).is_err());
        let bad_split = format!("{MINIMAL}\n[data.finetune_split]\ntrain = 0.7\ndev = 0.1\ntest = 0.1\n");
        assert!(load(&bad_split, &Overrides::default()).is_err());
        let bad_source = MINIMAL.replace("format = \"cornell\"", "format = \"csv\"");
        assert!(load(&bad_source, &Overrides::default()).is_err());
    }
}
