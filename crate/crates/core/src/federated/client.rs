use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::wire::ClientUpdate;
use crate::error::{Error, Result};
use crate::model::{train_epoch, DialoguePair, ModelConfig, Proximal, Seq2SeqModel, SpeakerId, TrainOptions, PERSONA, PERSONA_INIT_STD};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{Matrix, ParamSet, ParamTag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedAvg,
    FedProx,
    FedDrop,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::FedDrop => "feddrop",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub strategy: Strategy,
    /// Local epochs per round.
    pub local_epochs: usize,
    pub total_rounds: usize,
    /// Proximal coefficient, used by FedProx only.
    pub mu: f64,
    /// Fraction of updates discarded each round, used by FedDrop only.
    pub drop_fraction: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_threshold: f64,
    pub seed: u64,
    /// Client training threads; 0 lets the thread pool decide.
    pub workers: usize,
    /// Scale each client's persona change by its share of the samples in the
    /// round. Off by default: persona rows follow plain local SGD.
    pub literal_private_scaling: bool,
    /// Store elapsed seconds in the round log. Off keeps logs reproducible.
    pub record_wallclock: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            strategy: Strategy::FedAvg,
            local_epochs: 1,
            total_rounds: 90,
            mu: 0.01,
            drop_fraction: 0.25,
            lr: 0.01,
            batch_size: 1024,
            clip_threshold: 5.0,
            seed: 0,
            workers: 0,
            literal_private_scaling: false,
            record_wallclock: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if !self.mu.is_finite() || self.mu < 0.0 {
            return Err(Error::Config(format!("mu must be finite and non-negative, got {}", self.mu)));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::Config(format!("drop_fraction must lie in [0, 1), got {}", self.drop_fraction)));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.clip_threshold.is_nan() || self.clip_threshold <= 0.0 {
            return Err(Error::Config("clip_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// One speaker's data as handed to the simulation.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub speaker: SpeakerId,
    pub train: Vec<DialoguePair>,
    pub dev: Vec<DialoguePair>,
}

/// A simulated client: its data and its full local model. Only the
/// client's own persona row is ever written by training.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: SpeakerId,
    pub train: Vec<DialoguePair>,
    pub dev: Vec<DialoguePair>,
    pub model: Seq2SeqModel,
}

impl ClientState {
    pub fn sample_count(&self) -> usize {
        self.train.len()
    }

    /// The client's own persona row as a 1×P private tensor, or an empty
    /// set for persona-free models.
    pub fn private_params(&self) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        if self.model.config().persona_enabled {
            let row = self.model.persona_row(self.client_id)?.to_vec();
            out.insert(PERSONA, Matrix::new(1, row.len(), row)?, ParamTag::Private)?;
        }
        Ok(out)
    }
}

/// Fresh persona row for `speaker`, N(0, 0.1²) from its own seed stream.
pub fn init_persona_row(persona_dim: usize, seed: u64, speaker: SpeakerId) -> Vec<f64> {
    let mut rng = seeded(derive_seed(seed, &[0x7065_7273, speaker.0 as u64]));
    let normal = Normal::new(0.0, PERSONA_INIT_STD).expect("valid std");
    (0..persona_dim).map(|_| normal.sample(&mut rng)).collect()
}

/// Builds a model for `config` from shared parameters and the given
/// persona rows. Rows not listed stay zero.
pub fn assemble_model(config: &ModelConfig, federated: &ParamSet, personas: &[(SpeakerId, Vec<f64>)]) -> Result<Seq2SeqModel> {
    let mut params = federated.federated();
    if config.persona_enabled {
        let mut table = Matrix::zeros(config.num_speakers, config.persona_dim);
        for (s, row) in personas {
            if s.index() >= config.num_speakers || row.len() != config.persona_dim {
                return Err(Error::Schema(format!(
                    "persona row for speaker {} (width {}) does not fit {}x{}",
                    s.0,
                    row.len(),
                    config.num_speakers,
                    config.persona_dim
                )));
            }
            table.row_mut(s.index()).copy_from_slice(row);
        }
        params.insert(PERSONA, table, ParamTag::Private)?;
    } else if !personas.is_empty() {
        return Err(Error::Config("persona rows given for a persona-free model".into()));
    }
    Seq2SeqModel::from_params(config.clone(), params)
}

/// One client per entry of `data`, each starting from `federated` with a
/// freshly drawn persona row.
pub fn init_clients(federated: &ParamSet, config: &ModelConfig, data: Vec<ClientData>, seed: u64) -> Result<Vec<ClientState>> {
    if data.is_empty() {
        return Err(Error::Config("at least one client is required".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    data.into_iter()
        .map(|d| {
            if !seen.insert(d.speaker) {
                return Err(Error::Config(format!("speaker {} listed twice", d.speaker.0)));
            }
            if d.train.is_empty() {
                return Err(Error::Config(format!("speaker {} has no training pairs", d.speaker.0)));
            }
            if let Some(p) = d.train.iter().chain(&d.dev).find(|p| p.speaker != d.speaker) {
                return Err(Error::Input(format!(
                    "client {} was given a pair of speaker {}",
                    d.speaker.0, p.speaker.0
                )));
            }
            let personas = if config.persona_enabled {
                vec![(d.speaker, init_persona_row(config.persona_dim, seed, d.speaker))]
            } else {
                Vec::new()
            };
            Ok(ClientState {
                client_id: d.speaker,
                model: assemble_model(config, federated, &personas)?,
                train: d.train,
                dev: d.dev,
            })
        })
        .collect()
}

/// Trains `client` for `cfg.local_epochs` epochs starting from its current
/// parameters and returns its federated delta against `anchor`, plus the
/// last epoch's mean training NLL. `round` selects the seed stream.
pub fn local_train(client: &mut ClientState, anchor: &ParamSet, cfg: &FedConfig, round: usize) -> Result<(ClientUpdate, f64)> {
    let own = client.model.params().federated();
    own.check_schema(anchor)?;
    let proximal = match cfg.strategy {
        Strategy::FedProx => Some(Proximal { mu: cfg.mu, anchor }),
        _ => None,
    };
    let opts = TrainOptions {
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        clip_threshold: cfg.clip_threshold,
        proximal,
    };
    let mut rng = seeded(derive_seed(cfg.seed, &[round as u64, client.client_id.0 as u64]));
    let mut nll = f64::NAN;
    for _ in 0..cfg.local_epochs {
        nll = train_epoch(&mut client.model, &client.train, &opts, &mut rng)?;
    }
    let mut delta = client.model.params().federated();
    for t in delta.iter_mut() {
        let a = anchor.value(&t.name)?;
        for (d, w) in t.value.data_mut().iter_mut().zip(a.data()) {
            *d -= w;
        }
    }
    let update = ClientUpdate::new(client.client_id, client.sample_count() as u64, delta)?;
    Ok((update, nll))
}
