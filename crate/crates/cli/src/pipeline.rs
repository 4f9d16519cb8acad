//! The experiment commands. Each reads its inputs from the configuration
//! and the output directory and writes its artifacts there.
//!
//! Output layout:
//!
//! ```text
//! vocab.json                      vocabulary (pre-training train split)
//! speakers.json                   fine-tuning speakers, in id order
//! data/{pretrain,finetune}.{train,dev,test}.jsonl
//! pretrain/model.ckpt             persona-free pre-trained model
//! pretrain/inverse.ckpt           response-to-question model
//! pretrain/epochs.jsonl           per-epoch NLL and dev perplexity
//! server/model.ckpt               shared parameters after fine-tuning
//! clients/<speaker>/persona.ckpt  each speaker's persona row
//! rounds.jsonl                    one record per federated round
//! rerank.json                     tuned reranker weights
//! reports/<stage>-<split>.{json,csv}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use personafl::corpus::{
    build_vocab, detokenize, encode_pairs, make_pairs, normalize_speaker, parse_cornell, parse_tv_script, read_pairs_jsonl,
    speaker_ids, split_pairs, tokenize, TextPair, Vocab,
};
use personafl::decoding::{mert_tune_models, nbest, rerank_best, write_nbest_jsonl, MertOutcome, RerankWeights};
use personafl::eval::{evaluate, perplexity, EvalReport};
use personafl::federated::{assemble_model, lift_pretrained, run_simulation, ClientData, RoundRecord, Strategy};
use personafl::model::{train_epoch, DialoguePair, ModelConfig, Seq2SeqModel, SpeakerId, TrainOptions, VocabId, PERSONA};
use personafl::rng::{derive_seed, seeded};
use personafl::tensor::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::config::{CorpusSource, ExperimentConfig};
use crate::CliError;

type Result<T, E = CliError> = std::result::Result<T, E>;

/// Tags separating the random streams drawn from the global seed.
pub mod stream {
    pub const PRETRAIN_SPLIT: u64 = 1;
    pub const FINETUNE_SPLIT: u64 = 2;
    pub const PRETRAIN_INIT: u64 = 3;
    pub const PRETRAIN_ORDER: u64 = 4;
    pub const INVERSE_INIT: u64 = 5;
    pub const INVERSE_ORDER: u64 = 6;
    pub const LIFT: u64 = 7;
    pub const FED: u64 = 8;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Fedtune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Fedtune => "fedtune",
        }
    }
}

/// Paths inside the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

fn dir_name(speaker: &str) -> String {
    speaker
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }
    pub fn speakers(&self) -> PathBuf {
        self.root.join("speakers.json")
    }
    pub fn data(&self, corpus: &str, split: SplitName) -> PathBuf {
        self.root.join("data").join(format!("{corpus}.{}.jsonl", split.as_str()))
    }
    pub fn pretrain_model(&self) -> PathBuf {
        self.root.join("pretrain").join("model.ckpt")
    }
    pub fn inverse_model(&self) -> PathBuf {
        self.root.join("pretrain").join("inverse.ckpt")
    }
    pub fn pretrain_log(&self) -> PathBuf {
        self.root.join("pretrain").join("epochs.jsonl")
    }
    pub fn inverse_log(&self) -> PathBuf {
        self.root.join("pretrain").join("inverse_epochs.jsonl")
    }
    pub fn server_dir(&self) -> PathBuf {
        self.root.join("server")
    }
    pub fn server_model(&self) -> PathBuf {
        self.server_dir().join("model.ckpt")
    }
    pub fn clients_dir(&self) -> PathBuf {
        self.root.join("clients")
    }
    pub fn client_persona(&self, speaker: &str) -> PathBuf {
        self.clients_dir().join(dir_name(speaker)).join("persona.ckpt")
    }
    pub fn rounds_log(&self) -> PathBuf {
        self.root.join("rounds.jsonl")
    }
    pub fn rerank(&self) -> PathBuf {
        self.root.join("rerank.json")
    }
    pub fn report(&self, stage: Stage, split: SplitName, ext: &str) -> PathBuf {
        self.root
            .join("reports")
            .join(format!("{}-{}.{ext}", stage.as_str(), split.as_str()))
    }
}

/// JSON header stored in every checkpoint written by the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: String,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub dev_ppl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakersFile {
    /// Index is the speaker id.
    pub speakers: Vec<String>,
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

fn save_checkpoint(path: &Path, meta: &CheckpointMeta, params: personafl::tensor::ParamSet) -> Result<()> {
    let ckpt = Checkpoint::new(serde_json::to_string(meta)?, params);
    write_file(path, &ckpt.to_bytes())
}

fn load_checkpoint(path: &Path, kind: &str) -> Result<(CheckpointMeta, personafl::tensor::ParamSet)> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        personafl::Error::Io(io) => personafl::Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta)
        .map_err(|e| personafl::Error::Schema(format!("{}: bad checkpoint header: {e}", path.display())))?;
    if meta.kind != kind {
        return Err(personafl::Error::Schema(format!("{}: expected a {kind} checkpoint, found {}", path.display(), meta.kind)).into());
    }
    Ok((meta, ckpt.params))
}

/// Reads a corpus into tokenized pairs.
pub fn load_corpus(src: &CorpusSource) -> Result<Vec<TextPair>> {
    Ok(match src {
        CorpusSource::Cornell { lines, conversations } => make_pairs(&parse_cornell(lines, conversations)?.utterances, None),
        CorpusSource::Script { files } => {
            if files.is_empty() {
                return Err(CliError::Config("script corpus lists no files".into()));
            }
            let mut utterances = Vec::new();
            for f in files {
                utterances.extend(parse_tv_script(f)?.utterances);
            }
            make_pairs(&utterances, None)
        }
        CorpusSource::Jsonl { file } => {
            let f = File::open(file).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", file.display())))?;
            read_pairs_jsonl(BufReader::new(f))?
        }
    })
}

fn check_model_matches(found: &ModelConfig, cfg: &ExperimentConfig, vocab_size: usize, what: &Path) -> Result<()> {
    let expected = (vocab_size, cfg.model.embed_dim, cfg.model.hidden_size, cfg.model.num_layers);
    let got = (found.vocab_size, found.embed_dim, found.hidden_size, found.num_layers);
    if expected != got {
        return Err(personafl::Error::Schema(format!(
            "{} holds a model with (vocab, embed, hidden, layers) = {got:?}, configuration expects {expected:?}",
            what.display()
        ))
        .into());
    }
    Ok(())
}

fn train_loop(
    model: &mut Seq2SeqModel,
    train: &[DialoguePair],
    dev: &[DialoguePair],
    epochs: usize,
    opts: &TrainOptions<'_>,
    seed: u64,
    label: &str,
) -> Result<Vec<EpochRecord>> {
    let mut rng = seeded(seed);
    let mut log = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let train_nll = train_epoch(model, train, opts, &mut rng)?;
        let dev_ppl = match dev.is_empty() {
            true => None,
            false => Some(perplexity(model, dev)?),
        };
        log::info!("{label} epoch {epoch}: train nll {train_nll:.4}, dev ppl {dev_ppl:?}");
        log.push(EpochRecord { epoch, train_nll, dev_ppl });
    }
    Ok(log)
}

fn swap(pairs: &[DialoguePair]) -> Vec<DialoguePair> {
    pairs.iter().map(DialoguePair::swapped).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub vocab_size: usize,
    pub train_pairs: usize,
    pub epochs: Vec<EpochRecord>,
    pub inverse_epochs: Vec<EpochRecord>,
}

/// Builds the vocabulary and trains the persona-free model (and, if
/// configured, the inverse model) on the pre-training corpus.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainSummary> {
    let layout = Layout::new(&cfg.output_dir);
    let pairs = load_corpus(&cfg.data.pretrain)?;
    if pairs.is_empty() {
        return Err(personafl::Error::Input("pre-training corpus yields no pairs".into()).into());
    }
    let spec = cfg.split_spec(&cfg.data.pretrain_split, derive_seed(cfg.seed, &[stream::PRETRAIN_SPLIT]));
    let split = split_pairs(&pairs, |_| (), &spec)?;
    for (name, part) in [(SplitName::Train, &split.train), (SplitName::Dev, &split.dev), (SplitName::Test, &split.test)] {
        write_jsonl(&layout.data("pretrain", name), part)?;
    }

    let vocab = build_vocab(
        split.train.iter().flat_map(|p| [p.q_tokens.as_slice(), p.r_tokens.as_slice()]),
        cfg.data.vocab_cap,
    );
    write_file(&layout.vocab(), vocab.to_json().as_bytes())?;

    let model_cfg = cfg.model_config(vocab.len(), 1, false);
    let no_speakers = BTreeMap::new();
    let train = encode_pairs(&split.train, &vocab, &no_speakers, model_cfg.max_len)?;
    let dev = encode_pairs(&split.dev, &vocab, &no_speakers, model_cfg.max_len)?;
    let opts = TrainOptions::new(cfg.pretrain.batch_size, cfg.pretrain.lr, cfg.pretrain.clip_threshold);

    let mut model = Seq2SeqModel::new(model_cfg.clone(), derive_seed(cfg.seed, &[stream::PRETRAIN_INIT]))?;
    let epochs = train_loop(
        &mut model,
        &train,
        &dev,
        cfg.pretrain.epochs,
        &opts,
        derive_seed(cfg.seed, &[stream::PRETRAIN_ORDER]),
        "pretrain",
    )?;
    write_jsonl(&layout.pretrain_log(), &epochs)?;
    let meta = CheckpointMeta {
        kind: "pretrain".into(),
        model: model_cfg.clone(),
        strategy: None,
        speaker: None,
    };
    save_checkpoint(&layout.pretrain_model(), &meta, model.into_params())?;

    let mut inverse_epochs = Vec::new();
    if cfg.pretrain.inverse {
        let mut inverse = Seq2SeqModel::new(model_cfg.clone(), derive_seed(cfg.seed, &[stream::INVERSE_INIT]))?;
        inverse_epochs = train_loop(
            &mut inverse,
            &swap(&train),
            &swap(&dev),
            cfg.pretrain.epochs,
            &opts,
            derive_seed(cfg.seed, &[stream::INVERSE_ORDER]),
            "inverse",
        )?;
        write_jsonl(&layout.inverse_log(), &inverse_epochs)?;
        let meta = CheckpointMeta { kind: "inverse".into(), ..meta };
        save_checkpoint(&layout.inverse_model(), &meta, inverse.into_params())?;
    }
    Ok(PretrainSummary {
        vocab_size: vocab.len(),
        train_pairs: train.len(),
        epochs,
        inverse_epochs,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FedtuneSummary {
    pub speakers: Vec<String>,
    pub rounds: Vec<RoundRecord>,
    /// Mean over clients of the pre-trained model's dev perplexity.
    pub pretrained_mean_dev_ppl: Option<f64>,
    /// Mean client dev perplexity before the first round.
    pub initial_mean_dev_ppl: Option<f64>,
    pub final_mean_dev_ppl: Option<f64>,
}

fn load_vocab(layout: &Layout) -> Result<Vocab> {
    let path = layout.vocab();
    let text = fs::read_to_string(&path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e} (run pretrain first)", path.display())))?;
    Ok(Vocab::from_json(&text)?)
}

/// Runs the federated fine-tuning simulation from the pre-trained model.
pub fn cmd_fedtune(cfg: &ExperimentConfig) -> Result<FedtuneSummary> {
    let layout = Layout::new(&cfg.output_dir);
    let vocab = load_vocab(&layout)?;
    let (pre_meta, pre_params) = load_checkpoint(&layout.pretrain_model(), "pretrain")?;
    check_model_matches(&pre_meta.model, cfg, vocab.len(), &layout.pretrain_model())?;
    let pretrained = Seq2SeqModel::from_params(pre_meta.model.clone(), pre_params)?;

    let mut pairs = load_corpus(&cfg.data.finetune)?;
    let wanted: BTreeSet<String> = cfg.data.speakers.iter().map(|s| normalize_speaker(s)).collect();
    if !wanted.is_empty() {
        pairs.retain(|p| wanted.contains(&p.speaker));
    }
    if pairs.is_empty() {
        return Err(personafl::Error::Input("fine-tuning corpus yields no pairs for the selected speakers".into()).into());
    }
    let names: Vec<String> = if wanted.is_empty() {
        pairs.iter().map(|p| p.speaker.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        wanted.into_iter().collect()
    };
    let ids = speaker_ids(names.iter().map(String::as_str));

    let spec = cfg.split_spec(&cfg.data.finetune_split, derive_seed(cfg.seed, &[stream::FINETUNE_SPLIT]));
    let split = split_pairs(&pairs, |p| p.speaker.clone(), &spec)?;
    for (name, part) in [(SplitName::Train, &split.train), (SplitName::Dev, &split.dev), (SplitName::Test, &split.test)] {
        write_jsonl(&layout.data("finetune", name), part)?;
    }
    write_json(&layout.speakers(), &SpeakersFile { speakers: names.clone() })?;

    let model_cfg = cfg.model_config(vocab.len(), names.len(), cfg.model.persona);
    let train = encode_pairs(&split.train, &vocab, &ids, model_cfg.max_len)?;
    let dev = encode_pairs(&split.dev, &vocab, &ids, model_cfg.max_len)?;
    let data: Vec<ClientData> = ids
        .values()
        .map(|&s| ClientData {
            speaker: s,
            train: train.iter().filter(|p| p.speaker == s).cloned().collect(),
            dev: dev.iter().filter(|p| p.speaker == s).cloned().collect(),
        })
        .collect();
    let pretrained_ppls: Vec<f64> = data
        .iter()
        .filter(|d| !d.dev.is_empty())
        .map(|d| perplexity(&pretrained, &d.dev))
        .collect::<Result<_, _>>()?;

    let initial = lift_pretrained(pretrained.params(), &model_cfg, derive_seed(cfg.seed, &[stream::LIFT]))?;
    let fed = cfg.fed_config();

    let rounds_path = layout.rounds_log();
    create_parent(&rounds_path)?;
    let mut rounds_out = BufWriter::new(File::create(&rounds_path)?);
    let mut write_err: Option<std::io::Error> = None;
    let sim = run_simulation(&initial, &model_cfg, data, &fed, |rec, _| {
        if write_err.is_none() {
            let res = serde_json::to_writer(&mut rounds_out, rec)
                .map_err(std::io::Error::from)
                .and_then(|_| rounds_out.write_all(b"\n"));
            write_err = res.err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    rounds_out.flush()?;

    let meta = CheckpointMeta {
        kind: "server".into(),
        model: model_cfg.clone(),
        strategy: Some(fed.strategy),
        speaker: None,
    };
    save_checkpoint(&layout.server_model(), &meta, sim.server.params().clone())?;
    if layout.clients_dir().exists() {
        fs::remove_dir_all(layout.clients_dir())?;
    }
    if model_cfg.persona_enabled {
        for c in &sim.clients {
            let name = &names[c.client_id.index()];
            let meta = CheckpointMeta {
                kind: "persona".into(),
                model: model_cfg.clone(),
                strategy: Some(fed.strategy),
                speaker: Some(name.clone()),
            };
            save_checkpoint(&layout.client_persona(name), &meta, c.private_params()?)?;
        }
    }

    Ok(FedtuneSummary {
        speakers: names,
        pretrained_mean_dev_ppl: (!pretrained_ppls.is_empty())
            .then(|| pretrained_ppls.iter().sum::<f64>() / pretrained_ppls.len() as f64),
        initial_mean_dev_ppl: sim.initial_mean_dev_ppl(),
        final_mean_dev_ppl: sim.final_mean_dev_ppl(),
        rounds: sim.log,
    })
}

/// A loaded model ready for decoding, with what is needed to report on it.
pub struct StageModel {
    pub model: Seq2SeqModel,
    pub inverse: Option<Seq2SeqModel>,
    pub vocab: Vocab,
    pub speakers: Vec<String>,
    pub label: String,
}

impl StageModel {
    pub fn speaker_id(&self, name: &str) -> Result<SpeakerId> {
        let norm = normalize_speaker(name);
        self.speakers
            .iter()
            .position(|s| *s == norm)
            .map(|i| SpeakerId(i as u32))
            .ok_or_else(|| CliError::UnknownSpeaker {
                name: name.to_string(),
                known: self.speakers.clone(),
            })
    }

    fn speaker_map(&self) -> BTreeMap<String, SpeakerId> {
        speaker_ids(self.speakers.iter().map(String::as_str))
    }
}

/// Loads the model of `stage` plus the inverse model, if one was trained.
pub fn load_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<StageModel> {
    let layout = Layout::new(&cfg.output_dir);
    let vocab = load_vocab(&layout)?;
    let speakers = match layout.speakers().exists() {
        true => read_json::<SpeakersFile>(&layout.speakers())?.speakers,
        false => Vec::new(),
    };
    let (model, label) = match stage {
        Stage::Pretrain => {
            let (meta, params) = load_checkpoint(&layout.pretrain_model(), "pretrain")?;
            check_model_matches(&meta.model, cfg, vocab.len(), &layout.pretrain_model())?;
            (Seq2SeqModel::from_params(meta.model, params)?, "pretrain".to_string())
        }
        Stage::Fedtune => {
            let (meta, params) = load_checkpoint(&layout.server_model(), "server")?;
            check_model_matches(&meta.model, cfg, vocab.len(), &layout.server_model())?;
            if meta.model.num_speakers != speakers.len() {
                return Err(personafl::Error::Schema(format!(
                    "server model has {} speakers, speakers.json lists {}",
                    meta.model.num_speakers,
                    speakers.len()
                ))
                .into());
            }
            let mut rows = Vec::new();
            if meta.model.persona_enabled {
                for (i, name) in speakers.iter().enumerate() {
                    let path = layout.client_persona(name);
                    let (_, p) = load_checkpoint(&path, "persona")?;
                    let row = p.value(PERSONA)?;
                    if row.shape() != (1, meta.model.persona_dim) {
                        return Err(personafl::Error::Schema(format!("{}: persona row has shape {:?}", path.display(), row.shape())).into());
                    }
                    rows.push((SpeakerId(i as u32), row.data().to_vec()));
                }
            }
            let label = format!("fedtune-{}", meta.strategy.unwrap_or(Strategy::FedAvg));
            (assemble_model(&meta.model, &params, &rows)?, label)
        }
    };
    let inverse = match layout.inverse_model().exists() {
        true => {
            let (meta, params) = load_checkpoint(&layout.inverse_model(), "inverse")?;
            Some(Seq2SeqModel::from_params(meta.model, params)?)
        }
        false => None,
    };
    Ok(StageModel {
        model,
        inverse,
        vocab,
        speakers,
        label,
    })
}

fn finetune_split(cfg: &ExperimentConfig, sm: &StageModel, split: SplitName) -> Result<Vec<DialoguePair>> {
    let layout = Layout::new(&cfg.output_dir);
    let path = layout.data("finetune", split);
    let f = File::open(&path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e} (run fedtune first)", path.display())))?;
    let pairs = read_pairs_jsonl(BufReader::new(f))?;
    Ok(encode_pairs(&pairs, &sm.vocab, &sm.speaker_map(), sm.model.config().max_len)?)
}

/// Tunes the reranker weights on the fine-tuning dev split and stores them.
pub fn cmd_tune_rerank(cfg: &ExperimentConfig, stage: Stage) -> Result<MertOutcome> {
    let sm = load_stage(cfg, stage)?;
    let dev = finetune_split(cfg, &sm, SplitName::Dev)?;
    let out = mert_tune_models(&dev, &sm.model, sm.inverse.as_ref(), cfg.decode, &cfg.rerank, &cfg.bleu)?;
    write_json(&Layout::new(&cfg.output_dir).rerank(), &out)?;
    Ok(out)
}

/// Stored reranker weights, or zero weights if none were tuned.
pub fn load_weights(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<RerankWeights> {
    let default = Layout::new(&cfg.output_dir).rerank();
    match path {
        Some(p) => Ok(read_json::<MertOutcome>(p)?.weights),
        None if default.exists() => Ok(read_json::<MertOutcome>(&default)?.weights),
        None => Ok(RerankWeights::default()),
    }
}

/// Generates for every pair of a fine-tuning split and writes the report
/// as JSON and CSV.
pub fn cmd_evaluate(cfg: &ExperimentConfig, stage: Stage, split: SplitName, weights: RerankWeights) -> Result<EvalReport> {
    let sm = load_stage(cfg, stage)?;
    let pairs = finetune_split(cfg, &sm, split)?;
    let ev = evaluate(&sm.model, sm.inverse.as_ref(), &pairs, weights, cfg.decode, &cfg.bleu)?;
    let layout = Layout::new(&cfg.output_dir);
    write_json(&layout.report(stage, split, "json"), &ev.report)?;
    let csv = ev.report.to_csv(&sm.label, split.as_str(), |s| {
        sm.speakers.get(s.index()).cloned().unwrap_or_else(|| format!("speaker{}", s.0))
    });
    write_file(&layout.report(stage, split, "csv"), csv.as_bytes())?;
    Ok(ev.report)
}

#[derive(Clone, Debug, Serialize)]
pub struct Generated {
    pub response: String,
    pub tokens: Vec<VocabId>,
}

/// Answers `question` as `speaker`. With `nbest_out`, also dumps the whole
/// N-best list as line-delimited JSON.
pub fn cmd_generate(
    cfg: &ExperimentConfig,
    stage: Stage,
    speaker: &str,
    question: &str,
    weights: RerankWeights,
    nbest_out: Option<&Path>,
) -> Result<Generated> {
    let sm = load_stage(cfg, stage)?;
    let sid = sm.speaker_id(speaker)?;
    let tokens = tokenize(question);
    if tokens.is_empty() {
        return Err(personafl::Error::Input("question is empty".into()).into());
    }
    let q = sm.vocab.encode(&tokens[..tokens.len().min(sm.model.config().max_len)]);
    let list = nbest(&sm.model, sm.inverse.as_ref(), &q, sid, cfg.decode)?;
    let best = rerank_best(&list, weights).ok_or_else(|| personafl::Error::Internal("empty beam".into()))?;
    if let Some(path) = nbest_out {
        create_parent(path)?;
        let mut out = BufWriter::new(File::create(path)?);
        write_nbest_jsonl(&mut out, &[(0, list.clone())])?;
        out.flush()?;
    }
    Ok(Generated {
        response: detokenize(&sm.vocab.decode(best.words())),
        tokens: best.tokens.clone(),
    })
}
