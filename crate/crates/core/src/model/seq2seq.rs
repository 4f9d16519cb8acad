use rand_distr::{Distribution, Normal};

use super::cell::{CellCache, CellGrads, CellWeights};
use super::types::{DialoguePair, ModelConfig, SpeakerId, VocabId};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::{dropout_mask_with, xavier_init_with, Matrix, ParamSet, ParamTag};

pub const EMBED: &str = "embed";
pub const PROJ_W: &str = "proj.w";
pub const PROJ_B: &str = "proj.b";
/// Persona columns of decoder layer 0's gate matrix. Shared (federated).
pub const DEC_PERSONA_W: &str = "dec.0.wv";
/// Per-speaker persona table. The only private tensor.
pub const PERSONA: &str = "persona.embed";
pub const PERSONA_INIT_STD: f64 = 0.1;

pub fn enc_w(layer: usize) -> String {
    format!("enc.{layer}.w")
}
pub fn enc_b(layer: usize) -> String {
    format!("enc.{layer}.b")
}
pub fn dec_w(layer: usize) -> String {
    format!("dec.{layer}.w")
}
pub fn dec_b(layer: usize) -> String {
    format!("dec.{layer}.b")
}

/// Per-layer recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub layers: Vec<LayerState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(num_layers: usize, hidden: usize) -> Self {
        LstmState {
            layers: (0..num_layers)
                .map(|_| LayerState {
                    h: vec![0.0; hidden],
                    c: vec![0.0; hidden],
                })
                .collect(),
        }
    }

    pub fn top_h(&self) -> &[f64] {
        &self.layers.last().expect("at least one layer").h
    }
}

#[derive(Clone, Debug)]
struct StepCache {
    cells: Vec<CellCache>,
    /// Dropout mask applied to each layer's input (None in eval mode).
    masks: Vec<Option<Vec<f64>>>,
}

/// Activations from [`Seq2SeqModel::forward_loss`], consumed by
/// [`Seq2SeqModel::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    question: Vec<VocabId>,
    dec_inputs: Vec<VocabId>,
    targets: Vec<VocabId>,
    speaker: Option<usize>,
    enc: Vec<StepCache>,
    dec: Vec<StepCache>,
    top_h: Vec<Vec<f64>>,
    top_masks: Vec<Option<Vec<f64>>>,
    probs: Vec<Vec<f64>>,
    pub nll: f64,
}

impl ForwardCache {
    pub fn num_tokens(&self) -> usize {
        self.targets.len()
    }
}

/// Stacked-LSTM encoder/decoder with an optional persona table. Encoder
/// and decoder share the word embedding table.
#[derive(Clone, Debug)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    params: ParamSet,
    generation: u64,
}

/// Expected `(name, rows, cols, tag)` for every tensor of a configuration.
pub fn param_schema(cfg: &ModelConfig) -> Vec<(String, usize, usize, ParamTag)> {
    let (v, e, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_size);
    let fed = ParamTag::Federated;
    let mut s = vec![(EMBED.to_string(), v, e, fed)];
    for l in 0..cfg.num_layers {
        let x = cfg.layer_input(l);
        s.push((enc_w(l), 4 * h, h + x, fed));
        s.push((enc_b(l), 4 * h, 1, fed));
        s.push((dec_w(l), 4 * h, h + x, fed));
        s.push((dec_b(l), 4 * h, 1, fed));
    }
    if cfg.persona_enabled {
        s.push((DEC_PERSONA_W.to_string(), 4 * h, cfg.persona_dim, fed));
        s.push((PERSONA.to_string(), cfg.num_speakers, cfg.persona_dim, ParamTag::Private));
    }
    s.push((PROJ_W.to_string(), v, h, fed));
    s.push((PROJ_B.to_string(), v, 1, fed));
    s
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b")
}

fn init_tensor(name: &str, rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    if is_bias(name) {
        Ok(Matrix::zeros(rows, cols))
    } else if name == PERSONA {
        let normal = Normal::new(0.0, PERSONA_INIT_STD).expect("valid std");
        Matrix::new(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
    } else {
        xavier_init_with(rows, cols, rng)
    }
}

impl Seq2SeqModel {
    /// Fresh model: Xavier-uniform weights, zero biases, persona rows
    /// drawn from N(0, 0.1²). Each tensor gets its own seed stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (i, (name, rows, cols, tag)) in param_schema(&config).into_iter().enumerate() {
            let mut rng = seeded(derive_seed(seed, &[i as u64]));
            let value = init_tensor(&name, rows, cols, &mut rng)?;
            params.insert(name, value, tag)?;
        }
        Ok(Seq2SeqModel {
            config,
            params,
            generation: 0,
        })
    }

    /// Wraps an existing parameter set, checking it against the schema.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let schema = param_schema(&config);
        if schema.len() != params.len() {
            let names: Vec<_> = params.names().collect();
            return Err(Error::Schema(format!(
                "expected {} tensors for this configuration, found {}: {names:?}",
                schema.len(),
                params.len()
            )));
        }
        for (name, rows, cols, tag) in &schema {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Schema(format!("missing tensor {name:?}")))?;
            if t.value.shape() != (*rows, *cols) || t.tag != *tag {
                return Err(Error::Schema(format!(
                    "tensor {name:?}: expected {rows}x{cols} {tag:?}, found {:?} {:?}",
                    t.value.shape(),
                    t.tag
                )));
            }
        }
        Ok(Seq2SeqModel {
            config,
            params,
            generation: 0,
        })
    }

    /// Builds a model for `config` from a (typically persona-free)
    /// pre-trained parameter set: every tensor present in `pretrained` is
    /// copied, tensors it lacks (the persona columns and the persona table)
    /// are freshly initialised from `seed`.
    pub fn from_pretrained(pretrained: &ParamSet, config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Seq2SeqModel::new(config, seed)?;
        for t in pretrained.iter() {
            let dst = model
                .params
                .get_mut(&t.name)
                .ok_or_else(|| Error::Schema(format!("pre-trained tensor {:?} has no place in this model", t.name)))?;
            if dst.value.shape() != t.value.shape() || dst.tag != t.tag {
                return Err(Error::Schema(format!(
                    "pre-trained tensor {:?} is {:?} {:?}, model expects {:?} {:?}",
                    t.name,
                    t.value.shape(),
                    t.tag,
                    dst.value.shape(),
                    dst.tag
                )));
            }
            dst.value.clone_from(&t.value);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.generation += 1;
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn persona_row(&self, speaker: SpeakerId) -> Result<&[f64]> {
        let table = self.persona_table()?;
        if speaker.index() >= table.rows() {
            return Err(Error::Input(format!(
                "speaker {} outside persona table of {} rows",
                speaker.0,
                table.rows()
            )));
        }
        Ok(table.row(speaker.index()))
    }

    pub fn set_persona_row(&mut self, speaker: SpeakerId, values: &[f64]) -> Result<()> {
        let rows = self.persona_table()?.rows();
        if speaker.index() >= rows || values.len() != self.config.persona_dim {
            return Err(Error::Dimension(format!(
                "persona row {} of width {} does not fit a {rows}x{} table",
                speaker.0,
                values.len(),
                self.config.persona_dim
            )));
        }
        self.params_mut().value_mut(PERSONA)?.row_mut(speaker.index()).copy_from_slice(values);
        Ok(())
    }

    fn persona_table(&self) -> Result<&Matrix> {
        if !self.config.persona_enabled {
            return Err(Error::Input("model has no persona table".into()));
        }
        self.params.value(PERSONA)
    }

    fn check_token(&self, t: VocabId) -> Result<()> {
        if t.index() >= self.config.vocab_size {
            return Err(Error::Vocab {
                id: t.index(),
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_speaker(&self, speaker: SpeakerId) -> Result<Option<usize>> {
        if !self.config.persona_enabled {
            return Ok(None);
        }
        if speaker.index() >= self.config.num_speakers {
            return Err(Error::Input(format!(
                "speaker {} outside persona table of {} rows",
                speaker.0, self.config.num_speakers
            )));
        }
        Ok(Some(speaker.index()))
    }

    fn cell(&self, decoder: bool, layer: usize) -> CellWeights<'_> {
        let (w, b) = if decoder {
            (dec_w(layer), dec_b(layer))
        } else {
            (enc_w(layer), enc_b(layer))
        };
        let wv = (decoder && layer == 0 && self.config.persona_enabled)
            .then(|| self.params.value(DEC_PERSONA_W).expect("schema checked"));
        CellWeights {
            w: self.params.value(&w).expect("schema checked"),
            b: self.params.value(&b).expect("schema checked"),
            wv,
        }
    }

    /// One step through every layer. Mutates `state` in place.
    fn step(
        &self,
        decoder: bool,
        state: &mut LstmState,
        token: VocabId,
        persona: Option<&[f64]>,
        mut dropout: Option<&mut Rng>,
    ) -> Result<StepCache> {
        let embed = self.params.value(EMBED)?;
        let mut x = embed.row(token.index()).to_vec();
        let mut cells = Vec::with_capacity(self.config.num_layers);
        let mut masks = Vec::with_capacity(self.config.num_layers);
        for (l, layer) in state.layers.iter_mut().enumerate() {
            let mask = match dropout.as_deref_mut() {
                Some(rng) if self.config.dropout > 0.0 => {
                    let m = dropout_mask_with(x.len(), self.config.dropout, rng)?;
                    x.iter_mut().zip(&m).for_each(|(xi, mi)| *xi *= mi);
                    Some(m)
                }
                _ => None,
            };
            let v = if decoder && l == 0 { persona } else { None };
            let (h, c, cache) = self.cell(decoder, l).forward(&layer.h, &layer.c, &x, v);
            layer.h.clone_from(&h);
            layer.c = c;
            cells.push(cache);
            masks.push(mask);
            x = h;
        }
        Ok(StepCache { cells, masks })
    }

    fn persona_for(&self, speaker: Option<usize>) -> Option<&[f64]> {
        speaker.map(|s| self.params.value(PERSONA).expect("schema checked").row(s))
    }

    /// Encodes a question into the final per-layer state. The encoder never
    /// sees the persona.
    pub fn encode(&self, question: &[VocabId]) -> Result<LstmState> {
        if question.is_empty() {
            return Err(Error::Input("cannot encode an empty sequence".into()));
        }
        let mut state = LstmState::zeros(self.config.num_layers, self.config.hidden_size);
        for &t in question {
            self.check_token(t)?;
            self.step(false, &mut state, t, None, None)?;
        }
        Ok(state)
    }

    /// One evaluation-mode decoder step: feeds `token`, returns the next
    /// state and log-probabilities over the vocabulary.
    pub fn decode_step(&self, state: &LstmState, token: VocabId, speaker: SpeakerId) -> Result<(LstmState, Vec<f64>)> {
        self.check_token(token)?;
        let sp = self.check_speaker(speaker)?;
        let mut next = state.clone();
        self.step(true, &mut next, token, self.persona_for(sp), None)?;
        let logits = self.logits(next.top_h())?;
        Ok((next, log_softmax(&logits)))
    }

    fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        let w = self.params.value(PROJ_W)?;
        let mut out = self.params.value(PROJ_B)?.data().to_vec();
        w.matvec_acc(h, &mut out);
        Ok(out)
    }

    /// Teacher-forced negative log-likelihood (natural log) of the response,
    /// EOS included. In train mode dropout masks are drawn from
    /// `dropout_seed`.
    pub fn forward_loss(&self, pair: &DialoguePair, train_mode: bool, dropout_seed: u64) -> Result<(f64, ForwardCache)> {
        if pair.question.is_empty() || pair.response.is_empty() {
            return Err(Error::Input("empty question or response".into()));
        }
        for &t in pair.question.iter().chain(&pair.response) {
            self.check_token(t)?;
        }
        let speaker = self.check_speaker(pair.speaker)?;
        let mut rng = seeded(dropout_seed);
        let use_dropout = train_mode && self.config.dropout > 0.0;

        let mut state = LstmState::zeros(self.config.num_layers, self.config.hidden_size);
        let mut enc = Vec::with_capacity(pair.question.len());
        for &t in &pair.question {
            enc.push(self.step(false, &mut state, t, None, use_dropout.then_some(&mut rng))?);
        }

        let mut dec_inputs = Vec::with_capacity(pair.response.len());
        dec_inputs.push(VocabId::BOS);
        dec_inputs.extend_from_slice(&pair.response[..pair.response.len() - 1]);

        let persona = self.persona_for(speaker);
        let mut dec = Vec::with_capacity(dec_inputs.len());
        let mut top_h = Vec::with_capacity(dec_inputs.len());
        let mut top_masks = Vec::with_capacity(dec_inputs.len());
        let mut probs = Vec::with_capacity(dec_inputs.len());
        let mut nll = 0.0;
        for (&input, &target) in dec_inputs.iter().zip(&pair.response) {
            dec.push(self.step(true, &mut state, input, persona, use_dropout.then_some(&mut rng))?);
            let mut h = state.top_h().to_vec();
            let mask = if use_dropout {
                let m = dropout_mask_with(h.len(), self.config.dropout, &mut rng)?;
                h.iter_mut().zip(&m).for_each(|(hi, mi)| *hi *= mi);
                Some(m)
            } else {
                None
            };
            let lp = log_softmax(&self.logits(&h)?);
            nll -= lp[target.index()];
            probs.push(lp.into_iter().map(f64::exp).collect());
            top_h.push(h);
            top_masks.push(mask);
        }

        let cache = ForwardCache {
            generation: self.generation,
            question: pair.question.clone(),
            dec_inputs,
            targets: pair.response.clone(),
            speaker,
            enc,
            dec,
            top_h,
            top_masks,
            probs,
            nll,
        };
        Ok((nll, cache))
    }

    /// Back-propagates the cached NLL through time, accumulating into the
    /// parameter gradients. Only the persona row of the cached speaker
    /// receives gradient.
    pub fn backward(&mut self, cache: &ForwardCache) -> Result<()> {
        if cache.generation != self.generation {
            return Err(Error::Internal(
                "forward cache is stale: parameters changed since forward_loss".into(),
            ));
        }
        if cache.enc.len() != cache.question.len() || cache.dec.len() != cache.targets.len() {
            return Err(Error::Internal("forward cache is inconsistent".into()));
        }
        // Move the grad buffers out so values can be borrowed while grads are written.
        let mut g: GradBuffers = self
            .params
            .iter_mut()
            .map(|t| (t.name.clone(), std::mem::replace(&mut t.grad, Matrix::zeros(0, 0))))
            .collect();
        let result = self.accumulate_grads(cache, &mut g);
        for t in self.params.iter_mut() {
            t.grad = g.remove(&t.name).expect("every tensor has a grad buffer");
        }
        result
    }

    fn accumulate_grads(&self, cache: &ForwardCache, g: &mut GradBuffers) -> Result<()> {
        let cfg = &self.config;
        let (layers, hs) = (cfg.num_layers, cfg.hidden_size);
        let view = ModelView { cfg, params: &self.params };

        let proj_w = self.params.value(PROJ_W)?;
        let mut dh = vec![vec![0.0; hs]; layers];
        let mut dc = vec![vec![0.0; hs]; layers];
        let persona = self.persona_for(cache.speaker);
        let mut dv = vec![0.0; cfg.persona_dim];

        for t in (0..cache.dec.len()).rev() {
            let mut dlogits = cache.probs[t].clone();
            dlogits[cache.targets[t].index()] -= 1.0;
            buf(g, PROJ_W).add_outer(&dlogits, &cache.top_h[t]);
            for (gb, d) in buf(g, PROJ_B).data_mut().iter_mut().zip(&dlogits) {
                *gb += d;
            }
            let mut dtop = vec![0.0; hs];
            proj_w.tmatvec_acc(&dlogits, &mut dtop);
            if let Some(m) = &cache.top_masks[t] {
                dtop.iter_mut().zip(m).for_each(|(d, mi)| *d *= mi);
            }
            for (a, b) in dh[layers - 1].iter_mut().zip(&dtop) {
                *a += b;
            }
            view.backward_step(true, &cache.dec[t], cache.dec_inputs[t], &mut dh, &mut dc, g, persona, Some(&mut dv));
        }
        for t in (0..cache.enc.len()).rev() {
            view.backward_step(false, &cache.enc[t], cache.question[t], &mut dh, &mut dc, g, None, None);
        }
        if let Some(s) = cache.speaker {
            for (a, b) in buf(g, PERSONA).row_mut(s).iter_mut().zip(&dv) {
                *a += b;
            }
        }
        Ok(())
    }
}

type GradBuffers = std::collections::BTreeMap<String, Matrix>;

fn buf<'a>(g: &'a mut GradBuffers, name: &str) -> &'a mut Matrix {
    g.get_mut(name).expect("grad buffer")
}

struct ModelView<'a> {
    cfg: &'a ModelConfig,
    params: &'a ParamSet,
}

impl ModelView<'_> {
    #[allow(clippy::too_many_arguments)]
    fn backward_step(
        &self,
        decoder: bool,
        step: &StepCache,
        input: VocabId,
        dh: &mut [Vec<f64>],
        dc: &mut [Vec<f64>],
        g: &mut GradBuffers,
        persona: Option<&[f64]>,
        mut dv: Option<&mut Vec<f64>>,
    ) {
        let layers = self.cfg.num_layers;
        for l in (0..layers).rev() {
            let (wn, bn) = if decoder { (dec_w(l), dec_b(l)) } else { (enc_w(l), enc_b(l)) };
            let with_persona = decoder && l == 0 && self.cfg.persona_enabled;
            let cell = CellWeights {
                w: self.params.value(&wn).expect("schema"),
                b: self.params.value(&bn).expect("schema"),
                wv: with_persona.then(|| self.params.value(DEC_PERSONA_W).expect("schema")),
            };
            let mut gw = g.remove(&wn).expect("grad buffer");
            let mut gb = g.remove(&bn).expect("grad buffer");
            let mut gwv = with_persona.then(|| g.remove(DEC_PERSONA_W).expect("grad buffer"));
            let mut grads = CellGrads {
                w: &mut gw,
                b: &mut gb,
                wv: gwv.as_mut(),
            };
            let v = if with_persona { persona } else { None };
            let dvl = if with_persona { dv.as_deref_mut().map(Vec::as_mut_slice) } else { None };
            let (dh_prev, dc_prev, mut dx) = cell.backward(&step.cells[l], &dh[l], &dc[l], &mut grads, v, dvl);
            g.insert(wn, gw);
            g.insert(bn, gb);
            if let Some(m) = gwv {
                g.insert(DEC_PERSONA_W.to_string(), m);
            }
            dh[l] = dh_prev;
            dc[l] = dc_prev;
            if let Some(m) = &step.masks[l] {
                dx.iter_mut().zip(m).for_each(|(d, mi)| *d *= mi);
            }
            if l > 0 {
                for (a, b) in dh[l - 1].iter_mut().zip(&dx) {
                    *a += b;
                }
            } else {
                for (a, b) in buf(g, EMBED).row_mut(input.index()).iter_mut().zip(&dx) {
                    *a += b;
                }
            }
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}
