use rand::seq::SliceRandom;
use rand::RngCore;

use super::seq2seq::Seq2SeqModel;
use super::types::DialoguePair;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{clip_gradients, sgd_step, ParamSet, ParamTag};

/// Proximal penalty `(mu/2)·‖v − anchor‖²` over the anchor's tensors.
#[derive(Clone, Copy, Debug)]
pub struct Proximal<'a> {
    pub mu: f64,
    pub anchor: &'a ParamSet,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions<'a> {
    pub batch_size: usize,
    pub lr: f64,
    pub clip_threshold: f64,
    pub proximal: Option<Proximal<'a>>,
}

impl TrainOptions<'_> {
    pub fn new(batch_size: usize, lr: f64, clip_threshold: f64) -> Self {
        TrainOptions {
            batch_size,
            lr,
            clip_threshold,
            proximal: None,
        }
    }
}

/// Sum of NLL and number of predicted tokens over `pairs`, evaluation mode.
pub fn total_nll(model: &Seq2SeqModel, pairs: &[DialoguePair]) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for p in pairs {
        nll += model.forward_loss(p, false, 0)?.0;
        tokens += p.response.len();
    }
    Ok((nll, tokens))
}

/// One pass over `pairs` in seeded random order. Each mini-batch minimises
/// the mean per-token NLL (plus the proximal term, if any): gradients are
/// accumulated over the batch, normalised by its token count, clipped by
/// global norm and applied with plain SGD. Returns the epoch's mean
/// per-token training NLL.
pub fn train_epoch(model: &mut Seq2SeqModel, pairs: &[DialoguePair], opts: &TrainOptions<'_>, rng: &mut Rng) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("cannot train on an empty set of pairs".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(p) = opts.proximal {
        if p.mu.is_nan() || p.mu < 0.0 {
            return Err(Error::Config(format!("proximal mu must be non-negative, got {}", p.mu)));
        }
        for t in p.anchor.iter() {
            if t.tag != ParamTag::Federated {
                return Err(Error::Schema(format!("proximal anchor holds non-federated tensor {:?}", t.name)));
            }
            let own = model.params().value(&t.name)?;
            own.check_same_shape(&t.value).map_err(|e| Error::Schema(format!("{}: {e}", t.name)))?;
        }
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    model.params_mut().zero_grads();

    let mut epoch_nll = 0.0;
    let mut epoch_tokens = 0usize;
    for batch in order.chunks(opts.batch_size) {
        let mut batch_tokens = 0usize;
        for &i in batch {
            let (nll, cache) = model.forward_loss(&pairs[i], true, rng.next_u64())?;
            model.backward(&cache)?;
            epoch_nll += nll;
            batch_tokens += cache.num_tokens();
        }
        epoch_tokens += batch_tokens;
        let params = model.params_mut();
        params.scale_grads(1.0 / batch_tokens as f64);
        if let Some(p) = opts.proximal.filter(|p| p.mu != 0.0) {
            for a in p.anchor.iter() {
                let t = params.get_mut(&a.name).expect("checked above");
                for ((g, v), w) in t.grad.data_mut().iter_mut().zip(t.value.data()).zip(a.value.data()) {
                    *g += p.mu * (v - w);
                }
            }
        }
        clip_gradients(params, opts.clip_threshold);
        sgd_step(params, opts.lr)?;
    }
    Ok(epoch_nll / epoch_tokens as f64)
}
