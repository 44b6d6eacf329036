//! Client-local few-shot optimization: minibatching, the cross-entropy
//! objective over the client's classes, and SGD on every adapter matrix.

use serde::{Deserialize, Serialize};

use crate::adapter::MMAStack;
use crate::backbone::{AdapterHook, BackboneBundle, Hidden, ImageInput, TextInput};
pub use crate::datagen::FewShotSet;
use crate::error::{Error, Result};
use crate::rng::{tag, CtrRng};
use crate::tensorcore::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    /// Local epochs per round.
    pub epochs: usize,
    pub batch_train: usize,
    pub batch_eval: usize,
    /// Shuffling seed; the federation layer derives one per client.
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { eta: 0.001, epochs: 1, batch_train: 32, batch_eval: 100, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.batch_train == 0 || self.batch_eval == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// A scalar loss and the tape it was recorded on.
pub struct LossGraph<'a> {
    pub tape: Tape<'a>,
    pub loss: Var,
}

impl LossGraph<'_> {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.loss)
    }

    pub fn gradients(&self) -> Result<Gradients> {
        self.tape.gradients(self.loss)
    }
}

/// Hidden states of a few-shot set entering the first adapter block. The
/// blocks below it are frozen and adapter-free, so they only run once.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    images: Vec<Hidden>,
    texts: Vec<Hidden>,
    text_len: Vec<usize>,
}

impl PrefixCache {
    pub fn build(backbone: &BackboneBundle, data: &FewShotSet, next_block: usize) -> Result<Self> {
        Ok(Self {
            images: data.images.iter().map(|im| backbone.image_hidden(im, next_block)).collect::<Result<_>>()?,
            texts: data.class_tokens.iter().map(|t| backbone.text_hidden(t, next_block)).collect::<Result<_>>()?,
            text_len: data.class_tokens.iter().map(Vec::len).collect(),
        })
    }
}

fn loss_graph<'a>(
    backbone: &'a BackboneBundle,
    stack: &'a MMAStack,
    images: Vec<ImageInput<'a>>,
    texts: Vec<TextInput<'a>>,
    targets: &[usize],
) -> Result<LossGraph<'a>> {
    let mut tape = Tape::new();
    let nodes = backbone.attach(&mut tape, false);
    let vars = stack.attach(&mut tape, true);
    let hook: Option<&dyn AdapterHook> = Some(&vars);
    let txt = texts.into_iter().map(|t| nodes.encode_text(&mut tape, t, hook)).collect::<Result<Vec<_>>>()?;
    let img = images.into_iter().map(|i| nodes.encode_image(&mut tape, i, hook)).collect::<Result<Vec<_>>>()?;
    let txt = tape.concat_rows(&txt)?;
    let img = tape.concat_rows(&img)?;
    let logits = nodes.logits(&mut tape, img, txt)?;
    let loss = tape.cross_entropy_rows(logits, targets)?;
    Ok(LossGraph { tape, loss })
}

fn check_batch(data: &FewShotSet, batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    if data.class_tokens.is_empty() {
        return Err(Error::Contract("few-shot set has no classes".into()));
    }
    match batch.iter().find(|&&i| i >= data.len()) {
        Some(&i) => Err(Error::Index { what: "batch sample", index: i, len: data.len() }),
        None => Ok(()),
    }
}

/// Mean cross-entropy of `batch` (indices into `data`) over the set's
/// classes, with the stack's adapters registered as trainable leaves.
pub fn compute_loss<'a>(
    backbone: &'a BackboneBundle,
    stack: &'a MMAStack,
    data: &'a FewShotSet,
    batch: &[usize],
) -> Result<LossGraph<'a>> {
    check_batch(data, batch)?;
    let images = batch.iter().map(|&i| ImageInput::Raw(&data.images[i])).collect();
    let texts = data.class_tokens.iter().map(|t| TextInput::Tokens(t)).collect();
    let targets: Vec<usize> = batch.iter().map(|&i| data.targets[i]).collect();
    loss_graph(backbone, stack, images, texts, &targets)
}

/// [`compute_loss`] starting from cached hidden states; bit-identical result.
pub fn compute_loss_cached<'a>(
    backbone: &'a BackboneBundle,
    stack: &'a MMAStack,
    data: &FewShotSet,
    cache: &'a PrefixCache,
    batch: &[usize],
) -> Result<LossGraph<'a>> {
    check_batch(data, batch)?;
    let images = batch.iter().map(|&i| ImageInput::Hidden(&cache.images[i])).collect();
    let texts = cache.texts.iter().zip(&cache.text_len).map(|(hidden, &len)| TextInput::Hidden { hidden, len }).collect();
    let targets: Vec<usize> = batch.iter().map(|&i| data.targets[i]).collect();
    loss_graph(backbone, stack, images, texts, &targets)
}

/// `cfg.epochs` passes of minibatch SGD over all five matrices of every
/// block. Epoch `e` of round `round` shuffles with stream
/// `(cfg.seed, [SHUFFLE, round, e])`; the last partial batch is kept.
/// Returns the updated stack and the sample-weighted mean loss of each
/// epoch (measured before each step).
pub fn local_train(
    backbone: &BackboneBundle,
    stack: &MMAStack,
    data: &FewShotSet,
    cfg: &TrainConfig,
    round: u64,
) -> Result<(MMAStack, Vec<f64>)> {
    if !backbone.is_frozen() {
        return Err(Error::State("local training requires a frozen backbone".into()));
    }
    cfg.validate()?;
    let mut stack = stack.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok((stack, trace));
    }
    if data.is_empty() {
        return Err(Error::Contract("local training on an empty few-shot set".into()));
    }
    let cache = PrefixCache::build(backbone, data, stack.first_block())?;
    let n = data.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        CtrRng::for_stream(cfg.seed, &[tag::SHUFFLE, round, epoch as u64]).shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_train) {
            let (loss, grads) = {
                let g = compute_loss_cached(backbone, &stack, data, &cache, batch)?;
                (g.value(), g.gradients()?)
            };
            stack.sgd_step(&grads, cfg.eta)?;
            total += loss * batch.len() as f64;
        }
        trace.push(total / n as f64);
    }
    Ok((stack, trace))
}
