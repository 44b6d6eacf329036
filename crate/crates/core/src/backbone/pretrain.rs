use serde::{Deserialize, Serialize};

use super::bundle::BackboneBundle;
use super::encoder::{ImageInput, TextInput};
use crate::error::{Error, Result};
use crate::rng::{tag, CtrRng};
use crate::tensorcore::{ParamId, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 400, lr: 0.05, batch: 25, seed: 0 }
    }
}

/// Symmetric in-batch contrastive loss between `n x d` unit-norm image and text rows.
pub fn contrastive_loss(tape: &mut Tape<'_>, images: Var, texts: Var, gamma: f64) -> Result<Var> {
    let n = tape.value(images).rows();
    let targets: Vec<usize> = (0..n).collect();
    let li = tape.matmul_nt(images, texts)?;
    let li = tape.scale(li, 1.0 / gamma)?;
    let lt = tape.matmul_nt(texts, images)?;
    let lt = tape.scale(lt, 1.0 / gamma)?;
    let a = tape.cross_entropy_rows(li, &targets)?;
    let b = tape.cross_entropy_rows(lt, &targets)?;
    let s = tape.add(a, b)?;
    tape.scale(s, 0.5)
}

/// Picks up to `batch` pairs with pairwise distinct prompts, in shuffled order.
fn draw_batch(pairs: &[(Tensor, Vec<usize>)], batch: usize, rng: &mut CtrRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    let mut chosen: Vec<usize> = Vec::with_capacity(batch);
    for i in order {
        if chosen.len() == batch {
            break;
        }
        if chosen.iter().all(|&c| pairs[c].1 != pairs[i].1) {
            chosen.push(i);
        }
    }
    chosen
}

/// SGD on the symmetric contrastive loss, then freezes the bundle.
///
/// Each step draws a batch whose prompts are pairwise distinct (duplicate
/// prompts would be false negatives); the shuffle for step `s` comes from
/// stream `(seed, [PRETRAIN, s])`.
pub fn pretrain_backbone(
    mut bundle: BackboneBundle,
    pairs: &[(Tensor, Vec<usize>)],
    cfg: &PretrainConfig,
) -> Result<BackboneBundle> {
    if bundle.is_frozen() {
        return Err(Error::State("pretrain_backbone called on a frozen backbone".into()));
    }
    if cfg.steps > 0 && (pairs.len() < 2 || cfg.batch < 2 || !(cfg.lr > 0.0)) {
        return Err(Error::Config("pretraining needs >= 2 pairs, batch >= 2 and lr > 0".into()));
    }
    let gamma = bundle.config().gamma;
    for step in 0..cfg.steps {
        let mut rng = CtrRng::for_stream(cfg.seed, &[tag::PRETRAIN, step as u64]);
        let batch = draw_batch(pairs, cfg.batch, &mut rng);
        if batch.len() < 2 {
            return Err(Error::Config("pretraining pairs cover fewer than two distinct prompts".into()));
        }
        let grads = {
            let mut tape = Tape::new();
            let nodes = bundle.attach(&mut tape, true);
            let mut imgs = Vec::with_capacity(batch.len());
            let mut txts = Vec::with_capacity(batch.len());
            for &i in &batch {
                imgs.push(nodes.encode_image(&mut tape, ImageInput::Raw(&pairs[i].0), None)?);
                txts.push(nodes.encode_text(&mut tape, TextInput::Tokens(&pairs[i].1), None)?);
            }
            let img = tape.concat_rows(&imgs)?;
            let txt = tape.concat_rows(&txts)?;
            let loss = contrastive_loss(&mut tape, img, txt, gamma)?;
            tape.gradients(loss)?
        };
        let params = bundle.params_mut()?;
        for (i, t) in params.refs_mut().into_iter().enumerate() {
            if let Some(g) = grads.get(&ParamId(i as u32)) {
                crate::adapter::sgd_update(t, g, cfg.lr)?;
            }
        }
    }
    bundle.freeze();
    Ok(bundle)
}
