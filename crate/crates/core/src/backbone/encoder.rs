//! Forward passes of both encoders on a [`Tape`], adapter injection hooks,
//! and zero-shot classification.

use super::bundle::BackboneBundle;
use super::params::{BlockParams, EncoderParams, Params};
use crate::adapter::MMAStack;
use crate::error::{Error, Result};
use crate::tensorcore::{ops, ParamId, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Text,
}

/// Per-block adapter injection point.
///
/// For block `j` (1-based) the hook sees the input of the MLP sub-layer and
/// may return an additive contribution; the block output becomes
/// `h + MLP(LN(h)) + contribution(h)`.
pub trait AdapterHook {
    /// First block that may receive a contribution.
    fn first_block(&self) -> usize;
    fn contribution(&self, tape: &mut Tape<'_>, modality: Modality, block: usize, hidden: Var) -> Result<Option<Var>>;
}

/// Hidden states entering block `next_block` (1-based), computed without adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hidden {
    pub next_block: usize,
    pub states: Tensor,
}

/// Image input to an encoder pass: raw patches or a cached prefix.
#[derive(Debug, Clone, Copy)]
pub enum ImageInput<'i> {
    Raw(&'i Tensor),
    Hidden(&'i Hidden),
}

#[derive(Debug, Clone, Copy)]
pub enum TextInput<'i> {
    Tokens(&'i [usize]),
    Hidden { hidden: &'i Hidden, len: usize },
}

/// The bundle's parameters registered on a tape.
pub struct BackboneNodes {
    pub vars: Params<Var>,
    heads: usize,
    patches: usize,
    patch_dim: usize,
    vocab: usize,
    max_tokens: usize,
    layers: usize,
    gamma: f64,
}

impl BackboneBundle {
    /// Registers every parameter on `tape` (as `ParamId(i)` in canonical
    /// order when `trainable`, otherwise as borrowed constants).
    pub fn attach<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> BackboneNodes {
        let cfg = self.config();
        let vars = self.params.map(cfg.layers, |i, t| tape.leaf_ref(ParamId(i as u32), t, trainable));
        BackboneNodes {
            vars,
            heads: cfg.heads,
            patches: cfg.patches,
            patch_dim: cfg.patch_dim,
            vocab: cfg.vocab,
            max_tokens: cfg.max_tokens,
            layers: cfg.layers,
            gamma: cfg.gamma,
        }
    }

    /// Unit-norm image feature.
    pub fn encode_image(&self, image: &Tensor, adapters: Option<&MMAStack>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let nodes = self.attach(&mut tape, false);
        let hook = adapters.map(|s| s.attach(&mut tape, false));
        let out = nodes.encode_image(&mut tape, ImageInput::Raw(image), hook.as_ref().map(|h| h as &dyn AdapterHook))?;
        Ok(tape.value(out).clone())
    }

    /// Unit-norm text feature.
    pub fn encode_text(&self, tokens: &[usize], adapters: Option<&MMAStack>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let nodes = self.attach(&mut tape, false);
        let hook = adapters.map(|s| s.attach(&mut tape, false));
        let out = nodes.encode_text(&mut tape, TextInput::Tokens(tokens), hook.as_ref().map(|h| h as &dyn AdapterHook))?;
        Ok(tape.value(out).clone())
    }

    /// Class probabilities `softmax(cos(z_img, z_k) / gamma)` over the given prompts.
    pub fn classify(&self, image: &Tensor, class_tokens: &[Vec<usize>], adapters: Option<&MMAStack>) -> Result<Vec<f64>> {
        if class_tokens.is_empty() {
            return Err(Error::Contract("classify needs at least one class".into()));
        }
        let mut tape = Tape::new();
        let nodes = self.attach(&mut tape, false);
        let hook = adapters.map(|s| s.attach(&mut tape, false));
        let hook = hook.as_ref().map(|h| h as &dyn AdapterHook);
        let img = nodes.encode_image(&mut tape, ImageInput::Raw(image), hook)?;
        let texts =
            class_tokens.iter().map(|t| nodes.encode_text(&mut tape, TextInput::Tokens(t), hook)).collect::<Result<Vec<_>>>()?;
        let txt = tape.concat_rows(&texts)?;
        let logits = nodes.logits(&mut tape, img, txt)?;
        Ok(ops::softmax(tape.value(logits).values()))
    }

    /// Runs blocks `1..next_block` of the vision encoder without adapters.
    pub fn image_hidden(&self, image: &Tensor, next_block: usize) -> Result<Hidden> {
        let mut tape = Tape::new();
        let nodes = self.attach(&mut tape, false);
        let x = nodes.image_tokens(&mut tape, image)?;
        let x = nodes.run_blocks(&mut tape, Modality::Vision, x, 1, next_block, None)?;
        Ok(Hidden { next_block, states: tape.value(x).clone() })
    }

    pub fn text_hidden(&self, tokens: &[usize], next_block: usize) -> Result<Hidden> {
        let mut tape = Tape::new();
        let nodes = self.attach(&mut tape, false);
        let x = nodes.text_tokens(&mut tape, tokens)?;
        let x = nodes.run_blocks(&mut tape, Modality::Text, x, 1, next_block, None)?;
        Ok(Hidden { next_block, states: tape.value(x).clone() })
    }
}

/// `softmax(cos(image, text_k) / gamma)` on precomputed features.
pub fn zero_shot_probabilities(image: &Tensor, texts: &[Tensor], gamma: f64) -> Result<Vec<f64>> {
    if texts.is_empty() {
        return Err(Error::Contract("classify needs at least one class".into()));
    }
    let logits = texts.iter().map(|t| Ok(ops::cosine(image, t)? / gamma)).collect::<Result<Vec<_>>>()?;
    Ok(ops::softmax(&logits))
}

impl BackboneNodes {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    fn encoder(&self, m: Modality) -> &EncoderParams<Var> {
        match m {
            Modality::Vision => &self.vars.vision,
            Modality::Text => &self.vars.text,
        }
    }

    /// Patch embedding, class token, positional encoding.
    pub fn image_tokens<'a>(&self, tape: &mut Tape<'a>, image: &'a Tensor) -> Result<Var> {
        if image.dims() != (self.patches, self.patch_dim) {
            return Err(Error::shape("encode_image", image.shape(), &[self.patches, self.patch_dim]));
        }
        let img = tape.constant_ref(image);
        let patches = tape.matmul(img, self.vars.patch_w)?;
        let patches = tape.add_row(patches, self.vars.patch_b)?;
        let x = tape.concat_rows(&[self.vars.cls, patches])?;
        tape.add(x, self.vars.pos_img)
    }

    /// Token embedding plus positional encoding.
    pub fn text_tokens(&self, tape: &mut Tape<'_>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() || tokens.len() > self.max_tokens {
            return Err(Error::Contract(format!("token sequence length {} must be in 1..={}", tokens.len(), self.max_tokens)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::Vocabulary { token: bad, vocab: self.vocab });
        }
        let emb = tape.gather_rows(self.vars.tok_emb, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(self.vars.pos_txt, &positions)?;
        tape.add(emb, pos)
    }

    /// Runs blocks `from..to` (1-based, `to` exclusive).
    pub fn run_blocks(
        &self,
        tape: &mut Tape<'_>,
        modality: Modality,
        mut x: Var,
        from: usize,
        to: usize,
        hook: Option<&dyn AdapterHook>,
    ) -> Result<Var> {
        let enc = self.encoder(modality);
        for j in from..to {
            x = self.block(tape, &enc.blocks[j - 1], x, modality, j, hook)?;
        }
        Ok(x)
    }

    fn block(
        &self,
        tape: &mut Tape<'_>,
        p: &BlockParams<Var>,
        x: Var,
        modality: Modality,
        j: usize,
        hook: Option<&dyn AdapterHook>,
    ) -> Result<Var> {
        let (h, out) = self.block_core(tape, p, x)?;
        match hook {
            Some(hook) => match hook.contribution(tape, modality, j, h)? {
                Some(extra) => tape.add(out, extra),
                None => Ok(out),
            },
            None => Ok(out),
        }
    }

    /// Block `j` (1-based) without its adapter: returns the MLP sub-layer
    /// input `h` and `h + MLP(LN(h))`. Adding a hook contribution to the
    /// second value reproduces [`BackboneNodes::run_blocks`] exactly.
    pub fn block_parts(&self, tape: &mut Tape<'_>, modality: Modality, x: Var, j: usize) -> Result<(Var, Var)> {
        let enc = self.encoder(modality);
        let p = enc.blocks.get(j.wrapping_sub(1)).ok_or(Error::Index { what: "block", index: j, len: enc.blocks.len() })?;
        self.block_core(tape, p, x)
    }

    fn block_core(&self, tape: &mut Tape<'_>, p: &BlockParams<Var>, x: Var) -> Result<(Var, Var)> {
        let h1 = tape.layer_norm(x, p.ln1_g, p.ln1_b)?;
        let q = tape.matmul(h1, p.wq)?;
        let q = tape.add_row(q, p.bq)?;
        let k = tape.matmul(h1, p.wk)?;
        let k = tape.add_row(k, p.bk)?;
        let v = tape.matmul(h1, p.wv)?;
        let v = tape.add_row(v, p.bv)?;
        let width = tape.value(q).cols();
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, head * dh, dh)?, tape.slice_cols(k, head * dh, dh)?, tape.slice_cols(v, head * dh, dh)?)
            };
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax_rows(s)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let attn = tape.matmul(o, p.wo)?;
        let attn = tape.add_row(attn, p.bo)?;
        let h = tape.add(x, attn)?;

        let m = tape.layer_norm(h, p.ln2_g, p.ln2_b)?;
        let u = tape.matmul(m, p.w1)?;
        let u = tape.add_row(u, p.b1)?;
        let u = tape.gelu(u)?;
        let mlp = tape.matmul(u, p.w2)?;
        let mlp = tape.add_row(mlp, p.b2)?;
        let out = tape.add(h, mlp)?;
        Ok((h, out))
    }

    /// Final layer norm, row `row`, projection, L2 normalization.
    pub fn readout(&self, tape: &mut Tape<'_>, modality: Modality, x: Var, row: usize) -> Result<Var> {
        let enc = self.encoder(modality);
        let x = tape.layer_norm(x, enc.ln_g, enc.ln_b)?;
        let r = tape.select_row(x, row)?;
        let z = tape.matmul(r, enc.proj)?;
        tape.l2_normalize_rows(z)
    }

    fn check_hook(&self, input_block: usize, hook: Option<&dyn AdapterHook>) -> Result<()> {
        match hook {
            Some(h) if h.first_block() < input_block => {
                Err(Error::Contract(format!("cached hidden states skip block {} which carries an adapter", h.first_block())))
            }
            _ => Ok(()),
        }
    }

    /// `1 x d` unit-norm image feature (class-token readout).
    pub fn encode_image<'a>(&self, tape: &mut Tape<'a>, input: ImageInput<'a>, hook: Option<&dyn AdapterHook>) -> Result<Var> {
        let (x, from) = match input {
            ImageInput::Raw(img) => (self.image_tokens(tape, img)?, 1),
            ImageInput::Hidden(h) => {
                self.check_hook(h.next_block, hook)?;
                (tape.constant_ref(&h.states), h.next_block)
            }
        };
        let x = self.run_blocks(tape, Modality::Vision, x, from, self.layers + 1, hook)?;
        self.readout(tape, Modality::Vision, x, 0)
    }

    /// `1 x d` unit-norm text feature (final-token readout).
    pub fn encode_text<'a>(&self, tape: &mut Tape<'a>, input: TextInput<'a>, hook: Option<&dyn AdapterHook>) -> Result<Var> {
        let (x, from, len) = match input {
            TextInput::Tokens(t) => (self.text_tokens(tape, t)?, 1, t.len()),
            TextInput::Hidden { hidden, len } => {
                self.check_hook(hidden.next_block, hook)?;
                (tape.constant_ref(&hidden.states), hidden.next_block, len)
            }
        };
        let x = self.run_blocks(tape, Modality::Text, x, from, self.layers + 1, hook)?;
        self.readout(tape, Modality::Text, x, len - 1)
    }

    /// `n x K` temperature-scaled cosine logits between unit-norm rows.
    pub fn logits(&self, tape: &mut Tape<'_>, images: Var, texts: Var) -> Result<Var> {
        let cos = tape.matmul_nt(images, texts)?;
        tape.scale(cos, 1.0 / self.gamma)
    }
}
