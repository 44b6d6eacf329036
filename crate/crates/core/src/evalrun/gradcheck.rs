//! Randomized finite-difference check of the adapter gradients through the
//! full frozen dual encoder.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{MMAStack, Matrix};
use crate::backbone::{AdapterHook, BackboneBundle, BackboneConfig, Modality, PromptTemplate};
use crate::error::{Error, Result};
use crate::rng::{mix64, tag, CtrRng};
use crate::tensorcore::{relative_error, Tape, Tensor, Var};
use crate::trainer::{compute_loss_cached, FewShotSet, PrefixCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub h: f64,
    pub d: usize,
    pub layers: usize,
    pub first_block: usize,
    pub r: usize,
    pub classes: usize,
    /// Images per loss evaluation.
    pub batch: usize,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { trials: 100, seed: 0, h: 1e-6, d: 32, layers: 4, first_block: 3, r: 8, classes: 5, batch: 3, tolerance: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub max_rel_error: f64,
    pub entries: usize,
    /// Block, matrix name and flat entry of the worst error.
    pub worst: (usize, String, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Entries whose relative error exceeds `tolerance`.
    pub over_tolerance: usize,
    /// Largest absolute difference over all entries.
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub trials: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_trial: usize,
    pub seconds: f64,
}

/// Random backbone, random non-inert adapters, random images and labels.
/// Trial `i` draws from stream `(seed, [GRADCHECK, i])`.
pub fn gradcheck_trial(cfg: &GradcheckConfig, trial: usize) -> Result<TrialReport> {
    let mut rng = CtrRng::for_stream(cfg.seed, &[tag::GRADCHECK, trial as u64]);
    let bcfg = BackboneConfig { d: cfg.d, layers: cfg.layers, ..Default::default() };
    let mut backbone = BackboneBundle::build(&bcfg, mix64(rng.next_u64()))?;
    backbone.freeze();
    let alpha = 0.5 + rng.uniform();
    let mut stack = MMAStack::init(cfg.d, cfg.r, cfg.first_block, cfg.layers, alpha, rng.next_u64())?;
    let up_std = 1.0 / (cfg.r as f64).sqrt();
    for b in &mut stack.blocks {
        for m in [Matrix::UpImg, Matrix::UpTxt] {
            b.matrix_mut(m).values_mut().iter_mut().for_each(|v| *v = up_std * rng.normal());
        }
    }
    let template = PromptTemplate::photo_of();
    let images = (0..cfg.batch)
        .map(|_| Tensor::matrix(bcfg.patches, bcfg.patch_dim, (0..bcfg.patches * bcfg.patch_dim).map(|_| rng.normal()).collect()))
        .collect::<Result<Vec<_>>>()?;
    let targets = (0..cfg.batch).map(|_| rng.below(cfg.classes)).collect();
    let classes: Vec<usize> = (0..cfg.classes).collect();
    let tokens = classes.iter().map(|&k| template.tokens_for(k)).collect();
    let data = FewShotSet::new(images, targets, classes, tokens, 1)?;
    let cache = PrefixCache::build(&backbone, &data, cfg.first_block)?;
    let batch: Vec<usize> = (0..data.len()).collect();

    let slots: Vec<(usize, Matrix)> = (0..stack.blocks.len()).flat_map(|b| Matrix::ALL.map(|m| (b, m))).collect();
    let full = compute_loss_cached(&backbone, &stack, &data, &cache, &batch)?;
    let grads = full.gradients()?;
    let probe = Probe::build(&backbone, &stack, &data)?;
    for pos in 0..stack.blocks.len() {
        if probe.loss(&stack, pos, Matrix::Shared)?.to_bits() != full.value().to_bits() {
            return Err(Error::Numeric("cached probe disagrees with the full loss".into()));
        }
    }
    let analytic: Vec<Tensor> = slots
        .iter()
        .map(|&(b, m)| {
            grads
                .get(&MMAStack::param_id(b, m))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(stack.blocks[b].matrix(m).rows(), stack.blocks[b].matrix(m).cols()))
        })
        .collect();
    let mut work = stack.clone();
    let mut numeric = Vec::with_capacity(slots.len());
    for &(b, m) in &slots {
        let n = work.blocks[b].matrix(m).len();
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = work.blocks[b].matrix(m).values()[i];
            work.blocks[b].matrix_mut(m).values_mut()[i] = orig + cfg.h;
            let plus = probe.loss(&work, b, m)?;
            work.blocks[b].matrix_mut(m).values_mut()[i] = orig - cfg.h;
            let minus = probe.loss(&work, b, m)?;
            work.blocks[b].matrix_mut(m).values_mut()[i] = orig;
            g.push((plus - minus) / (2.0 * cfg.h));
        }
        numeric.push(Tensor::new(stack.blocks[b].matrix(m).shape().to_vec(), g)?);
    }

    let mut report = TrialReport {
        trial,
        max_rel_error: 0.0,
        entries: 0,
        worst: (0, String::new(), 0),
        analytic: 0.0,
        numeric: 0.0,
        over_tolerance: 0,
        max_abs_error: 0.0,
    };
    for (s, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&av, &nv)) in a.values().iter().zip(n.values()).enumerate() {
            let e = relative_error(av, nv);
            report.over_tolerance += (e >= cfg.tolerance) as usize;
            report.max_abs_error = report.max_abs_error.max((av - nv).abs());
            if report.entries == 0 || e > report.max_rel_error {
                let (b, m) = slots[s];
                report.max_rel_error = e;
                report.worst = (stack.blocks[b].block_index, format!("{m:?}"), i);
                report.analytic = av;
                report.numeric = nv;
            }
            report.entries += 1;
        }
    }
    Ok(report)
}

pub fn gradcheck_suite(cfg: &GradcheckConfig) -> Result<(GradcheckSummary, Vec<TrialReport>)> {
    let start = Instant::now();
    let reports = (0..cfg.trials).map(|t| gradcheck_trial(cfg, t)).collect::<Result<Vec<_>>>()?;
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
    let summary = GradcheckSummary {
        trials: reports.len(),
        entries: reports.iter().map(|r| r.entries).sum(),
        max_rel_error: worst.map_or(0.0, |w| w.max_rel_error),
        worst_trial: worst.map_or(0, |w| w.trial),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((summary, reports))
}

/// Per-sequence states of the unperturbed model, so that a perturbation of
/// one adapter matrix only recomputes what it can influence: its own
/// modality path, from its block onwards, starting after the block's
/// frozen attention and MLP.
struct SeqCache {
    /// Per adapter block: MLP sub-layer input and frozen block output.
    h: Vec<Tensor>,
    base: Vec<Tensor>,
    feature: Tensor,
    row: usize,
}

struct Probe<'b> {
    backbone: &'b BackboneBundle,
    first: usize,
    images: Vec<SeqCache>,
    texts: Vec<SeqCache>,
    targets: Vec<usize>,
}

impl<'b> Probe<'b> {
    fn build(backbone: &'b BackboneBundle, stack: &MMAStack, data: &FewShotSet) -> Result<Self> {
        let first = stack.first_block();
        let seq = |modality: Modality, start: Tensor, row: usize| -> Result<SeqCache> {
            let mut tape = Tape::new();
            let nodes = backbone.attach(&mut tape, false);
            let vars = stack.attach(&mut tape, false);
            let mut x = tape.constant(start);
            let (mut h, mut base) = (Vec::new(), Vec::new());
            for j in first..=stack.last_block() {
                let (hv, bv) = nodes.block_parts(&mut tape, modality, x, j)?;
                h.push(tape.value(hv).clone());
                base.push(tape.value(bv).clone());
                x = match vars.contribution(&mut tape, modality, j, hv)? {
                    Some(c) => tape.add(bv, c)?,
                    None => bv,
                };
            }
            let x =
                nodes.run_blocks(&mut tape, modality, x, stack.last_block() + 1, backbone.config().layers + 1, Some(&vars))?;
            let f = nodes.readout(&mut tape, modality, x, row)?;
            Ok(SeqCache { h, base, feature: tape.value(f).clone(), row })
        };
        let images = data
            .images
            .iter()
            .map(|im| seq(Modality::Vision, backbone.image_hidden(im, first)?.states, 0))
            .collect::<Result<_>>()?;
        let texts = data
            .class_tokens
            .iter()
            .map(|t| seq(Modality::Text, backbone.text_hidden(t, first)?.states, t.len() - 1))
            .collect::<Result<_>>()?;
        Ok(Self { backbone, first, images, texts, targets: data.targets.clone() })
    }

    /// Loss with `stack` differing from the cached model only in matrix `m`
    /// of stack position `pos`.
    fn loss(&self, stack: &MMAStack, pos: usize, m: Matrix) -> Result<f64> {
        let mut tape = Tape::new();
        let nodes = self.backbone.attach(&mut tape, false);
        let vars = stack.attach(&mut tape, false);
        let j = self.first + pos;
        let end = self.backbone.config().layers + 1;
        let vision = !matches!(m, Matrix::DownTxt | Matrix::UpTxt);
        let text = !matches!(m, Matrix::DownImg | Matrix::UpImg);
        let feats = |tape: &mut Tape<'_>, seqs: &'_ [SeqCache], modality: Modality, touched: bool| -> Result<Var> {
            let rows = seqs
                .iter()
                .map(|s| {
                    if !touched {
                        return Ok(tape.constant(s.feature.clone()));
                    }
                    let h = tape.constant(s.h[pos].clone());
                    let b = tape.constant(s.base[pos].clone());
                    let x = match vars.contribution(tape, modality, j, h)? {
                        Some(c) => tape.add(b, c)?,
                        None => b,
                    };
                    let x = nodes.run_blocks(tape, modality, x, j + 1, end, Some(&vars))?;
                    nodes.readout(tape, modality, x, s.row)
                })
                .collect::<Result<Vec<_>>>()?;
            tape.concat_rows(&rows)
        };
        let img = feats(&mut tape, &self.images, Modality::Vision, vision)?;
        let txt = feats(&mut tape, &self.texts, Modality::Text, text)?;
        let logits = nodes.logits(&mut tape, img, txt)?;
        let loss = tape.cross_entropy_rows(logits, &self.targets)?;
        Ok(tape.scalar(loss))
    }
}
