use fedmma_core::adapter::{MMAStack, Matrix};
use fedmma_core::backbone::{BackboneBundle, BackboneConfig, ImageInput, PromptTemplate, TextInput};
use fedmma_core::rng::CtrRng;
use fedmma_core::tensorcore::{relative_error, Tape, Tensor};
use fedmma_core::trainer::{compute_loss, compute_loss_cached, local_train, FewShotSet, PrefixCache, TrainConfig};
use fedmma_core::Error;

fn randn(rng: &mut CtrRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal() * scale).collect()).unwrap()
}

fn frozen(seed: u64) -> BackboneBundle {
    let mut b = BackboneBundle::build(&BackboneConfig::default(), seed).unwrap();
    b.freeze();
    b
}

/// `per_class` noisy copies of one random prototype per class.
fn toy_set(classes: usize, per_class: usize, noise: f64, seed: u64) -> FewShotSet {
    let mut rng = CtrRng::new(seed, 1);
    let protos: Vec<Tensor> = (0..classes).map(|_| randn(&mut rng, 4, 16, 2.0)).collect();
    let mut images = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..per_class {
        for (c, p) in protos.iter().enumerate() {
            images.push(p.add(&randn(&mut rng, 4, 16, noise)).unwrap());
            targets.push(c);
        }
    }
    let t = PromptTemplate::photo_of();
    let ids: Vec<usize> = (0..classes).map(|c| 2 * c + 1).collect();
    let tokens = ids.iter().map(|&c| t.tokens_for(c)).collect();
    FewShotSet::new(images, targets, ids, tokens, per_class).unwrap()
}

fn cfg(eta: f64, epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig { eta, epochs, batch_train: batch, batch_eval: 100, seed: 7 }
}

#[test]
fn empty_batch_is_a_contract_error() {
    let b = frozen(0);
    let s = MMAStack::init(32, 8, 3, 4, 0.001, 0).unwrap();
    let data = toy_set(2, 2, 0.1, 0);
    assert!(matches!(compute_loss(&b, &s, &data, &[]), Err(Error::Contract(_))));
    assert!(matches!(compute_loss(&b, &s, &data, &[9]), Err(Error::Index { .. })));
}

#[test]
fn fresh_stack_loss_equals_zero_shot_loss() {
    let b = frozen(1);
    let s = MMAStack::init(32, 8, 3, 4, 0.5, 1).unwrap();
    let data = toy_set(3, 2, 0.3, 1);
    let batch = [0, 2, 3, 5];
    let with = compute_loss(&b, &s, &data, &batch).unwrap().value();
    let mut tape = Tape::new();
    let nodes = b.attach(&mut tape, false);
    let txt: Vec<_> =
        data.class_tokens.iter().map(|t| nodes.encode_text(&mut tape, TextInput::Tokens(t), None).unwrap()).collect();
    let img: Vec<_> =
        batch.iter().map(|&i| nodes.encode_image(&mut tape, ImageInput::Raw(&data.images[i]), None).unwrap()).collect();
    let txt = tape.concat_rows(&txt).unwrap();
    let img = tape.concat_rows(&img).unwrap();
    let logits = nodes.logits(&mut tape, img, txt).unwrap();
    let targets: Vec<usize> = batch.iter().map(|&i| data.targets[i]).collect();
    let loss = tape.cross_entropy_rows(logits, &targets).unwrap();
    assert_eq!(with.to_bits(), tape.scalar(loss).to_bits());
}

#[test]
fn two_sample_loss_matches_scalar_oracle() {
    let b = frozen(2);
    let mut s = MMAStack::init(32, 8, 3, 4, 0.9, 2).unwrap();
    let mut rng = CtrRng::new(2, 9);
    for blk in &mut s.blocks {
        *blk.matrix_mut(Matrix::UpImg) = randn(&mut rng, 32, 8, 0.2);
        *blk.matrix_mut(Matrix::UpTxt) = randn(&mut rng, 32, 8, 0.2);
    }
    let data = toy_set(3, 1, 0.5, 2);
    let texts: Vec<Tensor> = data.class_tokens.iter().map(|t| b.encode_text(t, Some(&s)).unwrap()).collect();
    let gamma = b.config().gamma;
    let mut expected = 0.0;
    for i in [0, 2] {
        let z = b.encode_image(&data.images[i], Some(&s)).unwrap();
        let logits: Vec<f64> =
            texts.iter().map(|t| z.values().iter().zip(t.values()).map(|(a, b)| a * b).sum::<f64>() / gamma).collect();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        expected -= (logits[data.targets[i]].exp() / denom).ln() / 2.0;
    }
    let got = compute_loss(&b, &s, &data, &[0, 2]).unwrap().value();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn certain_prediction_has_zero_loss() {
    let b = frozen(3);
    let s = MMAStack::init(32, 8, 3, 4, 0.001, 3).unwrap();
    let data = toy_set(1, 3, 0.5, 3);
    assert_eq!(compute_loss(&b, &s, &data, &[0, 1, 2]).unwrap().value(), 0.0);
}

#[test]
fn cached_prefix_is_bit_identical() {
    let b = frozen(4);
    let mut s = MMAStack::init(32, 8, 2, 4, 0.7, 4).unwrap();
    let mut rng = CtrRng::new(4, 9);
    for blk in &mut s.blocks {
        *blk.matrix_mut(Matrix::UpImg) = randn(&mut rng, 32, 8, 0.2);
    }
    let data = toy_set(3, 2, 0.5, 4);
    let cache = PrefixCache::build(&b, &data, 2).unwrap();
    let plain = compute_loss(&b, &s, &data, &[1, 4, 5]).unwrap();
    let cached = compute_loss_cached(&b, &s, &data, &cache, &[1, 4, 5]).unwrap();
    assert_eq!(plain.value().to_bits(), cached.value().to_bits());
    let (gp, gc) = (plain.gradients().unwrap(), cached.gradients().unwrap());
    assert_eq!(gp.len(), gc.len());
    for (k, v) in &gp {
        assert!(v.bit_eq(&gc[k]));
    }
}

#[test]
fn zero_epochs_is_identity_and_unfrozen_is_rejected() {
    let b = frozen(5);
    let s = MMAStack::init(32, 8, 3, 4, 0.001, 5).unwrap();
    let data = toy_set(2, 2, 0.5, 5);
    let (out, trace) = local_train(&b, &s, &data, &cfg(0.1, 0, 32), 0).unwrap();
    assert_eq!(out, s);
    assert!(trace.is_empty());
    let loose = BackboneBundle::build(&BackboneConfig::default(), 5).unwrap();
    assert!(matches!(local_train(&loose, &s, &data, &cfg(0.1, 1, 32), 0), Err(Error::State(_))));
}

#[test]
fn one_full_batch_epoch_is_one_sgd_step() {
    let b = frozen(6);
    let mut s = MMAStack::init(32, 8, 3, 4, 1.0, 6).unwrap();
    let mut rng = CtrRng::new(6, 9);
    for blk in &mut s.blocks {
        *blk.matrix_mut(Matrix::UpImg) = randn(&mut rng, 32, 8, 0.2);
        *blk.matrix_mut(Matrix::UpTxt) = randn(&mut rng, 32, 8, 0.2);
    }
    let data = toy_set(3, 3, 0.5, 6);
    let (trained, trace) = local_train(&b, &s, &data, &cfg(0.05, 1, 64), 0).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let g = compute_loss(&b, &s, &data, &all).unwrap();
    let mut manual = s.clone();
    manual.sgd_step(&g.gradients().unwrap(), 0.05).unwrap();
    assert_eq!(trace.len(), 1);
    assert!(relative_error(trace[0], g.value()) < 1e-12);
    for (x, y) in trained.blocks.iter().zip(&manual.blocks) {
        for m in Matrix::ALL {
            assert!(x.matrix(m).max_abs_diff(y.matrix(m)) < 1e-12);
        }
    }
    for (x, y) in trained.blocks.iter().zip(&s.blocks) {
        for m in Matrix::ALL {
            assert!(x.matrix(m).max_abs_diff(y.matrix(m)) > 0.0, "{m:?} not updated");
        }
    }
}

#[test]
fn full_batch_trace_never_increases_on_separable_pairs() {
    let b = frozen(7);
    let s = MMAStack::init(32, 8, 3, 4, 1.0, 7).unwrap();
    let data = toy_set(2, 4, 0.2, 7);
    let (_, trace) = local_train(&b, &s, &data, &cfg(0.01, 50, 64), 0).unwrap();
    assert_eq!(trace.len(), 50);
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
    }
    assert!(trace[49] < trace[0]);
}

#[test]
fn training_is_deterministic_and_leaves_backbone_alone() {
    let b = frozen(8);
    let digest = b.digest();
    let s = MMAStack::init(32, 8, 3, 4, 1.0, 8).unwrap();
    let data = toy_set(3, 4, 0.5, 8);
    let c = cfg(0.1, 3, 5);
    let (x, tx) = local_train(&b, &s, &data, &c, 2).unwrap();
    let (y, ty) = local_train(&b, &s, &data, &c, 2).unwrap();
    assert_eq!(x, y);
    assert_eq!(tx, ty);
    let (z, _) = local_train(&b, &s, &data, &c, 3).unwrap();
    assert_ne!(x, z, "a different round reshuffles");
    assert_eq!(b.digest(), digest);
    b.verify_frozen().unwrap();
}

/// One random training step, every adapter entry. Relative error < 1e-5 on
/// entries above 1e-3; smaller entries sit near the round-off floor of the
/// central difference (about 1e-9 absolute) and are held to 1e-8 absolute.
#[test]
fn training_step_gradient_passes_finite_differences() {
    let b = frozen(9);
    let mut s = MMAStack::init(32, 8, 3, 4, 1.0, 9).unwrap();
    let mut rng = CtrRng::new(9, 3);
    for blk in &mut s.blocks {
        *blk.matrix_mut(Matrix::UpImg) = randn(&mut rng, 32, 8, 0.3);
        *blk.matrix_mut(Matrix::UpTxt) = randn(&mut rng, 32, 8, 0.3);
    }
    let data = toy_set(2, 2, 0.5, 9);
    let batch = [rng.below(4), rng.below(4)];
    let cache = PrefixCache::build(&b, &data, 3).unwrap();
    let grads = compute_loss_cached(&b, &s, &data, &cache, &batch).unwrap().gradients().unwrap();
    let h = 1e-6;
    let mut worst: (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut worst_abs: f64 = 0.0;
    let mut work = s.clone();
    for pos in 0..s.blocks.len() {
        for m in Matrix::ALL {
            let analytic = &grads[&MMAStack::param_id(pos, m)];
            for i in 0..analytic.len() {
                let orig = s.blocks[pos].matrix(m).values()[i];
                work.blocks[pos].matrix_mut(m).values_mut()[i] = orig + h;
                let plus = compute_loss_cached(&b, &work, &data, &cache, &batch).unwrap().value();
                work.blocks[pos].matrix_mut(m).values_mut()[i] = orig - h;
                let minus = compute_loss_cached(&b, &work, &data, &cache, &batch).unwrap().value();
                work.blocks[pos].matrix_mut(m).values_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.values()[i];
                if a.abs().max(numeric.abs()) < 1e-3 {
                    worst_abs = worst_abs.max((a - numeric).abs());
                    continue;
                }
                let e = relative_error(a, numeric);
                if e > worst.0 {
                    worst = (e, analytic.values()[i], numeric);
                }
            }
        }
    }
    assert!(worst_abs < 1e-8, "max absolute error on small entries {worst_abs:e}");
    assert!(worst.0 < 1e-5, "max relative error {:e} (analytic {:e}, numeric {:e})", worst.0, worst.1, worst.2);
}
