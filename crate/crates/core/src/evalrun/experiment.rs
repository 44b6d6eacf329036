//! End-to-end runs: pretrain and freeze the backbone, generate and split the
//! data, run the federation, evaluate, and write the artifacts.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PartitionSettings};
use super::metrics::{comm_csv, metrics_csv, scores_at, MetricsRow, Scores, Split};
use crate::adapter::MMAStack;
use crate::backbone::{pretrain_backbone, AdapterHook, BackboneBundle, Hidden, ImageInput, PretrainConfig, TextInput};
use crate::datagen::{
    dirichlet_split, few_shot_sample, generate_prototypes, generate_samples, make_domains, pathological_split, ClassSpec,
    FewShotSet, PartitionPlan, Sample, SampleSplit,
};
use crate::error::{Error, Result};
use crate::federation::{final_sync, run_round, ClientState, CommRecord, Direction, ServerState, Strategy};
use crate::rng::stream_id;
use crate::tensorcore::{matmul_nt, ops, Tape, Tensor};
use crate::trainer::TrainConfig;

/// Per-client seed shared by few-shot sampling and shuffling (distinct tags keep the streams apart).
pub fn client_seed(seed: u64, client: usize) -> u64 {
    stream_id(&[seed, client as u64])
}

/// Test images and class prompts with the frozen blocks below the first
/// adapter already applied.
pub struct EvalCache {
    images: Vec<Hidden>,
    labels: Vec<usize>,
    texts: Vec<Hidden>,
    text_len: Vec<usize>,
}

impl EvalCache {
    pub fn build(backbone: &BackboneBundle, test: &[Sample], classes: &[ClassSpec], next_block: usize) -> Result<Self> {
        Ok(Self {
            images: test.iter().map(|s| backbone.image_hidden(&s.image, next_block)).collect::<Result<_>>()?,
            labels: test.iter().map(|s| s.label).collect(),
            texts: classes.iter().map(|c| backbone.text_hidden(&c.tokens, next_block)).collect::<Result<_>>()?,
            text_len: classes.iter().map(|c| c.tokens.len()).collect(),
        })
    }
}

/// Everything that does not depend on the federation strategy.
pub struct Prepared {
    pub seed: u64,
    pub backbone: BackboneBundle,
    pub classes: Vec<ClassSpec>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub plan: PartitionPlan,
    pub shards: Vec<FewShotSet>,
    pub eval: EvalCache,
}

pub fn build_plan(cfg: &ExperimentConfig, labels: &[usize], seed: u64) -> Result<PartitionPlan> {
    let d = &cfg.data;
    let n = cfg.federation.clients;
    match d.partition {
        PartitionSettings::Pathological { classes_per_client } => {
            pathological_split(labels, d.classes, n, classes_per_client, d.novel_classes)
        }
        PartitionSettings::Dirichlet { beta } => dirichlet_split(labels, d.classes, n, beta, d.novel_classes, seed),
    }
}

/// The partition of `seed`'s training split, without building a backbone.
pub fn partition_plan(cfg: &ExperimentConfig, seed: u64) -> Result<PartitionPlan> {
    cfg.validate()?;
    let d = &cfg.data;
    let b = &cfg.backbone;
    let protos = generate_prototypes(d.classes, b.patches, b.patch_dim, d.radius, d.margin, seed)?;
    let domains = make_domains(d.domains, b.patch_dim, d.domain_bias, d.domain_noise, seed)?;
    let train = generate_samples(&protos, d.train_per_class, d.sigma, &domains, SampleSplit::Train, seed)?;
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let plan = build_plan(cfg, &labels, seed)?;
    plan.validate(&labels)?;
    Ok(plan)
}

/// Generates data, builds and pretrains the backbone on all classes (base
/// and novel), freezes it, partitions the training split and draws each
/// client's few-shot set.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let d = &cfg.data;
    let b = &cfg.backbone;
    let template = cfg.template();
    let protos = generate_prototypes(d.classes, b.patches, b.patch_dim, d.radius, d.margin, seed)?;
    let domains = make_domains(d.domains, b.patch_dim, d.domain_bias, d.domain_noise, seed)?;
    let train = generate_samples(&protos, d.train_per_class, d.sigma, &domains, SampleSplit::Train, seed)?;
    let test = generate_samples(&protos, d.test_per_class, d.sigma, &domains, SampleSplit::Test, seed)?;
    let classes: Vec<ClassSpec> = protos
        .into_iter()
        .enumerate()
        .map(|(index, prototype)| ClassSpec { index, prototype, tokens: template.tokens_for(index) })
        .collect();

    let mut backbone = BackboneBundle::build(b, seed)?;
    if cfg.pretrain.steps > 0 {
        let pre = generate_samples(
            &classes.iter().map(|c| c.prototype.clone()).collect::<Vec<_>>(),
            d.pretrain_per_class,
            d.sigma,
            &domains,
            SampleSplit::Pretrain,
            seed,
        )?;
        let pairs: Vec<(Tensor, Vec<usize>)> = pre.into_iter().map(|s| (s.image, classes[s.label].tokens.clone())).collect();
        let pc = PretrainConfig { steps: cfg.pretrain.steps, lr: cfg.pretrain.lr, batch: cfg.pretrain.batch, seed };
        backbone = pretrain_backbone(backbone, &pairs, &pc)?;
    } else {
        backbone.freeze();
    }

    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let plan = build_plan(cfg, &labels, seed)?;
    plan.validate(&labels)?;
    let shards = (0..cfg.federation.clients)
        .map(|i| few_shot_sample(&train, &plan.shard(i), &classes, d.shots, client_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let eval = EvalCache::build(&backbone, &test, &classes, cfg.adapter.first_block)?;
    Ok(Prepared { seed, backbone, classes, train, test, plan, shards, eval })
}

/// Top-1 accuracy and mean cross-entropy of `stack` on the given test
/// samples, scored over `label_space` (global class ids; labels must be in it).
pub fn evaluate_split(
    backbone: &BackboneBundle,
    stack: Option<&MMAStack>,
    cache: &EvalCache,
    samples: &[usize],
    label_space: &[usize],
    split: Split,
    batch: usize,
) -> Result<(usize, usize, f64)> {
    if samples.is_empty() || label_space.is_empty() {
        return Err(Error::Evaluation { split: split.name().into(), reason: "has no samples or no classes".into() });
    }
    let txt = class_features(backbone, stack, cache, label_space)?;
    let img = image_features(backbone, stack, cache, samples, batch)?;
    score(backbone, &img, &txt, samples.iter().map(|&i| cache.labels[i]), label_space, split)
}

fn score(
    backbone: &BackboneBundle,
    img: &Tensor,
    txt: &Tensor,
    labels: impl Iterator<Item = usize>,
    label_space: &[usize],
    split: Split,
) -> Result<(usize, usize, f64)> {
    let logits = matmul_nt(img, txt)?.scale(1.0 / backbone.config().gamma);
    let mut correct = 0;
    let mut loss = 0.0;
    let mut n = 0;
    for (row, label) in labels.enumerate() {
        let target = label_space.iter().position(|&c| c == label).ok_or_else(|| Error::Evaluation {
            split: split.name().into(),
            reason: format!("label {label} outside its label space"),
        })?;
        let z = logits.row(row);
        let pred = (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best });
        correct += (pred == target) as usize;
        loss += ops::softmax_xent(z, target)?;
        n += 1;
    }
    Ok((n, correct, loss / n as f64))
}

fn hook_of(vars: &Option<crate::adapter::StackVars>) -> Option<&dyn AdapterHook> {
    vars.as_ref().map(|v| v as &dyn AdapterHook)
}

fn class_features(backbone: &BackboneBundle, stack: Option<&MMAStack>, cache: &EvalCache, classes: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = backbone.attach(&mut tape, false);
    let vars = stack.map(|s| s.attach(&mut tape, false));
    let rows = classes
        .iter()
        .map(|&c| {
            let input = TextInput::Hidden { hidden: &cache.texts[c], len: cache.text_len[c] };
            nodes.encode_text(&mut tape, input, hook_of(&vars))
        })
        .collect::<Result<Vec<_>>>()?;
    let all = tape.concat_rows(&rows)?;
    Ok(tape.value(all).clone())
}

fn image_features(
    backbone: &BackboneBundle,
    stack: Option<&MMAStack>,
    cache: &EvalCache,
    samples: &[usize],
    batch: usize,
) -> Result<Tensor> {
    let mut values = Vec::with_capacity(samples.len() * backbone.config().d);
    for chunk in samples.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let nodes = backbone.attach(&mut tape, false);
        let vars = stack.map(|s| s.attach(&mut tape, false));
        for &i in chunk {
            let f = nodes.encode_image(&mut tape, ImageInput::Hidden(&cache.images[i]), hook_of(&vars))?;
            values.extend_from_slice(tape.value(f).values());
        }
    }
    Tensor::matrix(samples.len(), backbone.config().d, values)
}

/// Sample indices and label space of each split for one client.
pub struct ClientSplits {
    pub splits: Vec<(Split, Vec<usize>, Vec<usize>)>,
}

/// Local: the client's own classes. Base: classes held by other clients
/// only, scored over every base class. Novel: held-out classes, scored over
/// the novel classes only.
pub fn client_splits(plan: &PartitionPlan, labels: &[usize], client: usize) -> ClientSplits {
    let own = &plan.base_classes[client];
    let all_base = plan.all_base_classes();
    let novel = &plan.novel_classes;
    let pick = |f: &dyn Fn(usize) -> bool| (0..labels.len()).filter(|&i| f(labels[i])).collect::<Vec<_>>();
    let local = pick(&|l| own.contains(&l));
    let base = pick(&|l| all_base.contains(&l) && !own.contains(&l));
    let nov = pick(&|l| novel.contains(&l));
    ClientSplits {
        splits: vec![(Split::Local, local, own.clone()), (Split::Base, base, all_base), (Split::Novel, nov, novel.clone())],
    }
}

/// All three splits for one client, encoding each test image and class once.
pub fn evaluate_client(
    prepared: &Prepared,
    stack: Option<&MMAStack>,
    client: usize,
    round: u64,
    batch: usize,
) -> Result<Vec<MetricsRow>> {
    let cache = &prepared.eval;
    let splits = client_splits(&prepared.plan, &cache.labels, client);
    let mut needed: Vec<usize> = splits.splits.iter().flat_map(|(_, s, _)| s.iter().copied()).collect();
    needed.sort_unstable();
    needed.dedup();
    let mut classes: Vec<usize> = splits.splits.iter().flat_map(|(_, _, c)| c.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    let img = image_features(&prepared.backbone, stack, cache, &needed, batch)?;
    let txt = class_features(&prepared.backbone, stack, cache, &classes)?;
    let d = img.cols();
    splits
        .splits
        .iter()
        .map(|(split, samples, space)| {
            if samples.is_empty() {
                return Err(Error::Evaluation {
                    split: split.name().into(),
                    reason: format!("has no samples for client {client}"),
                });
            }
            let rows: Vec<f64> =
                samples.iter().flat_map(|i| img.row(needed.binary_search(i).expect("needed")).to_vec()).collect();
            let cols: Vec<f64> = space.iter().flat_map(|c| txt.row(classes.binary_search(c).expect("class")).to_vec()).collect();
            let (n, correct, loss) = score(
                &prepared.backbone,
                &Tensor::matrix(samples.len(), d, rows)?,
                &Tensor::matrix(space.len(), d, cols)?,
                samples.iter().map(|&i| cache.labels[i]),
                space,
                *split,
            )?;
            MetricsRow::new(round, client, *split, n, correct, loss)
        })
        .collect()
}

fn evaluate_all(
    prepared: &Prepared,
    clients: &[ClientState],
    round: u64,
    batch: usize,
    parallel: bool,
) -> Result<Vec<MetricsRow>> {
    let one = |c: &ClientState| evaluate_client(prepared, Some(&c.stack), c.id, round, batch);
    let per: Vec<Result<Vec<MetricsRow>>> =
        if parallel { clients.par_iter().map(one).collect() } else { clients.iter().map(one).collect() };
    Ok(per.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Metrics and communication log of one (seed, strategy) run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub strategy: Strategy,
    pub rounds: u64,
    pub rows: Vec<MetricsRow>,
    pub comm: Vec<CommRecord>,
    pub backbone_digest: String,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
}

/// Runs the federation for `cfg.federation.rounds` rounds under `strategy`.
/// Round 0 is evaluated before training, then every `eval.every` rounds; the
/// last evaluation follows the final synchronization and is labeled with
/// the round count.
pub fn execute(cfg: &ExperimentConfig, prepared: &Prepared, strategy: Strategy) -> Result<RunRecord> {
    let f = &cfg.federation;
    let a = &cfg.adapter;
    let seed = prepared.seed;
    let backbone = &prepared.backbone;
    backbone.verify_frozen()?;
    let init = MMAStack::init(cfg.backbone.d, a.r, a.first_block, cfg.backbone.layers, a.alpha, seed)?;
    let mut server = ServerState::new(init.clone(), strategy, f.participation, seed)?;
    server.weighting = f.weighting;
    let mut clients: Vec<ClientState> = prepared
        .shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let tc = TrainConfig {
                eta: cfg.train.eta,
                epochs: cfg.train.epochs,
                batch_train: cfg.train.batch_train,
                batch_eval: cfg.train.batch_eval,
                seed: client_seed(seed, i),
            };
            ClientState::new(i, init.clone(), shard.clone(), tc)
        })
        .collect();
    let rounds = f.rounds as u64;
    let batch = cfg.train.batch_eval;
    let mut rows = Vec::new();
    let mut comm = Vec::new();
    if rounds > 0 {
        rows.extend(evaluate_all(prepared, &clients, 0, batch, f.parallel)?);
    }
    for t in 0..rounds {
        let outcome = run_round(&mut server, &mut clients, backbone, f.parallel)?;
        comm.extend(outcome.messages.iter().map(|m| m.record()));
        let done = t + 1;
        if done < rounds && done % cfg.eval.every as u64 == 0 {
            rows.extend(evaluate_all(prepared, &clients, done, batch, f.parallel)?);
        }
    }
    let sync = final_sync(&server, &mut clients)?;
    comm.extend(sync.iter().map(|m| CommRecord { round: rounds, ..m.record() }));
    rows.extend(evaluate_all(prepared, &clients, rounds, batch, f.parallel)?);
    backbone.verify_frozen()?;
    Ok(RunRecord { seed, strategy, rounds, rows, comm, backbone_digest: backbone.digest(), clients, server })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub strategy: Strategy,
    pub rounds: u64,
    /// Before any training (zero-shot).
    pub initial: Scores,
    #[serde(rename = "final")]
    pub final_scores: Scores,
    pub bytes_up: usize,
    pub bytes_down: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeans {
    pub local: f64,
    pub base: f64,
    pub novel: f64,
    pub hm: f64,
}

impl SplitMeans {
    pub fn over(scores: &[&Scores]) -> Self {
        let n = scores.len().max(1) as f64;
        let m = |f: fn(&Scores) -> f64| scores.iter().map(|s| f(s)).sum::<f64>() / n;
        Self { local: m(|s| s.local), base: m(|s| s.base), novel: m(|s| s.novel), hm: m(|s| s.hm) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub strategy: Strategy,
    pub runs: Vec<RunSummary>,
    /// Means over seeds.
    pub initial: SplitMeans,
    #[serde(rename = "final")]
    pub final_scores: SplitMeans,
}

impl ExperimentSummary {
    pub fn from_runs(strategy: Strategy, runs: Vec<RunSummary>) -> Self {
        let initial = SplitMeans::over(&runs.iter().map(|r| &r.initial).collect::<Vec<_>>());
        let final_scores = SplitMeans::over(&runs.iter().map(|r| &r.final_scores).collect::<Vec<_>>());
        Self { strategy, runs, initial, final_scores }
    }
}

/// Recomputes a run summary from its metrics rows and communication log.
pub fn summarize(seed: u64, strategy: Strategy, rounds: u64, rows: &[MetricsRow], comm: &[CommRecord]) -> Result<RunSummary> {
    let bytes = |d: Direction| comm.iter().filter(|r| r.direction == d).map(|r| r.bytes).sum();
    Ok(RunSummary {
        seed,
        strategy,
        rounds,
        initial: scores_at(rows, 0)?,
        final_scores: scores_at(rows, rounds)?,
        bytes_up: bytes(Direction::Up),
        bytes_down: bytes(Direction::Down),
    })
}

impl RunRecord {
    pub fn summary(&self) -> Result<RunSummary> {
        summarize(self.seed, self.strategy, self.rounds, &self.rows, &self.comm)
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const COMM_FILE: &str = "comm.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_ECHO_FILE: &str = "config.echo.json";
pub const DIGEST_FILE: &str = "backbone.sha256";
pub const FAILED_FILE: &str = "FAILED";

/// Directory holding one seed's files: `out` itself for single-seed runs,
/// `out/seed-<s>` otherwise.
pub fn seed_dir(out: &Path, seeds: &[u64], seed: u64) -> PathBuf {
    if seeds.len() == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("seed-{seed}"))
    }
}

fn write_run(dir: &Path, run: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(METRICS_FILE), metrics_csv(&run.rows))?;
    std::fs::write(dir.join(COMM_FILE), comm_csv(&run.comm))?;
    std::fs::write(dir.join(DIGEST_FILE), format!("{}\n", run.backbone_digest))?;
    Ok(())
}

/// Runs every configured seed and writes the artifacts under `out`. On
/// failure a `FAILED` file with the diagnostic marks the directory.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let _ = std::fs::remove_file(out.join(FAILED_FILE));
    let result = (|| {
        std::fs::write(out.join(CONFIG_ECHO_FILE), serde_json::to_string_pretty(cfg)?)?;
        let mut runs = Vec::with_capacity(cfg.eval.seeds.len());
        for &seed in &cfg.eval.seeds {
            let prepared = prepare(cfg, seed)?;
            let run = execute(cfg, &prepared, cfg.federation.strategy)?;
            write_run(&seed_dir(out, &cfg.eval.seeds, seed), &run)?;
            runs.push(run.summary()?);
        }
        let summary = ExperimentSummary::from_runs(cfg.federation.strategy, runs);
        std::fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
        Ok(summary)
    })();
    if let Err(e) = &result {
        std::fs::write(out.join(FAILED_FILE), format!("run failed; outputs in this directory are partial\n{e}\n"))?;
    }
    result
}

/// Rebuilds the summary of a `run` output directory from its CSV files.
pub fn report(dir: &Path) -> Result<ExperimentSummary> {
    let text = std::fs::read_to_string(dir.join(CONFIG_ECHO_FILE))
        .map_err(|e| Error::Config(format!("{} is not a run directory: {e}", dir.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)?;
    let runs = cfg
        .eval
        .seeds
        .iter()
        .map(|&seed| {
            let sd = seed_dir(dir, &cfg.eval.seeds, seed);
            let rows = super::metrics::parse_metrics_csv(&std::fs::read_to_string(sd.join(METRICS_FILE))?)?;
            let comm = super::metrics::parse_comm_csv(&std::fs::read_to_string(sd.join(COMM_FILE))?)?;
            summarize(seed, cfg.federation.strategy, cfg.federation.rounds as u64, &rows, &comm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentSummary::from_runs(cfg.federation.strategy, runs))
}
