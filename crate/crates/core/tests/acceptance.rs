//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedmma_core::adapter::{MMAStack, Matrix, WIRE_HEADER_BYTES};
use fedmma_core::datagen::{dirichlet_split, pathological_split, PartitionPlan, Scheme};
use fedmma_core::evalrun::{
    execute, gradcheck_suite, harmonic_mean, prepare, run_experiment, ExperimentConfig, GradcheckConfig, Prepared, SplitMeans,
    COMM_FILE, METRICS_FILE,
};
use fedmma_core::federation::{run_round, ClientState, Direction, ServerState, Strategy};
use fedmma_core::rng::CtrRng;
use fedmma_core::tensorcore::Tensor;
use fedmma_core::trainer::{local_train, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn desk() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    ExperimentConfig::load(&path).expect("configs/desk.json")
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn clients_of(cfg: &ExperimentConfig, p: &Prepared, strategy: Strategy) -> (ServerState, Vec<ClientState>) {
    let a = &cfg.adapter;
    let init = MMAStack::init(cfg.backbone.d, a.r, a.first_block, cfg.backbone.layers, a.alpha, p.seed).unwrap();
    let server = ServerState::new(init.clone(), strategy, cfg.federation.participation, p.seed).unwrap();
    let clients = p
        .shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let tc = TrainConfig {
                eta: cfg.train.eta,
                epochs: cfg.train.epochs,
                batch_train: cfg.train.batch_train,
                batch_eval: cfg.train.batch_eval,
                seed: fedmma_core::evalrun::client_seed(p.seed, i),
            };
            ClientState::new(i, init.clone(), shard.clone(), tc)
        })
        .collect();
    (server, clients)
}

fn gradient_fidelity() -> Outcome {
    let cfg = GradcheckConfig::default();
    let (s, reports) = gradcheck_suite(&cfg).map_err(|e| e.to_string())?;
    let w = &reports[s.worst_trial];
    let over: usize = reports.iter().map(|r| r.over_tolerance).sum();
    let abs = reports.iter().map(|r| r.max_abs_error).fold(0.0, f64::max);
    ensure(
        s.trials >= 100 && s.max_rel_error < cfg.tolerance && s.seconds < 60.0,
        format!(
            "{} trials, {} entries, max rel error {:.3e} at {}[{}] of block {} (analytic {:.3e}, numeric {:.3e}), {over} entries over 1e-5, max abs error {abs:.2e}, {:.1} s",
            s.trials, s.entries, s.max_rel_error, w.worst.1, w.worst.2, w.worst.0, w.analytic, w.numeric, s.seconds
        ),
    )
}

fn zero_init_neutrality() -> Outcome {
    let cfg = desk();
    let p = prepare(&cfg, 0).map_err(|e| e.to_string())?;
    let (b, a) = (&cfg.backbone, &cfg.adapter);
    let stacks: Vec<MMAStack> = (0..4)
        .map(|s| MMAStack::init(b.d, a.r, a.first_block, b.layers, [a.alpha, 1.0, 0.01, 5.0][s], 100 + s as u64).unwrap())
        .collect();
    let tokens: Vec<Vec<usize>> = p.classes.iter().map(|c| c.tokens.clone()).collect();
    let mut rng = CtrRng::new(99, 2);
    let mut mismatched = 0;
    for i in 0..1000 {
        let image =
            Tensor::matrix(b.patches, b.patch_dim, (0..b.patches * b.patch_dim).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        let zs = p.backbone.classify(&image, &tokens, None).map_err(|e| e.to_string())?;
        let ad = p.backbone.classify(&image, &tokens, Some(&stacks[i % 4])).map_err(|e| e.to_string())?;
        if zs.len() != ad.len() || zs.iter().zip(&ad).any(|(x, y)| x.to_bits() != y.to_bits()) {
            mismatched += 1;
        }
    }
    ensure(mismatched == 0, format!("1000 samples x {} classes, {mismatched} probability vectors differ", tokens.len()))
}

fn protocol_consensus() -> Outcome {
    let cfg = desk();
    let p = prepare(&cfg, 0).map_err(|e| e.to_string())?;
    let digest = p.backbone.digest();
    let (mut server, mut clients) = clients_of(&cfg, &p, Strategy::SharedOnly);
    let locals = [Matrix::DownImg, Matrix::UpImg, Matrix::DownTxt, Matrix::UpTxt];
    let mut problems = Vec::new();
    let mut differs_after_first = false;
    for round in 0..cfg.federation.rounds as u64 {
        let expected: Vec<MMAStack> =
            clients.iter().map(|c| local_train(&p.backbone, &c.stack, &c.shard, &c.train_cfg, round).unwrap().0).collect();
        run_round(&mut server, &mut clients, &p.backbone, false).map_err(|e| e.to_string())?;
        let global = server.global_shared();
        for (c, want) in clients.iter().zip(&expected) {
            if c.stack.shared().iter().zip(&global).any(|(x, y)| !x.bit_eq(y)) {
                problems.push(format!("round {round}: client {} W_s differs from global", c.id));
            }
            for (x, y) in c.stack.blocks.iter().zip(&want.blocks) {
                if locals.iter().any(|&m| !x.matrix(m).bit_eq(y.matrix(m))) {
                    problems.push(format!("round {round}: client {} local matrices changed by the server", c.id));
                }
            }
        }
        if p.backbone.digest() != digest || p.backbone.verify_frozen().is_err() {
            problems.push(format!("round {round}: backbone digest changed"));
        }
        if round == 0 {
            differs_after_first = (0..clients.len()).any(|i| {
                (i + 1..clients.len()).any(|j| {
                    !clients[i].stack.blocks[0].matrix(Matrix::DownImg).bit_eq(clients[j].stack.blocks[0].matrix(Matrix::DownImg))
                })
            });
        }
    }
    if !differs_after_first {
        problems.push("no pair of clients differs in W_d after round 1".into());
    }
    ensure(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{} rounds x {} clients consistent, W_d diverges after round 1", cfg.federation.rounds, clients.len())
        } else {
            problems.join("; ")
        },
    )
}

fn communication_accounting() -> Outcome {
    let cfg = desk();
    let p = prepare(&cfg, 0).map_err(|e| e.to_string())?;
    let (d, r) = (cfg.backbone.d, cfg.adapter.r);
    let blocks = cfg.backbone.layers - cfg.adapter.first_block + 1;
    let expected = blocks * r * r * 8 + WIRE_HEADER_BYTES;
    let mut value_bytes = Vec::new();
    let mut problems = Vec::new();
    for strategy in [Strategy::SharedOnly, Strategy::FullAdapterAvg] {
        let (mut server, mut clients) = clients_of(&cfg, &p, strategy);
        let mut sizes = BTreeSet::new();
        for round in 0..3 {
            let out = run_round(&mut server, &mut clients, &p.backbone, false).map_err(|e| e.to_string())?;
            let ups: Vec<_> = out.messages.iter().filter(|m| m.direction == Direction::Up).collect();
            if ups.len() != out.participants.len() {
                problems.push(format!(
                    "{}: round {round} has {} uplinks for {} participants",
                    strategy.name(),
                    ups.len(),
                    out.participants.len()
                ));
            }
            for m in ups {
                sizes.insert((m.byte_count, m.value_bytes()));
                if strategy == Strategy::SharedOnly && m.byte_count != expected {
                    problems.push(format!("round {round}: uplink of {} bytes, expected {expected}", m.byte_count));
                }
            }
        }
        if sizes.len() != 1 {
            problems.push(format!("{}: uplink sizes vary {sizes:?}", strategy.name()));
        }
        value_bytes.push(sizes.iter().next().map(|s| s.1).unwrap_or(0));
    }
    let (shared, full) = (value_bytes[0], value_bytes[1]);
    if shared * (4 * d * r + r * r) != full * r * r {
        problems.push(format!("payload ratio {shared}/{full} is not r^2/(4dr+r^2)"));
    }
    let detail = format!(
        "SharedOnly uplink {} bytes ({}x{}^2x8 + {WIRE_HEADER_BYTES}), FullAdapterAvg payload {full} bytes, ratio {:.4} = {}/{}",
        shared + WIRE_HEADER_BYTES,
        blocks,
        r,
        shared as f64 / full as f64,
        r * r,
        4 * d * r + r * r
    );
    ensure(problems.is_empty(), if problems.is_empty() { detail } else { problems.join("; ") })
}

fn desk_trend() -> Outcome {
    let cfg = desk();
    let start = Instant::now();
    let strategies = [Strategy::SharedOnly, Strategy::LocalOnly, Strategy::FullAdapterAvg];
    let mut initial = Vec::new();
    let mut finals: Vec<Vec<fedmma_core::evalrun::Scores>> = vec![Vec::new(); 3];
    for &seed in &cfg.eval.seeds {
        let p = prepare(&cfg, seed).map_err(|e| e.to_string())?;
        for (k, &s) in strategies.iter().enumerate() {
            let run = execute(&cfg, &p, s).map_err(|e| e.to_string())?;
            let sum = run.summary().map_err(|e| e.to_string())?;
            if k == 0 {
                initial.push(sum.initial);
            }
            finals[k].push(sum.final_scores);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let zs = SplitMeans::over(&initial.iter().collect::<Vec<_>>());
    let m: Vec<SplitMeans> = finals.iter().map(|f| SplitMeans::over(&f.iter().collect::<Vec<_>>())).collect();
    let (ours, local, full) = (&m[0], &m[1], &m[2]);
    let zs_acc = (zs.local + zs.base + zs.novel) / 3.0;
    let checks = [
        ("zero-shot in [0.60, 0.80]", (0.60..=0.80).contains(&zs_acc), format!("{zs_acc:.4}")),
        ("(a) local >= 0.90", ours.local >= 0.90, format!("{:.4}", ours.local)),
        ("(b) novel >= zero-shot novel - 0.02", ours.novel >= zs.novel - 0.02, format!("{:.4} vs {:.4}", ours.novel, zs.novel)),
        ("(c) novel > LocalOnly novel", ours.novel > local.novel, format!("{:.4} vs {:.4}", ours.novel, local.novel)),
        (
            "(d) HM >= max(LocalOnly, FullAdapterAvg) - 0.01",
            ours.hm >= local.hm.max(full.hm) - 0.01,
            format!("{:.4} vs {:.4}/{:.4}", ours.hm, local.hm, full.hm),
        ),
        ("runtime < 600 s", secs < 600.0, format!("{secs:.0} s")),
    ];
    let detail = checks
        .iter()
        .map(|(name, ok, v)| format!("{} {name}: {v}", if *ok { "ok" } else { "FAIL" }))
        .collect::<Vec<_>>()
        .join("; ");
    let table = strategies
        .iter()
        .zip(&m)
        .map(|(s, x)| format!("{} L {:.3} B {:.3} N {:.3} HM {:.3}", s.name(), x.local, x.base, x.novel, x.hm))
        .collect::<Vec<_>>()
        .join(" | ");
    ensure(checks.iter().all(|c| c.1), format!("{detail}\n      {table}"))
}

fn hm_fidelity() -> Outcome {
    let a = harmonic_mean(&[69.41, 69.38, 75.52]).map_err(|e| e.to_string())?;
    let b = harmonic_mean(&[54.26, 54.86, 59.18]).map_err(|e| e.to_string())?;
    ensure((a - 71.32).abs() <= 0.01 && (b - 56.02).abs() <= 0.01, format!("HM {a:.4} and {b:.4}"))
}

fn determinism() -> Outcome {
    let mut cfg = desk();
    cfg.eval.seeds = vec![0, 1];
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut dirs: Vec<PathBuf> = Vec::new();
    for (name, parallel) in [("seq-a", false), ("seq-b", false), ("par", true)] {
        cfg.federation.parallel = parallel;
        let dir = tmp.path().join(name);
        run_experiment(&cfg, &dir).map_err(|e| e.to_string())?;
        dirs.push(dir);
    }
    let mut problems = Vec::new();
    let mut bytes = 0;
    for seed in [0, 1] {
        for f in [METRICS_FILE, COMM_FILE] {
            let read = |d: &PathBuf| std::fs::read(d.join(format!("seed-{seed}")).join(f)).unwrap();
            let reference = read(&dirs[0]);
            bytes += reference.len();
            for d in &dirs[1..] {
                if read(d) != reference {
                    problems.push(format!("seed {seed} {f} differs in {}", d.file_name().unwrap().to_string_lossy()));
                }
            }
        }
    }
    ensure(
        problems.is_empty(),
        if problems.is_empty() {
            format!("2 sequential + 1 concurrent run, {bytes} bytes of CSV per run identical")
        } else {
            problems.join("; ")
        },
    )
}

fn plan_violation(plan: &PartitionPlan, labels: &[usize]) -> Option<String> {
    let held: BTreeSet<usize> = plan.base_classes.iter().flatten().copied().collect();
    if plan.novel_classes.iter().any(|c| held.contains(c)) {
        return Some("a novel class is held by a client".into());
    }
    let mut seen = vec![false; labels.len()];
    for c in 0..plan.clients {
        let shard = plan.shard(c);
        if shard.is_empty() {
            return Some(format!("client {c} is empty"));
        }
        for i in shard {
            if std::mem::replace(&mut seen[i], true) {
                return Some(format!("sample {i} in two shards"));
            }
            if !plan.base_classes[c].contains(&labels[i]) {
                return Some(format!("sample {i} outside client {c}'s classes"));
            }
        }
    }
    if let Some(i) = (0..labels.len()).find(|&i| seen[i] != held.contains(&labels[i])) {
        return Some(format!("sample {i} of class {} wrongly (un)assigned", labels[i]));
    }
    if plan.scheme == Scheme::Pathological {
        for a in 0..plan.clients {
            for b in a + 1..plan.clients {
                if plan.base_classes[a].iter().any(|c| plan.base_classes[b].contains(c)) {
                    return Some(format!("clients {a} and {b} share a class"));
                }
            }
        }
    }
    None
}

fn partition_correctness() -> Outcome {
    let mut failures = Vec::new();
    for t in 0..1000u64 {
        let mut rng = CtrRng::new(2024, t);
        let clients = 1 + rng.below(6);
        let novel = rng.below(4);
        let result = if t % 2 == 0 {
            let k_base = 2 * clients + rng.below(10);
            let k = k_base + novel;
            let labels: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, 5 + rng.below(30))).collect();
            let beta = 10f64.powf(-1.0 + 3.0 * rng.uniform());
            dirichlet_split(&labels, k, clients, beta, novel, t).map(|p| (p, labels))
        } else {
            let cpc = 1 + rng.below(5);
            let k = clients * cpc + novel + rng.below(4);
            let mut labels: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, 1 + rng.below(10))).collect();
            rng.shuffle(&mut labels);
            pathological_split(&labels, k, clients, cpc, novel).map(|p| (p, labels))
        };
        match result {
            Ok((plan, labels)) => {
                if let Some(v) = plan_violation(&plan, &labels) {
                    failures.push(format!("draw {t}: {v}"));
                }
            }
            Err(e) => failures.push(format!("draw {t}: {e}")),
        }
    }
    let labels: Vec<usize> = (0..4000).map(|i| i % 10).collect();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let plan = dirichlet_split(&labels, 10, 4, 1000.0, 0, seed).map_err(|e| e.to_string())?;
        for c in 0..4 {
            worst = worst.max((plan.shard(c).len() as f64 / 1000.0 - 1.0).abs());
        }
    }
    if worst > 0.10 {
        failures.push(format!("beta=1000 client share off by {:.1}%", 100.0 * worst));
    }
    failures.truncate(5);
    ensure(
        failures.is_empty(),
        if failures.is_empty() {
            format!("1000 draws valid, beta=1000 worst deviation {:.2}% over 20 seeds", 100.0 * worst)
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 gradient fidelity", gradient_fidelity),
        ("2 zero-init neutrality", zero_init_neutrality),
        ("3 protocol consensus", protocol_consensus),
        ("4 communication accounting", communication_accounting),
        ("5 desk-scale trend experiment", desk_trend),
        ("6 harmonic-mean fidelity", hm_fidelity),
        ("7 determinism", determinism),
        ("8 partition correctness", partition_correctness),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        if only.as_deref().is_some_and(|o| !name.starts_with(o)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {name} ({secs:.1} s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1} s): {d}");
            }
        }
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
