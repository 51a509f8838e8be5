//! End-to-end acceptance checks. Run with
//! `cargo test -p gadmore --test acceptance` to see the report.

use std::f64::consts::PI;
use std::io::Write;
use std::time::{Duration, Instant};

use gadmore::align::AlignConfig;
use gadmore::geometry::{Family, ManifoldSpec};
use gadmore::graph::{laplacian_score, sym_norm_adjacency, Graph};
use gadmore::inference::{auprc, auroc, scores_to_tsv, score_nodes};
use gadmore::model::{ModelConfig, ModelState};
use gadmore::router::{gate, quality_threshold, update_banks, BankEntry, MemoryBank, RouterConfig};
use gadmore::sweep::{sweep, SweepConfig};
use gadmore::synth::{gen_synth, SynthKind, SynthSpec};
use gadmore::tape::{Mat, Tape};
use gadmore::training::{
    grad_check, grad_check_scaled, plan_batch, total_loss, train, GraphData, LossTerms, TrainConfig,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const KAPPAS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Random tangent vector with norm below `frac` of the sampling radius.
fn tangent(rng: &mut ChaCha8Rng, spec: &ManifoldSpec, dim: usize, frac: f64) -> Vec<f64> {
    let radius = match spec.family() {
        Family::Spherical => PI / spec.scale(),
        _ => 6.0 / spec.scale().max(1.0),
    };
    let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = rng.random_range(0.0..frac) * radius / norm(&dir).max(1e-12);
    dir.iter().map(|x| x * r).collect()
}

fn geometry_suite() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = 1000;
    for kappa in KAPPAS {
        let spec = ManifoldSpec::new(kappa, 3).map_err(|e| e.to_string())?;
        for _ in 0..samples {
            let [p, q, r] = [0; 3].map(|_| spec.exp_origin(&tangent(&mut rng, &spec, 3, 0.98)).unwrap());
            let (pq, qp) = (spec.dist(&p, &q).unwrap(), spec.dist(&q, &p).unwrap());
            ensure!(spec.dist(&p, &p).unwrap() == 0.0, "d(p,p) ≠ 0 at κ={kappa}");
            ensure!(pq >= 0.0 && (pq - qp).abs() <= 1e-12 * (1.0 + pq), "symmetry fails at κ={kappa}");
            let (pr, qr) = (spec.dist(&p, &r).unwrap(), spec.dist(&q, &r).unwrap());
            ensure!(pr <= pq + qr + 1e-9, "triangle inequality fails at κ={kappa}: {pr} > {pq} + {qr}");

            let v = tangent(&mut rng, &spec, 3, 0.98);
            let back = spec.log_origin(&spec.exp_origin(&v).unwrap()).unwrap();
            let err = norm(&v.iter().zip(&back).map(|(a, b)| a - b).collect::<Vec<_>>());
            ensure!(err <= 1e-6 * norm(&v).max(1e-12) || err <= 1e-12, "round trip error {err} at κ={kappa}");
        }
    }
    for sign in [1.0, -1.0] {
        let spec = ManifoldSpec::new(sign * 1e-4, 3).unwrap();
        for _ in 0..samples {
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(-0.057..0.057)).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-0.057..0.057)).collect();
            let d0 = norm(&p.iter().zip(&q).map(|(a, b)| a - b).collect::<Vec<_>>());
            if d0 < 1e-6 {
                continue;
            }
            let d = spec.dist(&spec.exp_origin(&p).unwrap(), &spec.exp_origin(&q).unwrap()).unwrap();
            ensure!((d - d0).abs() / d0 <= 1e-3, "κ={} gives {d}, flat {d0}", sign * 1e-4);
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{samples} samples per curvature in {elapsed:.2?}"))
}

fn closed_forms() -> Check {
    let h = ManifoldSpec::new(-1.0, 2).unwrap();
    let d = h.dist(&[0.0, 0.0], &[0.5, 0.0]).unwrap();
    ensure!((d - 3f64.ln()).abs() <= 1e-9, "hyperbolic distance {d}");
    let s = ManifoldSpec::new(1.0, 2).unwrap();
    let equator = s.exp_origin(&[PI / 2.0, 0.0]).unwrap();
    let d2 = s.dist(&s.origin(), &equator).unwrap();
    ensure!((d2 - PI / 2.0).abs() <= 1e-9, "spherical distance {d2}");
    Ok(format!("ln 3 off by {:.1e}, π/2 off by {:.1e}", (d - 3f64.ln()).abs(), (d2 - PI / 2.0).abs()))
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, connected: bool) -> Graph {
    let mut edges: Vec<(usize, usize)> = Vec::new();
    if connected {
        edges.extend((1..n).map(|i| (i, rng.random_range(0..i))));
    }
    for _ in 0..rng.random_range(0..2 * n) {
        let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
        if u != v {
            edges.push((u, v));
        }
    }
    Graph::new(Array2::zeros((n, 1)), edges, None).unwrap()
}

fn laplacian_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let n = rng.random_range(2..=50);
        let g = random_graph(&mut rng, n, trial % 2 == 0);
        let adj = sym_norm_adjacency(&g);
        let f = Array1::from_shape_fn(n, |_| rng.random_range(-3.0..3.0));
        let score = laplacian_score(f.view(), &adj).unwrap();
        let sq = |v: usize| (g.degree(v) as f64).sqrt();
        let mut oracle: f64 = (0..n).filter(|&v| g.degree(v) == 0).map(|v| f[v] * f[v]).sum();
        for &(u, v) in g.edges() {
            let d = f[u] / sq(u) - f[v] / sq(v);
            oracle += d * d;
        }
        let err = (score - oracle).abs() / (1.0 + oracle.abs());
        worst = worst.max(err);
        ensure!(err <= 1e-8, "graph {trial}: {score} vs {oracle}");

        let connected = random_graph(&mut rng, n, true);
        let f = Array1::from_shape_fn(n, |v| (connected.degree(v) as f64).sqrt());
        let zero = laplacian_score(f.view(), &sym_norm_adjacency(&connected)).unwrap();
        ensure!(zero.abs() <= 1e-9, "D^1/2 1 scores {zero}");
    }
    Ok(format!("100 graphs, worst relative error {worst:.1e}"))
}

fn softmax(v: &[f64], tau: f64) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

fn gating_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s: Vec<f64> = (0..5).map(|_| rng.random_range(-8.0..2.0)).collect();
        let k = rng.random_range(1..=5);
        let tau = rng.random_range(0.05..5.0);
        let cfg = RouterConfig { temperature: tau, top_k: k, ..RouterConfig::default() };
        let d = gate(&s, &cfg);
        ensure!((d.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9, "weights do not sum to 1");
        ensure!((d.active_weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9, "active weights do not sum to 1");
        let picked: Vec<f64> = d.active.iter().map(|&i| s[i]).collect();
        for (w, o) in d.active_weights.iter().zip(softmax(&picked, tau)) {
            worst = worst.max((w - o).abs());
        }
        for t in [1e-3, 1.0, 100.0] {
            let other = gate(&s, &RouterConfig { temperature: t, ..cfg.clone() });
            ensure!(argmax(&other.weights) == argmax(&s), "argmax moved at τ={t}");
        }
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] > 2e-3 {
            let cold = gate(&s, &RouterConfig { temperature: 1e-4, ..cfg.clone() });
            let top = cold.active_weights.iter().copied().fold(0.0, f64::max);
            ensure!(top >= 1.0 - 1e-6, "τ=1e-4 leaves max weight {top}");
        }
    }
    ensure!(worst <= 1e-12, "subset softmax differs by {worst}");
    Ok(format!("1000 logit vectors, subset softmax error {worst:.1e}"))
}

fn bank_state_machine() -> Check {
    let cfg = RouterConfig {
        capacity: 4,
        per_update_cap: 2,
        e_cold: 2,
        e_total: 6,
        ..RouterConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut banks = vec![MemoryBank::new(0, cfg.capacity), MemoryBank::new(1, cfg.capacity)];
    for epoch in 0..8 {
        let b = 10;
        let emb = Array2::from_shape_fn((b, 3), |_| rng.random_range(-1.0..1.0));
        let errors = Array2::from_shape_fn((b, 2), |_| rng.random_range(0.0..2.0));
        let active: Vec<Vec<usize>> = (0..b).map(|_| vec![0, 1]).collect();
        let before: Vec<usize> = banks.iter().map(MemoryBank::len).collect();
        let log = update_banks(&mut banks, &emb, &active, &errors, epoch, &cfg);
        if epoch < cfg.e_cold {
            ensure!(log.is_empty(), "update during cold start at epoch {epoch}");
            ensure!(banks.iter().all(MemoryBank::is_empty), "bank filled during cold start");
        }
        for (u, bank) in log.iter().zip(&banks) {
            ensure!(bank.len() <= cfg.capacity, "bank over capacity");
            ensure!(u.inserted + u.replaced <= cfg.per_update_cap, "per-update cap exceeded");
            ensure!(bank.len() >= before[u.expert], "bank shrank");
        }
    }
    ensure!(banks.iter().all(MemoryBank::is_full), "banks never filled");

    // one full bank of one entry at quality 0.5, margin 0.25
    let hyst = RouterConfig {
        capacity: 1,
        e_cold: 0,
        e_total: 1,
        hysteresis: 0.25,
        epsilon: 0.0,
        ..RouterConfig::default()
    };
    for (error, accept) in [(0.3, false), (0.25, true)] {
        let mut bank = vec![MemoryBank::new(0, 1)];
        bank[0].entries.push(BankEntry { embedding: vec![9.0], quality: 0.5 });
        // errors 0, e, 1 give qualities 1, 1 − e, 0; only the middle node is a candidate
        let errors = Array2::from_shape_vec((3, 1), vec![0.0, error, 1.0]).unwrap();
        let emb = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 2.0]).unwrap();
        let active = vec![vec![], vec![0], vec![]];
        let log = update_banks(&mut bank, &emb, &active, &errors, 0, &hyst);
        let replaced = bank[0].entries[0].embedding == vec![1.0];
        ensure!(replaced == accept, "q = {} handled wrongly: {log:?}", 1.0 - error);
    }

    let d = RouterConfig::default();
    let ends = [
        quality_threshold(d.e_cold as f64, &d),
        quality_threshold(d.e_total as f64, &d),
        quality_threshold((d.e_cold + d.e_total) as f64 / 2.0, &d),
    ];
    ensure!(ends[0] == 0.5 && ends[1] == 0.9, "threshold endpoints {ends:?}");
    ensure!(ends[2] == 0.7, "threshold midpoint {}", ends[2]);
    Ok("cold start, capacity, cap, hysteresis and schedule hold".into())
}

/// The full five-expert model on a six-node graph with four aligned features.
fn grad_instance(seed: u64) -> (ModelState, GraphData) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 2), (1, 4)];
    let g = Graph::new(Mat::zeros((n, 1)), edges, None).unwrap();
    let features = Mat::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0));
    let mut state = ModelState::init(
        ModelConfig { backbone_depth: 2, backbone_out: 2, k_hops: 2, ..ModelConfig::default() },
        AlignConfig { curvatures: vec![0.0, -1.0], total_dim: 4, ..AlignConfig::default() },
        RouterConfig::default(),
        TrainConfig { seed, negative_samples: 2, ..TrainConfig::default() },
    )
    .unwrap();
    for (i, e) in state.experts.iter_mut().enumerate() {
        e.theta = 0.1 * i as f64 - 0.2;
        for l in &mut e.layers {
            l.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
    }
    for b in &mut state.banks {
        for _ in 0..3 {
            let embedding = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
            b.entries.push(BankEntry { embedding, quality: 0.7 });
        }
    }
    let data = GraphData::new(&g, features, 2).unwrap();
    (state, data)
}

fn gradient_checks() -> Check {
    let mut worst = 0.0f64;
    let mut groups = 0;
    for seed in [1, 2] {
        let (state, data) = grad_instance(seed);
        let plan = plan_batch(&data, &[0, 1, 2, 3, 4, 5], &state.train, &mut ChaCha8Rng::seed_from_u64(seed));
        let report = grad_check(&state, &data, &plan, 1e-5).map_err(|e| e.to_string())?;
        groups = report.groups.len();
        ensure!(groups == state.param_names().len(), "not every parameter group checked");
        for g in &report.groups {
            ensure!(g.max_rel_error <= 1e-4, "{} has relative error {:.2e}", g.name, g.max_rel_error);
        }
        worst = worst.max(report.max_rel_error);
        let bad = grad_check_scaled(&state, &data, &plan, 1e-5, 1.1).map_err(|e| e.to_string())?;
        ensure!(bad.max_rel_error > 1e-4, "corrupted gradient passed ({:.2e})", bad.max_rel_error);
    }
    Ok(format!("{groups} groups, worst relative error {worst:.1e}, corruption detected"))
}

fn loss_identities() -> Check {
    let mut tape = Tape::new();
    let s = tape.leaf(Mat::zeros((7, 5)));
    let g = tape.softmax_rows(s, 0.7, None);
    let l = tape.neg_entropy_mean(g);
    let gate_min = tape.scalar_value(l);
    ensure!((gate_min + 5f64.ln()).abs() <= 1e-9, "uniform gating gives {gate_min}");

    let mut tape = Tape::new();
    let z = tape.leaf(Mat::zeros((4, 4)));
    let target = Mat::from_shape_fn((4, 4), |(i, j)| f64::from(u8::from((i + j) % 2 == 1)));
    let bce = tape.bce_logits_mean(z, target);
    let bce = tape.scalar_value(bce);
    ensure!((bce - 2f64.ln()).abs() <= 1e-9, "zero-logit BCE {bce}");

    let terms = LossTerms { embed: 1.0, feat: 2.0, structure: 3.0, contrast: 4.0, gate: 5.0 };
    let total = total_loss(&terms, &TrainConfig::default().lambdas);
    ensure!((total - 2.75).abs() <= 1e-12, "weighted total {total}");
    Ok(format!("L_gate {gate_min:.12}, BCE {bce:.12}, total {total}"))
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..80);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-200i32..200) as f64 / 64.0).collect();
        let l: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        if !l.contains(&0) || !l.contains(&1) {
            continue;
        }
        done += 1;
        let (mut wins, mut ties, mut pairs) = (0u64, 0u64, 0u64);
        for i in (0..n).filter(|&i| l[i] == 1) {
            for j in (0..n).filter(|&j| l[j] == 0) {
                pairs += 1;
                if s[i] > s[j] {
                    wins += 1;
                } else if s[i] == s[j] {
                    ties += 1;
                }
            }
        }
        let a = auroc(&s, &l).unwrap();
        ensure!(a == (wins as f64 + 0.5 * ties as f64) / pairs as f64, "auroc {a} differs from pair count");

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| s[y].total_cmp(&s[x]).then(x.cmp(&y)));
        let (mut hits, mut sum) = (0, 0.0);
        for (k, &i) in order.iter().enumerate() {
            if l[i] == 1 {
                hits += 1;
                sum += hits as f64 / (k + 1) as f64;
            }
        }
        let ap = auprc(&s, &l).unwrap();
        ensure!(ap == sum / hits as f64, "auprc {ap} differs from direct AP {}", sum / hits as f64);

        let affine: Vec<f64> = s.iter().map(|x| 2.0 * x + 1.0).collect();
        let exp: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        ensure!(auroc(&affine, &l).unwrap() == a && auroc(&exp, &l).unwrap() == a, "monotone map moved auroc");
    }
    Ok("1000 labeled vectors match exactly".into())
}

struct Pipeline {
    targets: Vec<(SynthKind, Graph)>,
    checkpoint: String,
    scores: Vec<String>,
    aurocs: Vec<f64>,
    elapsed: Duration,
}

fn run_pipeline() -> Pipeline {
    let start = Instant::now();
    let sources = [SynthKind::CliqueInjection, SynthKind::SbmContextual]
        .map(|k| gen_synth(&SynthSpec::new(k, 600, 7)).unwrap());
    let targets: Vec<(SynthKind, Graph)> = [SynthKind::CliqueInjection, SynthKind::TreeBridges]
        .into_iter()
        .map(|k| (k, gen_synth(&SynthSpec::new(k, 600, 101)).unwrap()))
        .collect();
    let state = ModelState::init(
        ModelConfig::default(),
        AlignConfig::default(),
        RouterConfig::default(),
        TrainConfig { seed: 7, epochs: 40, ..TrainConfig::default() },
    )
    .unwrap();
    let state = train(&sources, state, |_| Ok(())).unwrap();
    let mut scores = Vec::new();
    let mut aurocs = Vec::new();
    for (_, g) in &targets {
        let s = score_nodes(g, &state).unwrap();
        aurocs.push(auroc(&s, g.labels().unwrap()).unwrap());
        scores.push(scores_to_tsv(&s));
    }
    Pipeline {
        targets,
        checkpoint: state.to_json().unwrap(),
        scores,
        aurocs,
        elapsed: start.elapsed(),
    }
}

fn end_to_end(run: &Pipeline) -> Check {
    let mut parts = Vec::new();
    for ((kind, _), &a) in run.targets.iter().zip(&run.aurocs) {
        // general floor, then the seeded run's own AUROC (0.825 / 0.747) less 0.03
        let floor = match kind {
            SynthKind::CliqueInjection => f64::max(0.75, 0.795),
            _ => f64::max(0.65, 0.717),
        };
        ensure!(a >= floor, "{kind} target AUROC {a:.3} below {floor}");
        parts.push(format!("{kind} {a:.3}"));
    }
    ensure!(run.elapsed < Duration::from_secs(600), "took {:?}", run.elapsed);
    Ok(format!("{} in {:.1?}", parts.join(", "), run.elapsed))
}

fn curvature_sensitivity(run: &Pipeline) -> Check {
    let mut parts = Vec::new();
    for (kind, g) in &run.targets {
        let rows = sweep(g, &SweepConfig::default()).map_err(|e| e.to_string())?;
        ensure!(rows.len() == 5, "{} sweep rows", rows.len());
        ensure!(rows.iter().all(|r| (0.0..=1.0).contains(&r.auroc)), "AUROC outside [0, 1]");
        let lo = rows.iter().map(|r| r.auroc).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.auroc).fold(f64::NEG_INFINITY, f64::max);
        ensure!(hi - lo >= 0.02, "{kind}: AUROC spread {:.3} across curvatures", hi - lo);
        parts.push(format!("{kind} spread {:.3}", hi - lo));
    }
    Ok(parts.join(", "))
}

fn determinism(first: &Pipeline) -> Check {
    let second = run_pipeline();
    ensure!(first.checkpoint == second.checkpoint, "checkpoints differ");
    ensure!(first.scores == second.scores, "score files differ");
    Ok(format!("checkpoint of {} bytes reproduced bit for bit", first.checkpoint.len()))
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Check)> = vec![
        (1, "geometry suite", geometry_suite()),
        (2, "closed-form distances", closed_forms()),
        (3, "Laplacian score oracle", laplacian_oracle()),
        (4, "gating algebra", gating_algebra()),
        (5, "memory bank state machine", bank_state_machine()),
        (6, "gradient checks", gradient_checks()),
        (7, "loss identities", loss_identities()),
        (8, "metric oracles", metric_oracles()),
    ];
    let run = run_pipeline();
    results.push((9, "end-to-end regression", end_to_end(&run)));
    results.push((10, "curvature sensitivity", curvature_sensitivity(&run)));
    results.push((11, "determinism", determinism(&run)));

    // written past the test harness capture so the report always shows
    let mut out = std::io::stdout().lock();
    for (id, name, r) in &results {
        let line = match r {
            Ok(detail) => format!("criterion {id:>2} {name:<28} PASS  {detail}"),
            Err(why) => format!("criterion {id:>2} {name:<28} FAIL  {why}"),
        };
        writeln!(out, "{line}").unwrap();
    }
    drop(out);
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
