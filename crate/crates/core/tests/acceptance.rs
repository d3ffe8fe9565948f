//! End-to-end acceptance run. Prints one line per criterion and exits non-zero
//! when a gated criterion fails.
//!
//! Set `COGSL_THREADS` to train seeds in parallel.

mod common;

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cogsl::config::{basic_views, BasicView, RunConfig, ViewSettings};
use cogsl::experiment::{fit_baseline, fit_baseline_raw, fit_cogsl, fit_cogsl_raw, map_ordered, mean_std, threads_from_env};
use cogsl::fusion::FusionVariant;
use cogsl::graph::Graph;
use cogsl::metrics::{evaluate, Metrics};
use cogsl::model::{Model, ModelConfig};
use cogsl::ndiff::{Tape, Tensor};
use cogsl::robustness::{poisoned_inputs, AttackKind, AttackSpec, Target};
use cogsl::views::{ppr_dense, PprMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{data_dir, random_graph};

const SEEDS: u64 = 10;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    NotRun,
}

struct Outcome {
    id: usize,
    name: &'static str,
    status: Status,
    detail: String,
    gated: bool,
}

fn outcome(id: usize, name: &'static str, ok: bool, detail: String) -> Outcome {
    Outcome { id, name, status: if ok { Status::Pass } else { Status::Fail }, detail, gated: true }
}

fn report(o: &Outcome) {
    let tag = match o.status {
        Status::Pass => "PASS",
        Status::Fail if o.gated => "FAIL",
        Status::Fail => "FAIL (soft)",
        Status::NotRun => "NOT RUN",
    };
    println!("criterion {:>2} [{tag}] {}: {}", o.id, o.name, o.detail);
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let r = cogsl::gradcheck::run_suite(1.0).expect("suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = r.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let ok = r.passed() && r.missing_ops().is_empty() && secs < 120.0;
    outcome(1, "gradient suite", ok, format!("{} cases, max rel err {worst:.2e}, {secs:.1}s", r.cases.len()))
}

fn ppr_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let g = random_graph(50, 0.08, 3, 2, 1000 + seed);
        let a = ppr_dense(&g, 0.15, PprMode::ClosedForm, 0.0).unwrap();
        let b = ppr_dense(&g, 0.15, PprMode::PowerIteration, 1e-12).unwrap();
        worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    let g = random_graph(50, 0.08, 3, 2, 7);
    let identity = ppr_dense(&g, 1.0, PprMode::ClosedForm, 0.0).unwrap() == Tensor::eye(50);
    outcome(
        2,
        "diffusion closed form vs power iteration",
        worst <= 1e-8 && identity,
        format!("max abs diff {worst:.2e}, alpha=1 identity {identity}"),
    )
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut row, mut beta, mut fused) = (0.0f64, 0.0f64, 0.0f64);
    let pairs =
        [[BasicView::Diffusion, BasicView::Knn], [BasicView::Adjacency, BasicView::Diffusion], [BasicView::Knn, BasicView::Adjacency]];
    for k in 0..1000 {
        let n = rng.random_range(6..14);
        let seed = rng.random::<u64>();
        let g = random_graph(n, 0.3, 3, 3, seed);
        let settings = ViewSettings { top_h: 3, knn_k: 2, ..ViewSettings::default() };
        let (v, s) = basic_views(&g, pairs[k % 3], &settings, seed).unwrap();
        let mu = [rng.random_range(0.01..0.99), rng.random_range(0.01..0.99)];
        let mut cfg = ModelConfig { hidden: 4, d_es: 3, d_mi: 3, mu, ..ModelConfig::default() };
        cfg.fusion.lambda = rng.random();
        let model = Model::new(g.features().clone(), 3, v, s, cfg).unwrap();
        let m = model.materialize(&model.init_params(seed).unwrap()).unwrap();
        for i in 0..n {
            for (b, mu_b) in mu.iter().enumerate() {
                row = row.max((m.estimated[b].row_sum(i) - model.basic_view(b).row_sum(i) - mu_b).abs());
            }
            let (b1, b2) = (m.beta[0][i], m.beta[1][i]);
            beta = beta.max((b1 + b2 - 1.0).abs());
            let mass = b1 * m.estimated[0].row_sum(i) + b2 * m.estimated[1].row_sum(i);
            fused = fused.max((m.fused.row_sum(i) - mass).abs());
        }
    }
    let ok = row <= 1e-10 && beta <= 1e-15 && fused <= 1e-10;
    outcome(3, "row mass and fusion invariants (1000 instances)", ok, format!("row {row:.1e}, beta {beta:.1e}, fused {fused:.1e}"))
}

fn naive_infonce(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    let cos = |i: usize, j: usize| {
        let (x, y) = (a.row(i), b.row(j));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        dot / (x.iter().map(|p| p * p).sum::<f64>().sqrt() * y.iter().map(|q| q * q).sum::<f64>().sqrt())
    };
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        let (mut row, mut col) = (0.0, 0.0);
        for j in 0..n {
            row += (cos(i, j) / tau).exp();
            col += (cos(j, i) / tau).exp();
        }
        total += -2.0 * cos(i, i) / tau + row.ln() + col.ln();
    }
    total / (2.0 * n as f64)
}

fn infonce_value(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let l = t.infonce(va, vb, Arc::new((0..a.rows()).collect()), tau).unwrap();
    t.value(l).item()
}

fn infonce_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let mut m = || Tensor::new(8, 5, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (a, b) = (m(), m());
        let tau = rng.random_range(0.1..2.0);
        worst = worst.max((infonce_value(&a, &b, tau) - naive_infonce(&a, &b, tau)).abs());
    }
    let same = Tensor::full(8, 5, 0.7);
    let ident = (infonce_value(&same, &same, 0.5) - 8f64.ln()).abs();
    outcome(
        4,
        "contrastive loss vs double loop",
        worst <= 1e-10 && ident <= 1e-9,
        format!("max diff {worst:.1e}, identical rows off ln|B| by {ident:.1e}"),
    )
}

fn metric_oracles() -> Outcome {
    let probs = Tensor::new(6, 3, vec![0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.1, 0.7, 0.2, 0.3, 0.4, 0.3, 0.1, 0.2, 0.7, 0.5, 0.1, 0.4]).unwrap();
    let m = evaluate(&probs, &[(0, 0), (1, 0), (2, 1), (3, 1), (4, 2), (5, 2)]).unwrap();
    let ok = m.f1_micro == 4.0 / 6.0 && (m.f1_macro - (0.5 + 0.8 + 2.0 / 3.0) / 3.0).abs() <= 1e-15 && m.auc == (0.75 + 0.875 + 1.0) / 3.0;
    outcome(5, "metric oracles", ok, format!("micro {:.4} macro {:.4} auc {:.4}", m.f1_micro, m.f1_macro, m.auc))
}

struct DatasetRuns {
    name: &'static str,
    cogsl: Vec<Metrics>,
    gcn: Vec<Metrics>,
    slowest: Duration,
    first_log: String,
}

fn history_log(run: &cogsl::experiment::CogslRun) -> String {
    let mut s = String::new();
    for r in run.history() {
        writeln!(s, "{}", serde_json::to_string(r).unwrap()).unwrap();
    }
    s
}

fn config(name: &str) -> Option<RunConfig> {
    let dir = data_dir(name);
    dir.exists().then(|| RunConfig::from_json(&serde_json::json!({ "dataset": dir }).to_string()).unwrap())
}

fn train_dataset(name: &'static str) -> Option<(DatasetRuns, Graph, RunConfig)> {
    let cfg = config(name)?;
    let raw = cfg.load_graph().unwrap();
    let results = map_ordered((0..SEEDS).collect(), threads_from_env(), |seed| {
        let start = Instant::now();
        let run = fit_cogsl_raw(&raw, &cfg, seed).unwrap();
        let took = start.elapsed();
        let gcn = fit_baseline_raw(&raw, &cfg, seed).unwrap();
        (run.test, gcn, took, (seed == 0).then(|| history_log(&run)))
    });
    let slowest = results.iter().map(|r| r.2).max().unwrap();
    let first_log = results[0].3.clone().unwrap();
    let runs =
        DatasetRuns { name, cogsl: results.iter().map(|r| r.0).collect(), gcn: results.iter().map(|r| r.1).collect(), slowest, first_log };
    Some((runs, raw, cfg))
}

fn mean(ms: &[Metrics], f: fn(&Metrics) -> f64) -> f64 {
    mean_std(&ms.iter().map(f).collect::<Vec<_>>()).mean
}

fn targets(runs: &[Option<&DatasetRuns>]) -> Outcome {
    let goals = [("wine", 94.0), ("cancer", 92.0), ("citeseer", 70.0)];
    let mut detail = Vec::new();
    let mut ok = true;
    let mut missing = false;
    for (r, (name, goal)) in runs.iter().zip(goals) {
        match r {
            Some(r) => {
                let micro = 100.0 * mean(&r.cogsl, |m| m.f1_micro);
                let sd = 100.0 * mean_std(&r.cogsl.iter().map(|m| m.f1_micro).collect::<Vec<_>>()).std;
                let fast = r.slowest < Duration::from_secs(600);
                ok &= micro >= goal && fast;
                detail.push(format!("{name} {micro:.2}±{sd:.2} (goal {goal}, slowest run {:.0}s)", r.slowest.as_secs_f64()));
            }
            None => {
                missing = true;
                detail.push(format!("{name} dataset absent"));
            }
        }
    }
    let mut o = outcome(6, "desk-scale F1-micro targets", ok, detail.join("; "));
    o.gated = false;
    if missing && ok {
        o.status = Status::NotRun;
        o.detail.push_str("; passes on the datasets present");
    }
    o
}

fn dominance(runs: &[Option<&DatasetRuns>]) -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    let mut missing = false;
    for r in runs {
        match r {
            Some(r) => {
                let (c, g) = (100.0 * mean(&r.cogsl, |m| m.f1_micro), 100.0 * mean(&r.gcn, |m| m.f1_micro));
                ok &= c >= g;
                detail.push(format!("{} cogsl {c:.2} vs gcn {g:.2}", r.name));
            }
            None => missing = true,
        }
    }
    if missing {
        detail.push("citeseer dataset absent".into());
    }
    let mut o = outcome(7, "CoGSL at least the GCN baseline", ok, detail.join("; "));
    if missing && ok {
        o.status = Status::NotRun;
        o.detail.push_str("; passes on the datasets present");
    }
    o
}

fn attacked_accuracy(raw: &Graph, cfg: &RunConfig, spec: &AttackSpec) -> (f64, f64) {
    let results = map_ordered((0..SEEDS).collect(), threads_from_env(), |seed| {
        let (graph, views, scopes) = poisoned_inputs(raw, cfg, Some(spec), seed).unwrap();
        let gcn = fit_baseline(&graph, &views[0], cfg, seed).unwrap();
        let run = fit_cogsl(&graph, views, scopes, cfg, seed).unwrap();
        (run.test.accuracy, gcn.accuracy)
    });
    let n = results.len() as f64;
    (results.iter().map(|r| r.0).sum::<f64>() / n, results.iter().map(|r| r.1).sum::<f64>() / n)
}

fn robustness(cancer: Option<&(DatasetRuns, Graph, RunConfig)>) -> Outcome {
    let Some((clean, raw, cfg)) = cancer else {
        return Outcome {
            id: 8,
            name: "robustness ordering on Cancer",
            status: Status::NotRun,
            detail: "cancer dataset absent".into(),
            gated: false,
        };
    };
    let (c0, g0) = (mean(&clean.cogsl, |m| m.accuracy), mean(&clean.gcn, |m| m.accuracy));
    let mut ok = true;
    let mut detail = vec![format!("clean cogsl {:.2} gcn {:.2}", 100.0 * c0, 100.0 * g0)];
    let specs = [
        AttackSpec { kind: AttackKind::EdgeDelete, rate: 0.15, target: Target::Both, seed: 0, allow_any_rate: false },
        AttackSpec { kind: AttackKind::FeatureNoise, rate: 0.5, target: Target::Features, seed: 0, allow_any_rate: false },
    ];
    for spec in &specs {
        let (c, g) = attacked_accuracy(raw, cfg, spec);
        let (dc, dg) = (100.0 * (c0 - c), 100.0 * (g0 - g));
        ok &= dc < dg;
        detail.push(format!("{} {}: drop cogsl {dc:.2} vs gcn {dg:.2}", spec.kind.name(), spec.rate));
    }
    let mut o = outcome(8, "robustness ordering on Cancer", ok, detail.join("; "));
    o.gated = false;
    o
}

fn ablation() -> Outcome {
    let Some(base) = config("citeseer") else {
        return Outcome {
            id: 9,
            name: "fusion ablation on Citeseer",
            status: Status::NotRun,
            detail: "citeseer dataset absent".into(),
            gated: false,
        };
    };
    let raw = base.load_graph().unwrap();
    let mut macro_f1 = Vec::new();
    for variant in [FusionVariant::Adaptive, FusionVariant::Average, FusionVariant::Attention] {
        let mut cfg = base.clone();
        cfg.train.model.fusion.variant = variant;
        let ms = map_ordered((0..SEEDS).collect(), threads_from_env(), |seed| fit_cogsl_raw(&raw, &cfg, seed).unwrap().test);
        macro_f1.push(100.0 * mean(&ms, |m| m.f1_macro));
    }
    let ok = macro_f1[0] + 0.3 >= macro_f1[1] && macro_f1[0] + 0.3 >= macro_f1[2];
    let mut o = outcome(
        9,
        "fusion ablation on Citeseer",
        ok,
        format!("adaptive {:.2}, average {:.2}, attention {:.2}", macro_f1[0], macro_f1[1], macro_f1[2]),
    );
    o.gated = false;
    o
}

fn determinism(wine: Option<&DatasetRuns>) -> Outcome {
    let Some(first) = wine else {
        return Outcome { id: 10, name: "byte-identical logs", status: Status::NotRun, detail: "wine dataset absent".into(), gated: true };
    };
    let cfg = config("wine").unwrap();
    let raw = cfg.load_graph().unwrap();
    let again = history_log(&fit_cogsl_raw(&raw, &cfg, 0).unwrap());
    let same = again.as_bytes() == first.first_log.as_bytes();
    outcome(10, "byte-identical logs", same, format!("wine seed 0, {} log bytes", again.len()))
}

fn main() {
    let start = Instant::now();
    let mut outcomes = vec![gradient_suite(), ppr_oracle(), structural_invariants(), infonce_oracle(), metric_oracles()];
    for o in &outcomes {
        report(o);
    }
    let trained: Vec<Option<(DatasetRuns, Graph, RunConfig)>> = ["wine", "cancer", "citeseer"].into_iter().map(train_dataset).collect();
    let runs: Vec<Option<&DatasetRuns>> = trained.iter().map(|t| t.as_ref().map(|(r, _, _)| r)).collect();
    for o in [targets(&runs), dominance(&runs), robustness(trained[1].as_ref()), ablation(), determinism(runs[0])] {
        report(&o);
        outcomes.push(o);
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| o.gated && o.status == Status::Fail).map(|o| o.id).collect();
    println!("acceptance finished in {:.0}s", start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        eprintln!("gated criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
