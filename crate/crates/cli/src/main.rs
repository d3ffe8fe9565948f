use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use cogsl::config::{basic_views, build_model, structure_graph, RunConfig};
use cogsl::experiment::{self, map_ordered, summarize, threads_from_env, Summary};
use cogsl::graph::{Graph, Split};
use cogsl::metrics::Metrics;
use cogsl::ndiff::{ParamSet, Tape};
use cogsl::robustness::{run_defense_suite, AttackKind, AttackSpec, SuiteOptions, Target};
use cogsl::trainer::{IterationRecord, Trainer};
use cogsl::{gradcheck, Error};

#[derive(Parser)]
#[command(name = "cogsl", version, about = "Compact graph structure learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Config override as a dotted key, e.g. `--set train.eta=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seeds: `3`, `0..9` (inclusive) or `1,4,7`. Defaults to the config's seeds.
    #[arg(long)]
    seed: Option<String>,
    /// Output directory; defaults to the config's `output`, else `cogsl-out/<dataset>`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train over the configured seeds and report test metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also train the plain GCN on the first basic view.
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Poisoning attacks: retrain CoGSL variants and the GCN on perturbed inputs.
    Attack {
        #[command(flatten)]
        common: Common,
        /// edge_delete, edge_add or feature_noise.
        #[arg(long)]
        attack: String,
        /// Comma-separated rates; defaults to the attack's standard grid.
        #[arg(long, value_delimiter = ',')]
        rates: Vec<f64>,
        /// Permit rates outside the standard grid.
        #[arg(long)]
        allow_any_rate: bool,
        /// Also train every model on the clean inputs.
        #[arg(long)]
        clean: bool,
        #[arg(long, default_value_t = 0)]
        attack_seed: u64,
    },
    /// Retrain for each value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// eta, h (top-h scope), k (k-hop scope), lambda, mu, or any dotted config key.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Construct and dump views.
    Views {
        #[command(subcommand)]
        action: ViewsAction,
    },
    /// Per-node fusion weights of a trained model.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write `node,beta1,beta2` rows.
        #[arg(long)]
        dump_beta: bool,
    },
    /// Pairwise contrastive losses between the fused and estimated views.
    Mi {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Include the per-iteration history when training.
        #[arg(long)]
        report: bool,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Scale analytic gradients; any value other than 1 must fail.
        #[arg(long, hide = true, default_value_t = 1.0)]
        corrupt: f64,
    },
}

#[derive(Subcommand)]
enum ViewsAction {
    /// Write the basic views, and the learned views when a checkpoint is given.
    Dump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Run(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, baseline } => cmd_train(&common, baseline),
        Command::Eval { common, checkpoint, split } => cmd_eval(&common, &checkpoint, &split),
        Command::Attack { common, attack, rates, allow_any_rate, clean, attack_seed } => {
            cmd_attack(&common, &attack, &rates, allow_any_rate, clean, attack_seed)
        }
        Command::Sweep { common, param, values } => cmd_sweep(&common, &param, &values),
        Command::Views { action: ViewsAction::Dump { common, checkpoint } } => cmd_views_dump(&common, checkpoint.as_deref()),
        Command::Fuse { common, checkpoint, dump_beta } => cmd_fuse(&common, checkpoint.as_deref(), dump_beta),
        Command::Mi { common, checkpoint, report } => cmd_mi(&common, checkpoint.as_deref(), report),
        Command::Gradcheck { corrupt } => cmd_gradcheck(corrupt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Check) => ExitCode::from(1),
    }
}

fn parse_seeds(spec: &str) -> std::result::Result<Vec<u64>, Failure> {
    let bad = || Failure::Usage(format!("bad seed list {spec:?}; use 3, 0..9 or 1,4,7"));
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn load_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    if !common.config.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", common.config.display())));
    }
    let mut cfg = RunConfig::load(&common.config).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut overrides = Vec::new();
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("override {kv:?} is not KEY=VALUE")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    if !overrides.is_empty() {
        cfg = cfg.with_overrides(&overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(s) = &common.seed {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(o) = &common.output {
        cfg.output = Some(o.clone());
    }
    if !cfg.dataset.is_dir() {
        return Err(Failure::Usage(format!("dataset directory {} not found", cfg.dataset.display())));
    }
    Ok(cfg)
}

fn dataset_name(cfg: &RunConfig) -> String {
    cfg.dataset.file_name().and_then(|s| s.to_str()).unwrap_or("dataset").to_string()
}

fn output_dir(cfg: &RunConfig) -> std::io::Result<PathBuf> {
    let dir = cfg.output.clone().unwrap_or_else(|| Path::new("cogsl-out").join(dataset_name(cfg)));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn print_line(line: &str) {
    // One locked write per line keeps worker output unmangled.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn fmt_summary(label: &str, s: &Summary) -> String {
    format!(
        "{label}: f1_macro {:.2} ± {:.2}  f1_micro {:.2} ± {:.2}  auc {:.2} ± {:.2}  ({} runs)",
        100.0 * s.f1_macro.mean,
        100.0 * s.f1_macro.std,
        100.0 * s.f1_micro.mean,
        100.0 * s.f1_micro.std,
        100.0 * s.auc.mean,
        100.0 * s.auc.std,
        s.runs
    )
}

#[derive(Serialize)]
struct SeedResult {
    seed: u64,
    best_iteration: Option<usize>,
    test: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<Metrics>,
}

struct TrainedSeed {
    result: SeedResult,
    history: Vec<IterationRecord>,
    params: ParamSet,
}

fn train_seed(raw: &Graph, cfg: &RunConfig, seed: u64, baseline: bool) -> cogsl::Result<TrainedSeed> {
    let run = experiment::fit_cogsl_raw(raw, cfg, seed)?;
    let baseline = if baseline { Some(experiment::fit_baseline_raw(raw, cfg, seed)?) } else { None };
    print_line(&format!(
        "seed {seed}: f1_macro {:.2} f1_micro {:.2} auc {:.2}",
        100.0 * run.test.f1_macro,
        100.0 * run.test.f1_micro,
        100.0 * run.test.auc
    ));
    Ok(TrainedSeed {
        result: SeedResult { seed, best_iteration: run.trainer.best().map(|b| b.iteration), test: run.test, baseline },
        history: run.trainer.history().to_vec(),
        params: run.trainer.params().clone(),
    })
}

fn cmd_train(common: &Common, baseline: bool) -> Outcome {
    let cfg = load_config(common)?;
    let raw = cfg.load_graph()?;
    let dir = output_dir(&cfg)?;
    let results = map_ordered(cfg.seeds.clone(), threads_from_env(), |seed| train_seed(&raw, &cfg, seed, baseline));
    let runs = experiment::collect(results)?;
    for r in &runs {
        let mut log = String::new();
        for rec in &r.history {
            log.push_str(&serde_json::to_string(rec)?);
            log.push('\n');
        }
        fs::write(dir.join(format!("metrics_seed{}.jsonl", r.result.seed)), log)?;
        let mut ckpt = Vec::new();
        r.params.write_checkpoint(&mut ckpt)?;
        fs::write(dir.join(format!("checkpoint_seed{}.bin", r.result.seed)), ckpt)?;
    }
    let summary = summarize(&runs.iter().map(|r| r.result.test).collect::<Vec<_>>());
    let base: Vec<Metrics> = runs.iter().filter_map(|r| r.result.baseline).collect();
    let base_summary = (!base.is_empty()).then(|| summarize(&base));
    let report = json!({
        "dataset": dataset_name(&cfg),
        "config": cfg,
        "runs": runs.iter().map(|r| &r.result).collect::<Vec<_>>(),
        "summary": summary,
        "baseline_summary": base_summary,
    });
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    print_line(&fmt_summary("cogsl", &summary));
    if let Some(b) = base_summary {
        print_line(&fmt_summary("gcn", &b));
    }
    print_line(&format!("wrote {}", dir.display()));
    Ok(())
}

fn load_checkpoint(path: &Path) -> std::result::Result<ParamSet, Failure> {
    let file = fs::File::open(path).map_err(|e| Failure::Usage(format!("checkpoint {}: {e}", path.display())))?;
    Ok(ParamSet::read_checkpoint(std::io::BufReader::new(file))?)
}

fn single_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds[0]
}

/// Trainer for the first configured seed, either restored from a checkpoint
/// or freshly trained.
fn trained(cfg: &RunConfig, raw: &Graph, checkpoint: Option<&Path>) -> std::result::Result<(Graph, Trainer), Failure> {
    let seed = single_seed(cfg);
    let (graph, model) = build_model(raw, cfg, seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let mut trainer = Trainer::new(model, &graph, tc)?;
    match checkpoint {
        Some(p) => trainer.set_params(load_checkpoint(p)?),
        None => trainer.train()?,
    }
    Ok((graph, trainer))
}

fn cmd_eval(common: &Common, checkpoint: &Path, split: &str) -> Outcome {
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(Failure::Usage(format!("unknown split {other:?}"))),
    };
    let cfg = load_config(common)?;
    let raw = cfg.load_graph()?;
    let (graph, trainer) = trained(&cfg, &raw, Some(checkpoint))?;
    let m = trainer.evaluate(&graph, split)?;
    print_line(&serde_json::to_string(&m)?);
    Ok(())
}

fn cmd_attack(common: &Common, attack: &str, rates: &[f64], allow_any_rate: bool, clean: bool, attack_seed: u64) -> Outcome {
    let kind = AttackKind::parse(attack).map_err(|e| Failure::Usage(e.to_string()))?;
    let rates = if rates.is_empty() { kind.standard_rates().to_vec() } else { rates.to_vec() };
    let target = if kind == AttackKind::FeatureNoise { Target::Features } else { Target::Both };
    let grid: Vec<AttackSpec> = rates.iter().map(|&rate| AttackSpec { kind, rate, target, seed: attack_seed, allow_any_rate }).collect();
    for s in &grid {
        s.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let cfg = load_config(common)?;
    let raw = cfg.load_graph()?;
    let opts = SuiteOptions { dataset: dataset_name(&cfg), include_clean: clean, threads: threads_from_env() };
    let report = run_defense_suite(&raw, &grid, &cfg, &opts)?;
    let dir = output_dir(&cfg)?;
    let path = dir.join(format!("attack_{}.csv", kind.name()));
    fs::write(&path, report.to_csv())?;
    for line in report.summary_table().lines() {
        print_line(line);
    }
    print_line(&format!("wrote {}", path.display()));
    Ok(())
}

fn sweep_key(param: &str) -> std::result::Result<&str, Failure> {
    Ok(match param {
        "eta" => "train.eta",
        "h" | "top_h" => "view.top_h",
        "k" | "khop" => "view.khop",
        "lambda" => "train.model.fusion.lambda",
        "mu" => "train.model.mu",
        key if key.contains('.') => key,
        other => {
            return Err(Failure::Usage(format!("unknown sweep parameter {other:?}; use eta, h, k, lambda, mu or a dotted config key")))
        }
    })
}

fn cmd_sweep(common: &Common, param: &str, values: &[String]) -> Outcome {
    let key = sweep_key(param)?;
    let base = load_config(common)?;
    let mut configs = Vec::new();
    for v in values {
        let raw_value = if param == "mu" { format!("[{v},{v}]") } else { v.clone() };
        let cfg = base.with_overrides(&[(key.to_string(), raw_value)]).map_err(|e| Failure::Usage(e.to_string()))?;
        configs.push((v.clone(), cfg));
    }
    let raw = base.load_graph()?;
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|i| base.seeds.iter().map(move |&s| (i, s))).collect();
    let results =
        map_ordered(jobs.clone(), threads_from_env(), |(i, seed)| experiment::fit_cogsl_raw(&raw, &configs[i].1, seed).map(|r| r.test));
    let metrics = experiment::collect(results)?;
    let mut csv = String::from("param,value,seed,f1_macro,f1_micro,auc,accuracy\n");
    for ((i, seed), m) in jobs.iter().zip(&metrics) {
        csv.push_str(&format!("{param},{},{seed},{},{},{},{}\n", configs[*i].0, m.f1_macro, m.f1_micro, m.auc, m.accuracy));
    }
    for (i, (v, _)) in configs.iter().enumerate() {
        let ms: Vec<Metrics> = jobs.iter().zip(&metrics).filter(|((j, _), _)| *j == i).map(|(_, m)| *m).collect();
        print_line(&fmt_summary(&format!("{param}={v}"), &summarize(&ms)));
    }
    let dir = output_dir(&base)?;
    let path = dir.join(format!("sweep_{}.csv", param.replace('.', "_")));
    fs::write(&path, csv)?;
    print_line(&format!("wrote {}", path.display()));
    Ok(())
}

fn cmd_views_dump(common: &Common, checkpoint: Option<&Path>) -> Outcome {
    let cfg = load_config(common)?;
    let raw = cfg.load_graph()?;
    let dir = output_dir(&cfg)?;
    let seed = single_seed(&cfg);
    let graph = structure_graph(&raw, &cfg.view)?;
    let (views, _) = basic_views(&graph, cfg.views, &cfg.view, seed)?;
    for (k, v) in views.iter().enumerate() {
        let path = dir.join(format!("view{}_{}.txt", k + 1, cfg.views[k].name()));
        fs::write(&path, v.to_text())?;
        print_line(&format!("{}: {} nodes, {} entries -> {}", cfg.views[k].name(), v.n(), v.nnz(), path.display()));
    }
    if let Some(ckpt) = checkpoint {
        let (_, trainer) = trained(&cfg, &raw, Some(ckpt))?;
        let m = trainer.model().materialize(trainer.params())?;
        for (name, v) in [("estimated1", &m.estimated[0]), ("estimated2", &m.estimated[1]), ("fused", &m.fused)] {
            let path = dir.join(format!("{name}.txt"));
            fs::write(&path, v.to_text())?;
            print_line(&format!("{name}: {} entries -> {}", v.nnz(), path.display()));
        }
    }
    Ok(())
}

fn cmd_fuse(common: &Common, checkpoint: Option<&Path>, dump_beta: bool) -> Outcome {
    let cfg = load_config(common)?;
    let raw = cfg.load_graph()?;
    let (_, trainer) = trained(&cfg, &raw, checkpoint)?;
    let frozen = trainer.model().frozen(trainer.params())?;
    let beta = frozen.beta.data();
    let s = experiment::mean_std(beta);
    print_line(&format!("beta1 mean {:.4} std {:.4} over {} nodes", s.mean, s.std, beta.len()));
    if dump_beta {
        let mut csv = String::from("node,beta1,beta2\n");
        for (i, b) in beta.iter().enumerate() {
            csv.push_str(&format!("{i},{b},{}\n", 1.0 - b));
        }
        let dir = output_dir(&cfg)?;
        let path = dir.join("beta.csv");
        fs::write(&path, csv)?;
        print_line(&format!("wrote {}", path.display()));
    }
    Ok(())
}

fn cmd_mi(common: &Common, checkpoint: Option<&Path>, report: bool) -> Outcome {
    let cfg = load_config(common)?;
    let raw = cfg.load_graph()?;
    let (_, trainer) = trained(&cfg, &raw, checkpoint)?;
    let model = trainer.model();
    let frozen = model.frozen(trainer.params())?;
    let mut tape = Tape::new();
    let bound = trainer.params().bind(&mut tape, &[]);
    let batch = Arc::new((0..model.n_nodes()).collect::<Vec<_>>());
    let (total, terms) = model.loss_mi_frozen(&mut tape, &bound, &frozen, &batch)?;
    let [a, b, c] = terms.map(|t| tape.value(t).item());
    let mut out = json!({
        "total": tape.value(total).item(),
        "fused_first": a,
        "fused_second": b,
        "first_second": c,
        "ln_batch": (model.n_nodes() as f64).ln(),
    });
    if report {
        let history: Vec<_> = trainer.history().iter().map(|r| json!({"iteration": r.iteration, "terms": r.mi_terms})).collect();
        out["history"] = json!(history);
    }
    print_line(&serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_gradcheck(corrupt: f64) -> Outcome {
    let report = gradcheck::run_suite(corrupt)?;
    for line in report.render().lines() {
        print_line(line);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}
