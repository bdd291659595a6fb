//! `archsearch`: compile, train, search, ablate and analyze decoder-block
//! programs. Exit status 0 means the command did its job (degenerate
//! training included), 1 a usage or input error, 2 an internal fault.

mod analyze;
mod run_dir;

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use archsearch_core::compiler::{self, verify_causality, CompileConfig, StackShape};
use archsearch_core::evolution::{run_search, InitMode, SearchConfig, SearchFiles};
use archsearch_core::seeds::{self, ModificationFlag};
use archsearch_core::trainer::{
    curve_csv, evaluate_fitness, Budget, Corpus, EvalConfig, FitnessRecord, NoHurdles, Sizing, TrainConfig,
};
use archsearch_core::{Dna, Guards};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use run_dir::RunDir;

#[derive(Parser)]
#[command(name = "archsearch", version, about = "Evolutionary search over decoder-block programs")]
struct Cli {
    /// Where run directories go when --run-dir is not given.
    #[arg(long, global = true, env = "ARCHSEARCH_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lower a program and report its graph.
    Compile(CompileArgs),
    /// Train one program and record its fitness.
    Train(TrainArgs),
    /// Regularized evolution from a seed program.
    Search(SearchArgs),
    /// Insertion or ablation study over modification flags.
    Ablate(AblateArgs),
    /// Power-law fits, speedups, savings and Pareto fronts.
    Analyze(analyze::AnalyzeArgs),
}

/// Parses parameter counts such as `1500`, `0.5M` or `2k`.
fn parse_count(s: &str) -> Result<usize, String> {
    let t = s.trim();
    let (num, mult) = match t.chars().last() {
        Some('k' | 'K') => (&t[..t.len() - 1], 1e3),
        Some('m' | 'M') => (&t[..t.len() - 1], 1e6),
        Some('b' | 'B' | 'g' | 'G') => (&t[..t.len() - 1], 1e9),
        _ => (t, 1.0),
    };
    let v: f64 = num.parse().map_err(|_| format!("bad count {s:?}"))?;
    if !(v.is_finite() && v >= 0.0) {
        return Err(format!("bad count {s:?}"));
    }
    Ok((v * mult).round() as usize)
}

#[derive(Args, Clone)]
struct SizeArgs {
    /// Fixed scale unit; d_model = unit x d_model_rel.
    #[arg(long, conflicts_with_all = ["min_params", "max_params"])]
    unit: Option<u64>,
    /// Smallest stack parameter count to resize to.
    #[arg(long, value_parser = parse_count, requires = "max_params")]
    min_params: Option<usize>,
    #[arg(long, value_parser = parse_count, requires = "min_params")]
    max_params: Option<usize>,
    #[arg(long, default_value_t = 8)]
    d_model_rel: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    seq: usize,
    /// Untie the input embedding and output projection.
    #[arg(long)]
    untied: bool,
    /// Turn off the numeric guards on DIVIDE, RECIPROCAL, LOG and EXP.
    #[arg(long)]
    no_guards: bool,
}

impl SizeArgs {
    fn sizing(&self, default_unit: u64) -> Sizing {
        match (self.min_params, self.max_params) {
            (Some(min), Some(max)) => Sizing::Params { min, max },
            _ => Sizing::Unit(self.unit.unwrap_or(default_unit)),
        }
    }
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[command(flatten)]
    size: SizeArgs,
    /// Steps (`500`) or wall-clock time (`90s`, `30m`, `7h`).
    #[arg(long, default_value = "500")]
    budget: Budget,
    #[arg(long, default_value_t = 1024)]
    batch_tokens: usize,
    #[arg(long, default_value_t = 50)]
    warmup: u64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Steps between curve samples; 0 samples only at the end.
    #[arg(long, default_value_t = 50)]
    eval_every: u64,
    #[arg(long, default_value_t = 2)]
    eval_batches: usize,
    /// Text file to train on; a bundled synthetic corpus otherwise.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

impl EvalArgs {
    fn eval_config(&self, default_unit: u64) -> EvalConfig {
        let train = TrainConfig {
            batch_tokens: self.batch_tokens,
            seq: self.size.seq,
            budget: self.budget,
            warmup: self.warmup,
            peak_lr: self.lr,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_batches: self.eval_batches,
            ..TrainConfig::default()
        };
        EvalConfig {
            sizing: self.size.sizing(default_unit),
            d_model_rel: self.size.d_model_rel,
            guards_on: !self.size.no_guards,
            layers: self.size.layers,
            tied: !self.size.untied,
            train,
            ..EvalConfig::default()
        }
    }

    fn corpus(&self) -> Result<Corpus> {
        match &self.corpus {
            Some(p) => Corpus::load(p).with_context(|| format!("loading corpus {}", p.display())),
            None => Ok(Corpus::bundled()),
        }
    }

    /// Corpus identity for the config snapshot.
    fn corpus_id(&self) -> Result<String> {
        Ok(match &self.corpus {
            Some(p) => {
                let bytes = std::fs::read(p).with_context(|| format!("reading corpus {}", p.display()))?;
                format!("{} sha256:{}", p.display(), run_dir::sha256_hex(&bytes))
            }
            None => "bundled".into(),
        })
    }
}

/// A `.dna` file, or a built-in seed name such as `transformer`.
fn load_dna(spec: &str) -> Result<Dna> {
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
        return Dna::parse(&text).with_context(|| format!("{spec}: parse error"));
    }
    seeds::seed(spec).ok_or_else(|| anyhow!("no file {spec:?} and no built-in seed of that name ({})", seeds::SEED_NAMES.join(", ")))
}

#[derive(Args)]
struct CompileArgs {
    /// Program file or built-in seed name.
    dna: String,
    #[command(flatten)]
    size: SizeArgs,
    /// Vocabulary size assumed for stack parameter counts.
    #[arg(long, default_value_t = 32000)]
    vocab: usize,
    /// Perturbation trials for the causality check; 0 skips it.
    #[arg(long, default_value_t = 20)]
    causality_trials: usize,
    /// Print every node.
    #[arg(long)]
    dump: bool,
    /// Write the graph in DOT format.
    #[arg(long)]
    dot: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct CompileReport {
    scale_unit: u64,
    d_model: usize,
    nodes: usize,
    block_params: usize,
    stack_params: usize,
    cost_per_token: f64,
    canonical_hash: String,
    causal: Option<bool>,
    ops: Vec<(String, usize)>,
}

fn cmd_compile(a: &CompileArgs) -> Result<i32> {
    let dna = load_dna(&a.dna)?;
    let base = CompileConfig {
        d_model_rel: a.size.d_model_rel,
        seq: a.size.seq,
        guards: if a.size.no_guards { Guards::Off } else { Guards::On },
        ..CompileConfig::default()
    };
    let shape = StackShape { layers: a.size.layers, vocab: a.vocab, tied: !a.size.untied };
    let stem = Path::new(&a.dna).file_stem().map_or(a.dna.clone(), |s| s.to_string_lossy().into_owned());
    let unit = match a.size.sizing(seeds::native_unit(&stem)) {
        Sizing::Unit(u) => u,
        Sizing::Params { min, max } => compiler::resize_to_budget(&dna, min, max, &base, &shape)?.scale_unit,
    };
    let cfg = base.with_unit(unit);
    let compiled = compiler::compile(&dna, &cfg, 0)?;
    let g = &compiled.graph;
    let mut ops: Vec<(String, usize)> = Vec::new();
    for n in &g.nodes {
        let label = n.kind.label();
        match ops.iter_mut().find(|(l, _)| *l == label) {
            Some((_, c)) => *c += 1,
            None => ops.push((label, 1)),
        }
    }
    let causal = (a.causality_trials > 0).then(|| verify_causality(&compiled, a.causality_trials, 0));
    let report = CompileReport {
        scale_unit: unit,
        d_model: cfg.d_model(),
        nodes: g.nodes.len(),
        block_params: g.param_count(),
        stack_params: shape.total_params(g.param_count(), cfg.d_model(), cfg.seq),
        cost_per_token: g.cost_per_token(),
        canonical_hash: format!("{:016x}", g.canonical_hash()),
        causal: causal.as_ref().map(|r| r.passed()),
        ops,
    };
    if let Some(path) = &a.dot {
        std::fs::write(path, g.to_dot()).with_context(|| format!("writing {}", path.display()))?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("scale unit      {} (d_model {})", report.scale_unit, report.d_model);
        println!("nodes           {}", report.nodes);
        println!("block params    {}", report.block_params);
        println!("stack params    {} ({} layers, vocab {})", report.stack_params, a.size.layers, a.vocab);
        println!("cost per token  {:.0}", report.cost_per_token);
        println!("hash            {}", report.canonical_hash);
        match &causal {
            Some(r) if r.passed() => println!("causality       ok ({} trials)", r.trials),
            Some(r) => println!("causality       VIOLATED: {:?}", r.violations[0]),
            None => println!("causality       not checked"),
        }
        println!("ops");
        for (label, count) in &report.ops {
            println!("  {label:<28} {count}");
        }
    }
    if a.dump {
        print!("{}", g.dump());
    }
    Ok(match causal {
        Some(r) if !r.passed() => 1,
        _ => 0,
    })
}

#[derive(Args)]
struct TrainArgs {
    /// Program file or built-in seed name.
    dna: String,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Exit nonzero when training is degenerate.
    #[arg(long)]
    strict: bool,
}

#[derive(Serialize, Deserialize)]
struct TrainSnapshot {
    dna: String,
    corpus: String,
    eval: EvalConfig,
}

fn cmd_train(a: &TrainArgs, root: &Path) -> Result<i32> {
    let dna = load_dna(&a.dna)?;
    let eval = a.eval.eval_config(4);
    eval.train.validate()?;
    let corpus = a.eval.corpus()?;
    let snap = TrainSnapshot { dna: dna.serialize(), corpus: a.eval.corpus_id()?, eval };
    let dir = RunDir::create("train", &snap, a.run_dir.as_deref(), root)?;
    let out = evaluate_fitness(&dna, &eval, &corpus, &mut NoHurdles, 0);
    let timed = matches!(eval.train.budget, Budget::Seconds(_));
    dir.write_text("curve.csv", &curve_csv(&out.curve, timed))?;
    dir.write_json("record.json", &out.record)?;
    print_record(&out.record);
    println!("run directory {}", dir.path.display());
    Ok(if a.strict && out.record.degenerate { 1 } else { 0 })
}

fn print_record(r: &FitnessRecord) {
    let status = if r.degenerate { "DEGENERATE" } else { "ok" };
    println!(
        "{status}: loss {:.4} nats/token, perplexity {:.3}, {} steps, {} params{}",
        r.loss,
        r.perplexity,
        r.steps,
        r.params,
        r.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
    );
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Conceptual,
    Random,
}

#[derive(Args)]
struct SearchArgs {
    /// Seed program file or built-in seed name.
    #[arg(long, default_value = "transformer")]
    seed_program: String,
    #[arg(long, default_value_t = 20)]
    population: usize,
    #[arg(long, default_value_t = 5)]
    tournament: usize,
    #[arg(long, default_value_t = 300)]
    candidates: u64,
    #[arg(long, default_value_t = 0)]
    hurdles: usize,
    /// Fraction of the budget each candidate trains for.
    #[arg(long, default_value_t = 1.0)]
    proxy: f64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    #[arg(long, default_value_t = 0)]
    master_seed: u64,
    #[arg(long, value_enum, default_value_t = InitArg::Conceptual)]
    init: InitArg,
    /// Skip training candidates costlier than this multiple of the seed.
    #[arg(long, default_value_t = 16.0)]
    cost_cap: f64,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue the run in --run-dir from its checkpoint. Only
    /// --candidates may differ from the original run.
    #[arg(long, requires = "run_dir")]
    resume: bool,
}

#[derive(Serialize, Deserialize)]
struct SearchSnapshot {
    seed_dna: String,
    corpus: String,
    corpus_path: Option<PathBuf>,
    search: SearchConfig,
    eval: EvalConfig,
}

fn cmd_search(a: &SearchArgs, root: &Path) -> Result<i32> {
    let snap = if a.resume {
        let dir = a.run_dir.as_deref().expect("clap requires --run-dir");
        let mut s: SearchSnapshot = RunDir::load_snapshot(dir, "search")?;
        if a.candidates < s.search.candidates {
            bail!("--candidates {} is below the {} already configured", a.candidates, s.search.candidates);
        }
        s.search.candidates = a.candidates;
        s
    } else {
        let seed = load_dna(&a.seed_program)?;
        let eval = a.eval.eval_config(2);
        let search = SearchConfig {
            population: a.population,
            tournament: a.tournament,
            candidates: a.candidates,
            hurdles: a.hurdles,
            proxy_fraction: a.proxy,
            workers: a.workers,
            top_n: a.top_n,
            seed: a.master_seed,
            init: match a.init {
                InitArg::Conceptual => InitMode::Conceptual,
                InitArg::Random => InitMode::Random,
            },
            cost_cap: (a.cost_cap > 0.0).then_some(a.cost_cap),
            ..SearchConfig::default()
        };
        search.validate()?;
        eval.train.validate()?;
        SearchSnapshot {
            seed_dna: seed.serialize(),
            corpus: a.eval.corpus_id()?,
            corpus_path: a.eval.corpus.clone(),
            search,
            eval,
        }
    };
    let corpus = match &snap.corpus_path {
        Some(p) => Corpus::load(p).with_context(|| format!("loading corpus {}", p.display()))?,
        None => Corpus::bundled(),
    };
    let seed = Dna::parse(&snap.seed_dna)?;
    let planned = RunDir::plan("search", &snap, a.run_dir.as_deref(), root)?;
    let files = SearchFiles::in_dir(&planned.dir.path);
    if !a.resume && files.log.exists() {
        bail!("{} already holds a search log; pass --resume to continue it", planned.dir.path.display());
    }
    let dir = planned.init()?;
    let result = run_search(&seed, &snap.search, &snap.eval, &corpus, Some(&files), a.resume)?;
    let top_dir = dir.file("top");
    if top_dir.exists() {
        std::fs::remove_dir_all(&top_dir)?;
    }
    for (rank, e) in result.top.iter().enumerate() {
        dir.write_text(&format!("top/{:02}_candidate_{}.dna", rank + 1, e.id), &e.dna)?;
    }
    let summary: Vec<_> = result
        .top
        .iter()
        .map(|e| serde_json::json!({ "id": e.id, "fitness": e.fitness, "params": e.params, "degenerate": e.degenerate }))
        .collect();
    dir.write_json("top.json", &serde_json::json!({ "candidates": result.log.len(), "top": summary }))?;
    println!("{} log entries; best:", result.log.len());
    for e in result.top.iter().take(5) {
        println!("  candidate {:>5}  loss {:.4}  params {}", e.id, e.fitness, e.params);
    }
    println!("run directory {}", dir.path.display());
    Ok(0)
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
enum AblateMode {
    /// Add each flag to the base program on its own.
    Insertion,
    /// Apply all flags, then leave each one out.
    Ablation,
}

#[derive(Args)]
struct AblateArgs {
    /// Base program file or built-in seed name.
    dna: String,
    /// Comma-separated modification flags, e.g. SQUARED_RELU,MDHA.
    #[arg(long, value_delimiter = ',')]
    flags: Vec<String>,
    #[arg(long, value_enum, default_value_t = AblateMode::Insertion)]
    mode: AblateMode,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct AblateSnapshot {
    dna: String,
    flags: Vec<ModificationFlag>,
    mode: AblateMode,
    corpus: String,
    eval: EvalConfig,
}

/// Normalized perplexity delta; positive means the flag helps in both modes.
fn normalized_delta(mode: AblateMode, base: f64, variant: f64) -> f64 {
    match mode {
        AblateMode::Insertion => (base - variant) / base,
        AblateMode::Ablation => (variant - base) / base,
    }
}

fn apply_flags(dna: &Dna, flags: &[ModificationFlag]) -> Result<Dna, String> {
    flags.iter().try_fold(dna.clone(), |d, &f| seeds::apply_modification(&d, f).map_err(|e| e.to_string()))
}

fn cmd_ablate(a: &AblateArgs, root: &Path) -> Result<i32> {
    let dna = load_dna(&a.dna)?;
    let flags = a
        .flags
        .iter()
        .filter(|f| !f.trim().is_empty())
        .map(|f| ModificationFlag::from_name(f.trim()).ok_or_else(|| anyhow!("unknown modification flag {f:?}")))
        .collect::<Result<Vec<_>>>()?;
    let eval = a.eval.eval_config(2);
    eval.train.validate()?;
    let corpus = a.eval.corpus()?;
    let snap = AblateSnapshot { dna: dna.serialize(), flags: flags.clone(), mode: a.mode, corpus: a.eval.corpus_id()?, eval };
    let dir = RunDir::create("ablate", &snap, a.run_dir.as_deref(), root)?;

    // In ablation mode the reference program carries every applicable flag.
    let mut skipped: Vec<(ModificationFlag, String)> = Vec::new();
    let mut active = Vec::new();
    for &f in &flags {
        match seeds::apply_modification(&dna, f) {
            Ok(_) => active.push(f),
            Err(e) => skipped.push((f, e.to_string())),
        }
    }
    let base_dna = match a.mode {
        AblateMode::Insertion => dna.clone(),
        AblateMode::Ablation => apply_flags(&dna, &active).map_err(|e| anyhow!("combining flags: {e}"))?,
    };
    let mut id = 0;
    let mut run = |d: &Dna| {
        id += 1;
        evaluate_fitness(d, &eval, &corpus, &mut NoHurdles, id).record
    };
    let base = run(&base_dna);
    let mut csv = String::from("mode,variant,flag,loss,perplexity,degenerate,normalized_pplx_delta,status\n");
    let mode = match a.mode {
        AblateMode::Insertion => "insertion",
        AblateMode::Ablation => "ablation",
    };
    csv.push_str(&format!("{mode},baseline,,{},{},{},0,ok\n", base.loss, base.perplexity, base.degenerate));
    println!("baseline: perplexity {:.3}", base.perplexity);
    for &f in &active {
        let variant = match a.mode {
            AblateMode::Insertion => seeds::apply_modification(&dna, f).map_err(|e| e.to_string()),
            AblateMode::Ablation => {
                let rest: Vec<_> = active.iter().copied().filter(|&g| g != f).collect();
                apply_flags(&dna, &rest)
            }
        };
        let name = if a.mode == AblateMode::Insertion { format!("+{f}") } else { format!("-{f}") };
        match variant {
            Ok(v) => {
                let r = run(&v);
                let delta = normalized_delta(a.mode, base.perplexity, r.perplexity);
                csv.push_str(&format!("{mode},{name},{f},{},{},{},{delta},ok\n", r.loss, r.perplexity, r.degenerate));
                println!("{name:<32} perplexity {:.3}  delta {delta:+.4}", r.perplexity);
            }
            Err(e) => {
                csv.push_str(&format!("{mode},{name},{f},,,,,skipped: {}\n", e.replace(',', ";")));
                println!("{name:<32} skipped: {e}");
            }
        }
    }
    for (f, e) in &skipped {
        let name = if a.mode == AblateMode::Insertion { format!("+{f}") } else { format!("-{f}") };
        csv.push_str(&format!("{mode},{name},{f},,,,,skipped: {}\n", e.replace(',', ";")));
        println!("{name:<32} skipped: {e}");
    }
    dir.write_text("ablation.csv", &csv)?;
    println!("run directory {}", dir.path.display());
    Ok(0)
}

fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Compile(a) => cmd_compile(a),
        Command::Train(a) => cmd_train(a, &cli.run_root),
        Command::Search(a) => cmd_search(a, &cli.run_root),
        Command::Ablate(a) => cmd_ablate(a, &cli.run_root),
        Command::Analyze(a) => analyze::cmd_analyze(a, &cli.run_root),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    panic::set_hook(Box::new(|info| eprintln!("internal error: {info}")));
    match panic::catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(code)) => ExitCode::from(code as u8),
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(_) => ExitCode::from(2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_accept_suffixes() {
        assert_eq!(parse_count("1500"), Ok(1500));
        assert_eq!(parse_count("0.5M"), Ok(500_000));
        assert_eq!(parse_count("2k"), Ok(2000));
        assert!(parse_count("lots").is_err());
    }

    #[test]
    fn deltas_are_positive_for_helpful_flags() {
        assert!(normalized_delta(AblateMode::Insertion, 10.0, 8.0) > 0.0);
        assert!(normalized_delta(AblateMode::Ablation, 8.0, 10.0) > 0.0);
        assert_eq!(normalized_delta(AblateMode::Insertion, 10.0, 8.0), 0.2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
