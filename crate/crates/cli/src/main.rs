//! `fnlp`: generate and label conflict datasets, train the conflict
//! predictor, and evaluate or benchmark extraction methods.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fnlp_core::conflicts::{read_instances, write_instances};
use fnlp_core::domain::{generate_batch, label_batch, GeneratedRecord};
use fnlp_core::eval::{self, subgraph_counts};
use fnlp_core::gnn::{self, predict_all};
use fnlp_core::{
    extract_with_scores, BenchConfig, CachedSolver, Counting, DatasetConfig, DeletionFilter,
    ExpertPrefix, ExtractConfig, FactoredNlp, GnnModel, LabeledInstance, QuickXplain, Reducer,
    Regime, Solver, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "fnlp", version, about)]
struct Cli {
    /// Seed for generation, labeling and training.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML file with `dataset`, `train` and `bench` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenes and action sequences and compile them.
    Gen {
        #[arg(long, default_value = "train")]
        regime: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Label the generated graphs as well.
        #[arg(long)]
        label: bool,
    },
    /// Label generated graphs with up to `max_conflicts` minimal conflicts.
    Label {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the conflict predictor.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accuracy and subgraph-prediction ratios of a model on labeled data.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
    },
    /// Score-guided conflict extraction on every instance.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ReducerArg::G2)]
        reducer: ReducerArg,
        #[arg(long)]
        find_all: bool,
    },
    /// Solve counts and times of the extraction methods on infeasible instances.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Use at most this many infeasible instances.
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
enum ReducerArg {
    G1,
    G2,
    E,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    dataset: DatasetConfig,
    train: TrainConfig,
    bench: BenchConfig,
}

#[derive(Debug, Serialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a, R: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    report: R,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn file_entry(path: &Path) -> Result<FileEntry> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileEntry {
        name: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256_hex(&bytes),
    })
}

struct Ctx {
    seed: u64,
    out: PathBuf,
    config: RunConfig,
}

impl Ctx {
    fn config_hash(&self, command: &impl Serialize) -> String {
        let text =
            serde_json::to_string(&(command, self.seed, &self.config)).expect("config serializes");
        sha256_hex(text.as_bytes())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_manifest<R: Serialize>(
        &self,
        command: &str,
        args: &impl Serialize,
        inputs: &[&Path],
        outputs: &[&Path],
        report: R,
    ) -> Result<()> {
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config_hash: self.config_hash(&(command, args)),
            inputs: inputs
                .iter()
                .map(|p| file_entry(p))
                .collect::<Result<_>>()?,
            outputs: outputs
                .iter()
                .map(|p| file_entry(p))
                .collect::<Result<_>>()?,
            report,
        };
        let path = self.path(&format!("{command}_manifest.json"));
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: RunConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    cfg.dataset
        .solver
        .validate()
        .map_err(anyhow::Error::msg)
        .context("invalid dataset.solver")?;
    cfg.bench
        .solver
        .validate()
        .map_err(anyhow::Error::msg)
        .context("invalid bench.solver")?;
    Ok(cfg)
}

fn read_labeled(path: &Path) -> Result<Vec<LabeledInstance>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_instances(BufReader::new(f))
        .with_context(|| format!("reading instances from {}", path.display()))
}

fn write_labeled(path: &Path, data: &[LabeledInstance]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write_instances(data, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_generated(path: &Path) -> Result<Vec<GeneratedRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GeneratedRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

fn load_model(path: &Path) -> Result<GnnModel> {
    GnnModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn cmd_gen(ctx: &Ctx, regime: &str, n: usize, label: bool) -> Result<()> {
    let regime = Regime::from_name(regime).with_context(|| format!("unknown regime {regime:?}"))?;
    let t = Instant::now();
    let (generated, failed) = generate_batch(regime, n, ctx.seed, &ctx.config.dataset.scene);
    let gen_path = ctx.path("generated.jsonl");
    {
        let mut w = BufWriter::new(File::create(&gen_path)?);
        for g in &generated {
            serde_json::to_writer(&mut w, &g.to_record(regime))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    info!(
        "generated {} instances in {:.1}s",
        generated.len(),
        t.elapsed().as_secs_f64()
    );
    println!(
        "generated {} of {n} {} instances ({failed} failed)",
        generated.len(),
        regime.name()
    );
    let args = (regime.name(), n, label);
    if !label {
        return ctx.write_manifest(
            "gen",
            &args,
            &[],
            &[&gen_path],
            serde_json::json!({ "failed": failed }),
        );
    }
    let graphs: Vec<(FactoredNlp, Option<u64>)> = generated
        .into_iter()
        .map(|g| (g.graph, Some(g.seed)))
        .collect();
    let (data, mut report) = label_batch(&graphs, &ctx.config.dataset);
    report.requested = n;
    report.skipped_errors += failed;
    let out = ctx.path("labeled.jsonl");
    write_labeled(&out, &data)?;
    print_report(&report);
    ctx.write_manifest("gen", &args, &[], &[&gen_path, &out], &report)
}

fn print_report(r: &fnlp_core::DatasetReport) {
    println!(
        "labeled {} of {}: {} infeasible, {} skipped (errors {}, margin {}), labels 0/1 = {}/{}",
        r.written,
        r.requested,
        r.infeasible,
        r.skipped_errors + r.skipped_margin,
        r.skipped_errors,
        r.skipped_margin,
        r.zero_labels,
        r.one_labels
    );
}

fn cmd_label(ctx: &Ctx, data: &Path) -> Result<()> {
    let records = read_generated(data)?;
    let graphs: Vec<(FactoredNlp, Option<u64>)> = records
        .iter()
        .map(|r| Ok((FactoredNlp::from_document(&r.graph)?, Some(r.seed))))
        .collect::<Result<_>>()?;
    let (labeled, report) = label_batch(&graphs, &ctx.config.dataset);
    let out = ctx.path("labeled.jsonl");
    write_labeled(&out, &labeled)?;
    print_report(&report);
    ctx.write_manifest("label", &(), &[data], &[&out], &report)
}

fn cmd_train(ctx: &Ctx, data: &Path, epochs: Option<usize>) -> Result<()> {
    let instances = read_labeled(data)?;
    let mut cfg = ctx.config.train.clone();
    cfg.rng_seed = ctx.seed;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let t = Instant::now();
    let (model, log) = gnn::train_with_progress(&instances, &cfg, |e| {
        info!(
            "epoch {}: train {:.5} val {:.5} ({:.1}, {:.1})",
            e.epoch, e.train_loss, e.val_loss, e.acc_feasible, e.acc_infeasible
        )
    })?;
    let model_path = ctx.path("model.json");
    let log_path = ctx.path("train_log.csv");
    model.save(&model_path)?;
    gnn::write_log(&log, &log_path)?;
    let best = log.epochs.get(log.best_epoch).copied();
    println!(
        "trained {} epochs in {:.1}s on {} instances; best epoch {} (val acc {:.1}/{:.1})",
        log.epochs.len(),
        t.elapsed().as_secs_f64(),
        instances.len(),
        log.best_epoch,
        best.map_or(f64::NAN, |b| b.acc_feasible),
        best.map_or(f64::NAN, |b| b.acc_infeasible)
    );
    ctx.write_manifest(
        "train",
        &cfg,
        &[data],
        &[&model_path, &log_path],
        serde_json::json!({ "best_epoch": log.best_epoch, "pos_weight": log.pos_weight }),
    )
}

#[derive(Debug, Serialize)]
struct EvalReport {
    instances: usize,
    acc_feasible: f64,
    acc_infeasible: f64,
    delta: f64,
    stored: usize,
    found: usize,
    exact: usize,
    predicted: usize,
    predicted_feasible: usize,
    found_over_total: f64,
    minimal_over_found: f64,
    false_infeasible: f64,
}

fn cmd_eval(ctx: &Ctx, model: &Path, data: &Path, delta: f64) -> Result<()> {
    let m = load_model(model)?;
    let instances = read_labeled(data)?;
    let scores = predict_all(&m, &instances)?;
    let (af, ai) = eval::accuracy_from_scores(&instances, &scores);
    let solver = Solver::new(ctx.config.bench.solver.clone());
    let counts = subgraph_counts(&instances, &scores, delta, &solver)?;
    let r = EvalReport {
        instances: instances.len(),
        acc_feasible: af,
        acc_infeasible: ai,
        delta,
        stored: counts.stored,
        found: counts.found,
        exact: counts.exact,
        predicted: counts.predicted,
        predicted_feasible: counts.predicted_feasible,
        found_over_total: counts.found_over_total(),
        minimal_over_found: counts.minimal_over_found(),
        false_infeasible: counts.false_infeasible(),
    };
    let csv = format!(
        "metric,value\ninstances,{}\nacc_feasible,{:.4}\nacc_infeasible,{:.4}\ndelta,{}\nstored,{}\nfound,{}\nexact,{}\npredicted,{}\npredicted_feasible,{}\nfound_over_total,{:.6}\nminimal_over_found,{:.6}\nfalse_infeasible,{:.6}\n",
        r.instances,
        r.acc_feasible,
        r.acc_infeasible,
        r.delta,
        r.stored,
        r.found,
        r.exact,
        r.predicted,
        r.predicted_feasible,
        r.found_over_total,
        r.minimal_over_found,
        r.false_infeasible
    );
    let out = ctx.path("eval.csv");
    fs::write(&out, csv)?;
    println!("accuracy (feasible, infeasible): ({af:.1}, {ai:.1})");
    println!(
        "at delta {delta}: found/total {:.3}, minimal/found {:.3}, false-infeasible {:.3}",
        r.found_over_total, r.minimal_over_found, r.false_infeasible
    );
    ctx.write_manifest("eval", &delta, &[model, data], &[&out], &r)
}

fn cmd_extract(
    ctx: &Ctx,
    model: &Path,
    data: &Path,
    reducer: ReducerArg,
    find_all: bool,
) -> Result<()> {
    let m = load_model(model)?;
    let instances = read_labeled(data)?;
    let solver = Solver::new(ctx.config.bench.solver.clone());
    let cfg = ExtractConfig {
        find_all,
        ..ctx.config.bench.extract.clone()
    };
    let reduce: Box<dyn Reducer> = match reducer {
        ReducerArg::G1 => Box::new(DeletionFilter),
        ReducerArg::G2 => Box::new(QuickXplain),
        ReducerArg::E => Box::new(ExpertPrefix { inner: QuickXplain }),
    };
    let out = ctx.path("extract.jsonl");
    let mut w = BufWriter::new(File::create(&out)?);
    let mut total_solves = 0;
    let mut with_conflict = 0;
    for (i, inst) in instances.iter().enumerate() {
        let scores = m.forward(&inst.graph)?;
        let cached = CachedSolver::new(&solver, &inst.graph);
        let counted = Counting::new(&cached);
        let ex = extract_with_scores(&inst.graph, &scores, &counted, reduce.as_ref(), &cfg)
            .with_context(|| format!("instance {i}"))?;
        total_solves += counted.calls();
        if !ex.conflicts.is_empty() {
            with_conflict += 1;
        }
        let line = serde_json::json!({
            "instance": i,
            "conflicts": ex.conflicts.iter().map(|c| &c.variables).collect::<Vec<_>>(),
            "candidates_solved": ex.candidates_solved,
            "solves": counted.calls(),
        });
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    drop(w);
    println!(
        "{with_conflict} of {} instances yielded a conflict; {total_solves} solves",
        instances.len()
    );
    ctx.write_manifest(
        "extract",
        &(reducer, find_all),
        &[model, data],
        &[&out],
        serde_json::json!({ "instances": instances.len(), "with_conflict": with_conflict, "solves": total_solves }),
    )
}

fn cmd_bench(ctx: &Ctx, model: Option<&Path>, data: &Path, n: usize) -> Result<()> {
    let m = model.map(load_model).transpose()?;
    let instances: Vec<LabeledInstance> = read_labeled(data)?
        .into_iter()
        .filter(|d| !d.conflicts.is_empty())
        .take(n)
        .collect();
    if instances.is_empty() {
        bail!("{} holds no infeasible instance", data.display());
    }
    let mut cfg = ctx.config.bench.clone();
    if m.is_none() {
        cfg.methods.retain(|m| !m.needs_model());
    }
    let report = eval::bench(&instances, m.as_ref(), &cfg)?;
    let counts = ctx.path("bench_counts.csv");
    let timing = ctx.path("bench_timing.csv");
    fs::write(&counts, report.counts_csv())?;
    fs::write(&timing, report.timing_csv())?;
    print!("{}", report.table());
    let failures: usize = report.rows().iter().map(|r| r.failures).sum();
    let mut inputs = vec![data];
    if let Some(p) = model {
        inputs.push(p);
    }
    ctx.write_manifest(
        "bench",
        &(n, cfg.methods.iter().map(|m| m.name()).collect::<Vec<_>>()),
        &inputs,
        &[&counts],
        serde_json::json!({ "instances": instances.len(), "failures": failures }),
    )?;
    if failures > 0 {
        bail!("{failures} method runs failed; see the log");
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let config = load_config(cli.config.as_deref())?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out.clone(),
        config,
    };
    match &cli.command {
        Command::Gen { regime, n, label } => cmd_gen(&ctx, regime, *n, *label),
        Command::Label { data } => cmd_label(&ctx, data),
        Command::Train { data, epochs } => cmd_train(&ctx, data, *epochs),
        Command::Eval { model, data, delta } => cmd_eval(&ctx, model, data, *delta),
        Command::Extract {
            model,
            data,
            reducer,
            find_all,
        } => cmd_extract(&ctx, model, data, *reducer, *find_all),
        Command::Bench { model, data, n } => cmd_bench(&ctx, model.as_deref(), data, *n),
    }
}
