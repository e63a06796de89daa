//! `mico`: generate data, split it, train, evaluate and run ablations.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.

use std::fmt;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mico::config::RunConfig;
use mico::data::{
    generate_all, load_dataset, save_dataset, stratified_split, write_manifest, LatentOracle, PairDataset, SyntheticSpec, World,
};
use mico::eval::{ablation_csv, evaluate, oracle_retrieval, run_ablation, AblationAxis, AblationGrid, EvalReport};
use mico::train::{Checkpoint, Trainer, TrainingSet};
use mico::Error;

#[derive(Parser)]
#[command(name = "mico", version, about = "Multimodal-context pretraining on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed, which drives every random stream.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and evaluation datasets with their manifests.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a stratified subset of a dataset.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write metrics.jsonl plus checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset files or directories of `.mico` files.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Objective list such as `con` or `con+match+gen`.
        #[arg(long)]
        objectives: Option<String>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; its saved config is the base when --config is absent.
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Report path.
        #[arg(long)]
        out: PathBuf,
        /// Overrides eval.rerank_k.
        #[arg(long)]
        rerank_k: Option<usize>,
        /// Score with the reference encoder that knows the generating maps.
        #[arg(long)]
        oracle: bool,
    },
    /// Train and evaluate every cell of an ablation axis and write a CSV.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// modalities, data_scale, objectives or model_scale.
        #[arg(long)]
        axis: String,
        /// Training datasets (files or directories).
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Evaluation datasets (files or directories).
        #[arg(long, required = true, num_args = 1..)]
        eval_data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Restrict to these row labels, comma-separated.
        #[arg(long)]
        rows: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn usage(e: impl fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

fn data(e: impl fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

/// Numeric failures exit 3, config mismatches 1, everything else 2.
fn classify(e: Error) -> Failure {
    let code = match &e {
        Error::NonFinite(_) => 3,
        Error::Config { .. } | Error::ParamMismatch(_) => 1,
        _ => 2,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Holds `<out>/.mico.lock` for the lifetime of a command.
struct OutLock(PathBuf);

impl OutLock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| data(format!("{}: {e}", dir.display())))?;
        let path = dir.join(".mico.lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|_| usage(format!("{} is locked by another invocation ({})", dir.display(), path.display())))?;
        Ok(Self(path))
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Expands directories into their `.mico` files in name order.
fn dataset_paths(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| data(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "mico"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(data(format!("{}: no .mico files", p.display())));
            }
            out.extend(files);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(data(format!("{}: no such file", p.display())));
        }
    }
    Ok(out)
}

fn load_all(inputs: &[PathBuf]) -> CliResult<Vec<PairDataset>> {
    dataset_paths(inputs)?
        .iter()
        .map(|p| load_dataset(p).map_err(|e| data(e)))
        .collect()
}

fn print_counts(ds: &PairDataset) {
    let counts: Vec<String> = ds.category_counts().iter().map(|(c, n)| format!("{c}:{n}")).collect();
    println!("{} records={} per-category {}", ds.id, ds.len(), counts.join(" "));
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| data(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn gen_data(common: Common, out: PathBuf) -> CliResult {
    let cfg = load_config(&common)?;
    cfg.validate().map_err(usage)?;
    let _lock = OutLock::acquire(&out)?;
    let (train, eval) = generate_all(&SyntheticSpec::from_config(&cfg)).map_err(classify)?;
    for (dir, sets) in [("train", &train), ("eval", &eval)] {
        let d = out.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| data(format!("{}: {e}", d.display())))?;
        for ds in sets {
            save_dataset(ds, &d.join(format!("{}.mico", ds.id))).map_err(classify)?;
            write_manifest(ds, &d.join(format!("{}.manifest", ds.id))).map_err(classify)?;
            print!("{dir}/");
            print_counts(ds);
        }
    }
    write_file(&out.join("config.txt"), cfg.serialize().as_bytes())
}

fn split(input: PathBuf, size: usize, seed: u64, out: PathBuf) -> CliResult {
    let ds = load_dataset(&input).map_err(data)?;
    if size > ds.len() {
        return Err(data(format!("requested {size} records from a dataset of {}", ds.len())));
    }
    let sub = stratified_split(&ds, size, seed).map_err(classify)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| data(format!("{}: {e}", parent.display())))?;
    }
    save_dataset(&sub, &out).map_err(classify)?;
    print_counts(&sub);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    common: Common,
    data_paths: Vec<PathBuf>,
    out: PathBuf,
    steps: Option<usize>,
    objectives: Option<String>,
    resume: Option<PathBuf>,
) -> CliResult {
    let mut cfg = load_config(&common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(list) = objectives {
        cfg.objectives.set_enabled(&list).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    let datasets = load_all(&data_paths)?;
    let refs: Vec<&PairDataset> = datasets.iter().collect();
    let set = TrainingSet::new(&refs, &cfg).map_err(data)?;
    let _lock = OutLock::acquire(&out)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(&p).map_err(data)?;
            Trainer::resume(cfg.clone(), ckpt).map_err(classify)?
        }
        None => Trainer::new(cfg.clone()).map_err(classify)?,
    };
    write_file(&out.join("config.txt"), cfg.serialize().as_bytes())?;
    let total = cfg.train.steps;
    let report_every = (total / 10).max(1);
    let records = trainer
        .run(&set, Some(&out), |r| {
            let m = &r.metrics;
            if m.step as usize % report_every == 0 || m.step as usize == total {
                eprintln!(
                    "step {:>6}  total {:.4}  con {:.4}  match {:.4}  gen {:.4}  lr {:.2e}",
                    m.step, m.total, m.l_con, m.l_match, m.l_gen, m.lr
                );
            }
        })
        .map_err(classify)?;
    println!(
        "trained {} steps to step {}; final checkpoint {}",
        records.len(),
        trainer.step,
        out.join("final.mick").display()
    );
    Ok(())
}

fn print_report(r: &EvalReport) {
    for x in &r.retrieval {
        println!(
            "{} {:?}: R@1 pre {:.4} post {:.4} (R@5 {:.4}, R@10 {:.4}, {} candidates)",
            x.dataset, x.direction, x.pre.r1, x.post.r1, x.post.r5, x.post.r10, x.candidates
        );
    }
    for m in &r.masked_accuracy {
        println!("{} masked-caption accuracy {:.4} ({}/{})", m.dataset, m.accuracy, m.correct, m.targets);
    }
    println!("mean text->X R@1 pre {:.4} post {:.4}", r.mean_r1_pre, r.mean_r1_post);
}

fn eval(
    common: Common,
    checkpoint: Option<PathBuf>,
    data_paths: Vec<PathBuf>,
    out: PathBuf,
    rerank_k: Option<usize>,
    oracle: bool,
) -> CliResult {
    let ckpt = match &checkpoint {
        Some(p) if !oracle => Some(Checkpoint::load(p).map_err(data)?),
        _ => None,
    };
    let mut cfg = match (&common.config, &ckpt) {
        (None, Some(c)) => RunConfig::parse(&c.config).map_err(usage)?,
        _ => load_config(&common)?,
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(k) = rerank_k {
        cfg.eval.rerank_k = k;
    }
    cfg.validate().map_err(usage)?;
    let sets = load_all(&data_paths)?;
    let refs: Vec<&PairDataset> = sets.iter().collect();
    let report = if oracle {
        let world = World::new(&SyntheticSpec::from_config(&cfg)).map_err(classify)?;
        let oracle = LatentOracle::new(&world).map_err(classify)?;
        let mut retrieval = Vec::new();
        for ds in &refs {
            retrieval.extend(oracle_retrieval(&oracle, ds, cfg.eval.rerank_k).map_err(classify)?);
        }
        EvalReport {
            mean_r1_pre: mico::eval::mean_r1(&retrieval, false),
            mean_r1_post: mico::eval::mean_r1(&retrieval, true),
            retrieval,
            masked_accuracy: Vec::new(),
            decoded: Vec::new(),
        }
    } else {
        let ckpt = ckpt.expect("checkpoint required without --oracle");
        let trainer = Trainer::resume(cfg.clone(), ckpt).map_err(classify)?;
        evaluate(&trainer.model, &cfg, &refs, true).map_err(classify)?
    };
    print_report(&report);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out, json.as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    common: Common,
    axis: String,
    data_paths: Vec<PathBuf>,
    eval_paths: Vec<PathBuf>,
    out: PathBuf,
    seeds: String,
    rows: Option<String>,
    steps: Option<usize>,
) -> CliResult {
    let axis: AblationAxis = axis.parse().map_err(usage)?;
    let mut cfg = load_config(&common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.validate().map_err(usage)?;
    let seeds = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| usage(format!("bad seed `{s}`"))))
        .collect::<CliResult<Vec<_>>>()?;
    let mut grid = AblationGrid::standard(axis, &cfg, seeds);
    if let Some(keep) = rows {
        let keep: Vec<&str> = keep.split(',').map(str::trim).collect();
        grid.cells.retain(|c| keep.contains(&c.label.as_str()));
        if grid.cells.is_empty() {
            return Err(usage(format!("no {axis} rows match {keep:?}")));
        }
    }
    let train = load_all(&data_paths)?;
    let eval = load_all(&eval_paths)?;
    let _lock = OutLock::acquire(&out)?;
    let rows = run_ablation(
        &grid,
        &cfg,
        &train.iter().collect::<Vec<_>>(),
        &eval.iter().collect::<Vec<_>>(),
        |label, seed, scores| eprintln!("row {label} seed {seed}: R@1 {scores:?}"),
    )
    .map_err(classify)?;
    for r in &rows {
        println!("({}) {}: mean R@1 {:.4}", r.label, r.delta, r.mean_r1);
    }
    let path = out.join(format!("ablation-{axis}.csv"));
    write_file(&path, ablation_csv(&rows).as_bytes())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { common, out } => gen_data(common, out),
        Command::Split { input, size, seed, out } => split(input, size, seed, out),
        Command::Train {
            common,
            data,
            out,
            steps,
            objectives,
            resume,
        } => train(common, data, out, steps, objectives, resume),
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            rerank_k,
            oracle,
        } => eval(common, checkpoint, data, out, rerank_k, oracle),
        Command::Ablate {
            common,
            axis,
            data,
            eval_data,
            out,
            seeds,
            rows,
            steps,
        } => ablate(common, axis, data, eval_data, out, seeds, rows, steps),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
