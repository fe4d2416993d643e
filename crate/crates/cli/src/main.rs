use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use taskseq::data::io::{load_dataset_with_metadata, save_dataset, write_atomic, DatasetMetadata, Generation};
use taskseq::data::{generate_dataset, Agent, Dataset, GenerationPlan, PadKind, NUM_CLASSES};
use taskseq::models::Architecture;
use taskseq::streaming::{curve_from_trace, evaluate_stream, read_trace, replay, trace_csv, ProportionCurve, ReplayOptions};
use taskseq::training::{
    desk_preset, epochs_csv, evaluate_checkpoints, plan_folds, preset, run_kfold, Checkpoint, EvalTable, FoldPlan,
    ModelConfig, TrainReport,
};
use taskseq::{seed, Error, Result};

const DATASET_FILE: &str = "dataset.csv";
const RUN_FILE: &str = "run.json";

#[derive(Parser)]
#[command(name = "taskseq", version, about = "Train and evaluate task-module classifiers on hand-landmark sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its metadata sidecar.
    Generate(GenerateArgs),
    /// Cross-validate one configuration and save a checkpoint per fold.
    Train(TrainArgs),
    /// Per-operator test accuracy of trained runs.
    Eval(EvalArgs),
    /// Stream recordings frame by frame through a trained model.
    Replay(ReplayArgs),
    /// Accuracy against the observed fraction of each module.
    Curve(CurveArgs),
    /// Train one configuration under every padding kind on shared folds.
    ComparePadding(CompareArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    seed: u64,
    /// Assemblies per operator.
    #[arg(long, default_value_t = 5)]
    assemblies: usize,
    /// Additional assemblies for the training operator.
    #[arg(long, default_value_t = 0)]
    extra_train: usize,
    /// JSON file of generation-plan overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ModelArgs {
    /// Named preset; overrides --arch and --pad.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = "transformer")]
    arch: Architecture,
    #[arg(long, default_value = "zero")]
    pad: PadKind,
    /// JSON file of model-config overrides.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FoldArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Test assemblies held out per operator.
    #[arg(long, default_value_t = 1)]
    test_per_operator: usize,
    /// Folds trained at once (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    folds: FoldArgs,
    /// Print the resolved configuration and fold plan without writing anything.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Training output directory; repeat to compare runs.
    #[arg(long, required = true)]
    run: Vec<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// Fold model to stream with.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Assemblies to replay (default: the run's test assemblies).
    #[arg(long)]
    assembly: Vec<u32>,
    /// Sleep one frame period between frames.
    #[arg(long)]
    paced: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct CurveArgs {
    /// Replay traces to score.
    #[arg(long, num_args = 1.., conflicts_with_all = ["run", "dataset"])]
    trace: Vec<PathBuf>,
    /// Training run whose fold models are streamed over its test assemblies.
    #[arg(long, requires = "dataset")]
    run: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    folds: FoldArgs,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[command(flatten)]
    out: OutArgs,
}

/// Written next to the checkpoints of a training run.
#[derive(Debug, Serialize, Deserialize)]
struct RunRecord {
    config: ModelConfig,
    plan: FoldPlan,
    reports: Vec<TrainReport>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Divergence { .. } => 5,
        Error::Io(_) => 6,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Replay(a) => replay_cmd(a),
        Command::Curve(a) => curve(a),
        Command::ComparePadding(a) => compare_padding(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn prepare_out(out: &OutArgs) -> Result<&Path> {
    let dir = out.out.as_path();
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Config(format!("{} is not a directory", dir.display())));
        }
        if !out.force && std::fs::read_dir(dir)?.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to write into it)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(dir)
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn merge_json(base: &mut Value, patch: &Value) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(Error::Config(format!("unknown generator key {k:?}"))),
                }
            }
            Ok(())
        }
        _ => Err(Error::Config("generator overrides must be a JSON object".into())),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut plan = GenerationPlan::standard(a.assemblies, a.extra_train);
    if let Some(path) = &a.config {
        let mut v = serde_json::to_value(&plan)?;
        merge_json(&mut v, &read_json(path)?)?;
        plan = serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid generation plan: {e}")))?;
    }
    let ds = generate_dataset(&plan, a.seed)?;
    let dir = prepare_out(&a.out)?;
    save_dataset(&ds, &dir.join(DATASET_FILE), Some(Generation { plan, seed: a.seed }))?;
    print_summary(&ds);
    Ok(())
}

fn print_summary(ds: &Dataset) {
    let ops: Vec<String> = ds
        .operators()
        .iter()
        .map(|op| {
            let n = ds.recordings.iter().filter(|r| r.operator_id == *op).count();
            format!("operator {op}: {n}")
        })
        .collect();
    let mut per_class = [0usize; NUM_CLASSES];
    for m in ds.recordings.iter().flat_map(|r| &r.modules).filter(|m| m.agent == Agent::Human) {
        per_class[m.class] += 1;
    }
    println!("assemblies: {} ({})", ds.recordings.len(), ops.join(", "));
    println!("modules per class: {per_class:?}");
    println!("T_max: {}", ds.t_max());
}

fn resolve_config(m: &ModelArgs, pad: Option<PadKind>, master: u64) -> Result<ModelConfig> {
    let mut cfg = match &m.preset {
        Some(name) => preset(name)?,
        None => desk_preset(m.arch, m.pad),
    };
    if let Some(path) = &m.config {
        cfg = cfg.with_overrides(&read_json(path)?)?;
    }
    if let Some(p) = pad {
        cfg.pad_kind = p;
    }
    cfg.seed = seed::derive(master, "train");
    cfg.validate()?;
    Ok(cfg)
}

fn load(path: &Path) -> Result<(Dataset, Option<DatasetMetadata>)> {
    if !path.exists() {
        return Err(Error::Data(format!("dataset {} does not exist", path.display())));
    }
    load_dataset_with_metadata(path)
}

fn train_run(cfg: &ModelConfig, ds: &Dataset, plan: &FoldPlan, jobs: usize, dir: &Path) -> Result<(RunRecord, Vec<Checkpoint>)> {
    let started = Instant::now();
    let outputs = run_kfold(cfg, ds, &plan.splits, jobs)?;
    let reports: Vec<TrainReport> = outputs.iter().map(|o| o.report.clone()).collect();
    let checkpoints: Vec<Checkpoint> = outputs.into_iter().map(|o| o.checkpoint).collect();
    std::fs::create_dir_all(dir)?;
    for (k, cp) in checkpoints.iter().enumerate() {
        cp.save(&dir.join(format!("fold{k}.checkpoint.json")))?;
    }
    write_atomic(&dir.join("epochs.csv"), &epochs_csv(&reports)?)?;
    let mut record = RunRecord {
        config: cfg.clone(),
        plan: plan.clone(),
        reports,
    };
    for r in &mut record.reports {
        r.wall_clock_secs = 0.0;
    }
    write_json(&dir.join(RUN_FILE), &record)?;
    for r in &record.reports {
        let b = r.best();
        println!(
            "fold {}: best epoch {} val accuracy {:.4} val loss {:.4}",
            r.fold, b.epoch, b.val_accuracy, b.val_loss
        );
    }
    eprintln!("trained {} folds in {:.1}s", checkpoints.len(), started.elapsed().as_secs_f64());
    Ok((record, checkpoints))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.model, None, a.folds.seed)?;
    let (ds, _) = load(&a.folds.dataset)?;
    let plan = plan_folds(&ds, a.folds.test_per_operator, a.folds.folds, a.folds.seed)?;
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        println!("T_max: {}", ds.t_max());
        println!("fold hash: {}", plan.fold_hash);
        for (k, s) in plan.splits.iter().enumerate() {
            println!("fold {k}: train {:?} val {:?}", s.train, s.val);
        }
        println!("test: {:?}", plan.partition.test);
        return Ok(());
    }
    let dir = prepare_out(&a.out)?;
    train_run(&cfg, &ds, &plan, a.folds.jobs, dir)?;
    Ok(())
}

fn load_run(dir: &Path) -> Result<(RunRecord, Vec<Checkpoint>)> {
    let path = dir.join(RUN_FILE);
    if !path.exists() {
        return Err(Error::Data(format!("{} is not a training run (no {RUN_FILE})", dir.display())));
    }
    let record: RunRecord = serde_json::from_slice(&std::fs::read(&path)?)?;
    let checkpoints = (0..record.plan.splits.len())
        .map(|k| {
            let p = dir.join(format!("fold{k}.checkpoint.json"));
            if !p.exists() {
                return Err(Error::Data(format!("missing checkpoint {}", p.display())));
            }
            Checkpoint::load(&p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((record, checkpoints))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (ds, _) = load(&a.dataset)?;
    let mut tables = Vec::new();
    for dir in &a.run {
        let (record, checkpoints) = load_run(dir)?;
        let eval_seed = seed::derive(record.plan.seed, "eval");
        let table = evaluate_checkpoints(&checkpoints, &ds, &record.plan.partition.test, eval_seed)?;
        tables.push((record.config.preset.clone(), table));
    }
    let out = prepare_out(&a.out)?;
    let rows: Vec<(String, &EvalTable)> = tables.iter().map(|(n, t)| (n.clone(), t)).collect();
    let csv = EvalTable::csv(&rows)?;
    write_atomic(&out.join("eval.csv"), &csv)?;
    write_json(&out.join("eval.json"), &tables)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn replay_cmd(a: ReplayArgs) -> Result<()> {
    let (ds, meta) = load(&a.dataset)?;
    let meta = meta.ok_or_else(|| {
        Error::Data(format!("{} has no module metadata sidecar", a.dataset.display()))
    })?;
    let (record, checkpoints) = load_run(&a.run)?;
    let cp = checkpoints
        .get(a.fold)
        .ok_or_else(|| Error::Config(format!("run has no fold {}", a.fold)))?;
    let net = cp.network()?;
    let ids = if a.assembly.is_empty() { record.plan.partition.test.clone() } else { a.assembly.clone() };
    let opts = ReplayOptions {
        t_max: cp.t_max,
        standardize: cp.config.standardize,
        paced: a.paced,
    };
    let out = prepare_out(&a.out)?;
    for id in ids {
        let rec = ds
            .recording(id)
            .ok_or_else(|| Error::Data(format!("assembly {id} is not in the dataset")))?;
        let rows = replay(rec, meta.assembly(id), &net, opts)?;
        write_atomic(&out.join(format!("trace_{id}.csv")), &trace_csv(&rows)?)?;
        println!("assembly {id}: {} frames", rows.len());
    }
    Ok(())
}

fn curve(a: CurveArgs) -> Result<()> {
    let curve = match (&a.run, &a.dataset) {
        (Some(run), Some(dataset)) => {
            let (ds, meta) = load(dataset)?;
            let meta = meta.ok_or_else(|| Error::Data(format!("{} has no module metadata sidecar", dataset.display())))?;
            let (record, checkpoints) = load_run(run)?;
            evaluate_stream(&checkpoints, &ds, &meta, &record.plan.partition.test, a.bins)?.1
        }
        _ => {
            if a.trace.is_empty() {
                return Err(Error::Config("curve needs --trace files or --run with --dataset".into()));
            }
            let mut curve = ProportionCurve::new(a.bins)?;
            for path in &a.trace {
                let rows = read_trace(std::fs::File::open(path)?)?;
                curve.merge(&curve_from_trace(&rows, a.bins)?)?;
            }
            curve
        }
    };
    let out = prepare_out(&a.out)?;
    let csv = curve.csv()?;
    write_atomic(&out.join("curve.csv"), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn compare_padding(a: CompareArgs) -> Result<()> {
    let (ds, meta) = load(&a.folds.dataset)?;
    let meta = meta.ok_or_else(|| {
        Error::Data(format!("{} has no module metadata sidecar", a.folds.dataset.display()))
    })?;
    let plan = plan_folds(&ds, a.folds.test_per_operator, a.folds.folds, a.folds.seed)?;
    let configs = PadKind::ALL
        .iter()
        .map(|&p| resolve_config(&a.model, Some(p), a.folds.seed))
        .collect::<Result<Vec<_>>>()?;
    let out = prepare_out(&a.out)?;
    let eval_seed = seed::derive(a.folds.seed, "eval");
    let mut rows = Vec::new();
    for cfg in &configs {
        let pad = cfg.pad_kind;
        println!("padding {}", pad.name());
        let (_, checkpoints) = train_run(cfg, &ds, &plan, a.folds.jobs, &out.join(pad.name()))?;
        let table = evaluate_checkpoints(&checkpoints, &ds, &plan.partition.test, eval_seed)?;
        let (stream, curve) = evaluate_stream(&checkpoints, &ds, &meta, &plan.partition.test, a.bins)?;
        write_atomic(&out.join(pad.name()).join("curve.csv"), &curve.csv()?)?;
        rows.push(vec![
            pad.name().to_string(),
            format!("{:.6}", table.average),
            table.new_operators.map(|v| format!("{v:.6}")).unwrap_or_default(),
            format!("{:.6}", stream.final_accuracy()),
            format!("{:.6}", stream.frame_accuracy()),
            plan.fold_hash.clone(),
        ]);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "pad_kind",
        "batch_accuracy",
        "batch_new_operators",
        "stream_final_accuracy",
        "stream_frame_accuracy",
        "fold_hash",
    ])?;
    for r in &rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&out.join("comparison.csv"), &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}
