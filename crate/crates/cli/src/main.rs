use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use semloc_core::binio;
use semloc_core::features::{FeatureSet, FingerprintKind, NormalizationScheme};
use semloc_core::model::Model;
use semloc_core::sim::{generate_dataset, Dataset, Scenario};
use semloc_core::train::{
    build_arch, evaluate, gradcheck_objective, run_ablation_with_observer, train_with_observer, write_log_csv,
    AblationEvent, AblationGrid, Checkpoint, LogKind, Method, Metrics, SampleView, Split, SplitPlan, TrainConfig,
    CDF_LEVELS, GRADCHECK_TOL,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;

#[derive(Parser)]
#[command(name = "semloc", version, about = "Semantic CSI localization with domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a CSI dataset.
    Gen(GenArgs),
    /// Extract normalized fingerprints from a dataset.
    Features(FeaturesArgs),
    /// Train one model and keep its best validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one scene split.
    Eval(EvalArgs),
    /// Check analytic gradients of a full objective against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the loss ablation grid.
    Ablate(AblateArgs),
    /// Print the network layer table and parameter count.
    Describe(DescribeArgs),
    /// Emit metric tables and CDF points of a run as CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scenario JSON file, or `desk` for the built-in street scene.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Dataset directory written by `gen`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "adp")]
    kind: FingerprintKind,
    #[arg(long, default_value = "aw")]
    norm: NormalizationScheme,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Feature directory written by `features`.
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Enable or disable the knowledge-transfer term.
    #[arg(long)]
    kt: Option<bool>,
    /// Scene split: `desk`, `full`, `auto`, or `S0:S1,V0:V1,T0:T1`.
    #[arg(long, default_value = "auto")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train` (or its `checkpoint` subdirectory).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `test` (target scenes), `val` or `source`.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Scene split; defaults to the one recorded by `train`.
    #[arg(long = "scenes")]
    scene_split: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "hda")]
    method: Method,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Grid JSON; the built-in table grid when absent.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct DescribeArgs {
    /// Describe the network stored in this run or checkpoint directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Training config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature directory fixing the input shape.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Output directory for `metrics.csv` and `cdf.csv`.
    #[arg(long)]
    out: PathBuf,
}

/// Exclusive writer lock on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("{} is locked by another writer ({})", dir.display(), path.display()))?;
        Ok(Self(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn echo_config(dir: &Path, value: &impl Serialize) -> Result<()> {
    binio::write_json(&dir.join("config.json"), value)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(binio::read_json(path)?)
}

fn load_scenario(spec: &str) -> Result<Scenario> {
    let scenario = if spec == "desk" {
        Scenario::desk()
    } else {
        read_json(Path::new(spec))?
    };
    scenario.validate()?;
    Ok(scenario)
}

fn parse_range(s: &str) -> Result<std::ops::Range<usize>> {
    let (a, b) = s.split_once(':').ok_or_else(|| anyhow!("scene range `{s}` is not START:END"))?;
    Ok(a.trim().parse()?..b.trim().parse()?)
}

fn parse_split(spec: &str, n_scenes: usize) -> Result<SplitPlan> {
    let plan = match spec {
        "auto" => SplitPlan::for_scenes(n_scenes),
        "desk" => SplitPlan::desk(),
        "full" => SplitPlan::full(),
        s => {
            let parts: Vec<&str> = s.split(',').collect();
            let [src, val, tgt] = parts.as_slice() else {
                bail!("split `{s}` needs three comma-separated ranges");
            };
            SplitPlan {
                source: parse_range(src)?,
                val: parse_range(val)?,
                target: parse_range(tgt)?,
            }
        }
    };
    plan.validate(n_scenes)?;
    Ok(plan)
}

fn read_features(dir: &Path) -> Result<FeatureSet> {
    FeatureSet::read(dir).with_context(|| format!("reading features from {} (run `semloc features` first)", dir.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    let _lock = DirLock::acquire(&a.out)?;
    let ds = generate_dataset(&scenario, a.scenes, a.seed)?;
    ds.write(&a.out)?;
    echo_config(&a.out, &json!({"command": "gen", "scenes": a.scenes, "seed": a.seed, "scenario": scenario}))?;
    let h = ds.label_histogram();
    eprintln!(
        "{} samples ({} dropped), labels LOS/DNLOS/SNLOS = {}/{}/{}",
        ds.len(),
        ds.manifest.dropped.len(),
        h[0],
        h[1],
        h[2]
    );
    Ok(())
}

fn features(a: FeaturesArgs) -> Result<()> {
    let ds = Dataset::read(&a.input)?;
    let _lock = DirLock::acquire(&a.out)?;
    let fs = FeatureSet::extract(&ds, a.kind, a.norm)?;
    fs.write(&a.out)?;
    echo_config(&a.out, &json!({"command": "features", "kind": a.kind, "norm": a.norm}))?;
    eprintln!("{} fingerprints of shape {:?}", fs.len(), fs.manifest.sample_shape);
    Ok(())
}

fn summary(m: &Metrics) -> serde_json::Value {
    json!({
        "n_samples": m.n_samples,
        "rmse": m.rmse,
        "mean_error": m.mean_error,
        "accuracy": m.accuracy,
        "quantile_levels": CDF_LEVELS,
        "quantiles": m.quantiles,
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.method {
        cfg.method = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.sgd.lr = v;
    }
    if a.kt.is_some() {
        cfg.kt = a.kt;
    }
    cfg.validate()?;
    let fs = read_features(&a.data)?;
    let split = parse_split(&a.split, fs.manifest.source.n_scenes)?;
    let _lock = DirLock::acquire(&a.out)?;
    echo_config(&a.out, &json!({"command": "train", "split": split, "train": cfg}))?;
    let out = train_with_observer(&fs, &split, &cfg, &mut |r| {
        if r.kind == LogKind::Epoch {
            eprintln!(
                "epoch {:>4}  step {:>6}  val_rmse {:.4} m  val_acc {:.4}",
                r.epoch,
                r.step,
                r.val_rmse.unwrap_or(f64::NAN),
                r.val_acc.unwrap_or(f64::NAN)
            );
        }
    })?;
    out.checkpoint.write(&a.out.join("checkpoint"))?;
    write_log_csv(&a.out.join("train_log.csv"), &out.log)?;
    binio::write_json(
        &a.out.join("summary.json"),
        &json!({
            "best_epoch": out.best_epoch,
            "total_steps": out.total_steps,
            "val": summary(&out.best_val),
        }),
    )?;
    eprintln!("best epoch {} with val RMSE {:.4} m", out.best_epoch, out.best_val.rmse);
    Ok(())
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join("checkpoint").join("manifest.json").exists() {
        p.join("checkpoint")
    } else {
        p.to_path_buf()
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Source => "source",
        Split::Val => "val",
        Split::Target => "test",
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&checkpoint_dir(&a.ckpt))?;
    let fs = read_features(&a.data)?;
    let n_scenes = fs.manifest.source.n_scenes;
    let run_config = a.ckpt.join("config.json");
    let plan = match &a.scene_split {
        Some(s) => parse_split(s, n_scenes)?,
        None if run_config.exists() => {
            let v: serde_json::Value = read_json(&run_config)?;
            serde_json::from_value(v["split"].clone()).context("config.json lacks a scene split")?
        }
        None => SplitPlan::for_scenes(n_scenes),
    };
    let view = SampleView::new(&fs, plan.range(a.split).clone())?;
    let m = evaluate(&ckpt, &view, 256)?;
    let name = split_name(a.split);
    println!(
        "{name}: n={} rmse={:.4} m mean={:.4} m acc={:.4} p50={:.4} p67={:.4} p90={:.4} p95={:.4}",
        m.n_samples, m.rmse, m.mean_error, m.accuracy, m.quantiles[0], m.quantiles[1], m.quantiles[2], m.quantiles[3]
    );
    if a.ckpt.join("config.json").exists() {
        let _lock = DirLock::acquire(&a.ckpt)?;
        binio::write_json(&a.ckpt.join(format!("eval_{name}.json")), &m)?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let r = gradcheck_objective(a.method, a.seed)?;
    let ok = r.max_rel_error < GRADCHECK_TOL;
    println!(
        "{} gradcheck: {} entries, max rel error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}) -> {}",
        a.method,
        r.entries_checked,
        r.max_rel_error,
        r.worst_param,
        r.worst_index,
        r.analytic,
        r.numeric,
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(ok)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let grid: AblationGrid = match &a.grid {
        Some(p) => read_json(p)?,
        None => AblationGrid::table(),
    };
    let fs = read_features(&a.data)?;
    let n_scenes = fs.manifest.source.n_scenes;
    let split = grid.split.clone().unwrap_or_else(|| SplitPlan::for_scenes(n_scenes));
    split.validate(n_scenes)?;
    let _lock = DirLock::acquire(&a.out)?;
    echo_config(&a.out, &json!({"command": "ablate", "split": split, "grid": grid}))?;
    let table = run_ablation_with_observer(&fs, &split, &grid, &mut |ev| match ev {
        AblationEvent::Start { cell, seed } => eprintln!("{} seed {seed} ...", cell.name),
        AblationEvent::Done { cell, result } => eprintln!(
            "{} seed {}: test rmse {:.4} m, acc {:.4}, best epoch {}, {:.1}s",
            cell.name, result.seed, result.test_rmse, result.test_accuracy, result.best_epoch, result.seconds
        ),
        AblationEvent::Log(_) => {}
    })?;
    table.write_csv(&a.out.join("ablation.csv"))?;
    binio::write_json(&a.out.join("ablation.json"), &table)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn describe(a: DescribeArgs) -> Result<()> {
    let arch = match (&a.ckpt, &a.data) {
        (Some(c), _) => Checkpoint::read(&checkpoint_dir(c))?.manifest.arch,
        (None, Some(d)) => {
            let cfg: TrainConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            build_arch(&read_features(d)?, &cfg)?
        }
        (None, None) => {
            let cfg: TrainConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            let mut arch = semloc_core::model::ArchConfig::default();
            arch.conv_channels = cfg.conv_channels.clone();
            arch.kernel = cfg.kernel;
            arch.mlp_widths_reg = cfg.mlp_hidden.iter().copied().chain([3]).collect();
            arch.mlp_widths_cls = cfg.mlp_hidden.iter().copied().chain([arch.n_classes]).collect();
            arch
        }
    };
    print!("{}", Model::new(arch)?.describe());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut evals = Vec::new();
    for split in ["source", "val", "test"] {
        let p = a.run.join(format!("eval_{split}.json"));
        if p.exists() {
            evals.push((split, read_json::<Metrics>(&p)?));
        }
    }
    if evals.is_empty() {
        bail!("{} holds no eval_*.json; run `semloc eval` first", a.run.display());
    }
    let _lock = DirLock::acquire(&a.out)?;
    let mut metrics = String::from("split,n_samples,rmse,mean_error,accuracy,p50,p67,p90,p95\n");
    let mut cdf = String::from("split,rank,error_m,cdf\n");
    for (split, m) in &evals {
        let q = &m.quantiles;
        let _ = writeln!(
            metrics,
            "{split},{},{},{},{},{},{},{},{}",
            m.n_samples, m.rmse, m.mean_error, m.accuracy, q[0], q[1], q[2], q[3]
        );
        let n = m.errors.len() as f64;
        for (i, e) in m.errors.iter().enumerate() {
            let _ = writeln!(cdf, "{split},{},{e},{}", i + 1, (i + 1) as f64 / n);
        }
    }
    binio::write_bytes(&a.out.join("metrics.csv"), metrics.as_bytes())?;
    binio::write_bytes(&a.out.join("cdf.csv"), cdf.as_bytes())?;
    let log = a.run.join("train_log.csv");
    if log.exists() {
        let text = fs::read_to_string(&log)?;
        let mut epochs = String::from("epoch,step,val_rmse,val_acc\n");
        for line in text.lines().filter(|l| l.starts_with("epoch,")) {
            let f: Vec<&str> = line.split(',').collect();
            let _ = writeln!(epochs, "{},{},{},{}", f[1], f[2], f[13], f[14]);
        }
        binio::write_bytes(&a.out.join("epochs.csv"), epochs.as_bytes())?;
    }
    print!("{metrics}");
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<semloc_core::Error>() {
        Some(err) if err.is_non_finite() => EXIT_NON_FINITE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Features(a) => features(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_FAILURE),
            Err(e) => Err(e),
        },
        Command::Ablate(a) => ablate(a),
        Command::Describe(a) => describe(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
