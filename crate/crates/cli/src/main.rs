mod config;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ibunet_core::dataset::{Dataset, InMemoryDataset, ManifestDataset};
use ibunet_core::features::{label_map, stack_features, FeatureError};
use ibunet_core::layout_io::{read_layout_file, write_layout};
use ibunet_core::model::{layer_param_counts, Arch, Model, ModelConfig};
use ibunet_core::npy::{read_npy_file, write_npy_file, NpyArray};
use ibunet_core::synth::{synth_layout, SynthProfile};
use ibunet_core::tensor::gradcheck;
use ibunet_core::train::{self, load_checkpoint, save_checkpoint, TrainState};
use ibunet_core::{Task, Tensor4, TensorError, TrainError};

use config::{resolved_toml, FileConfig, ModelSection};

/// Routability prediction with ibUNet.
#[derive(Debug, Parser)]
#[command(name = "ibunet", version)]
struct Cli {
    /// TOML file with [model] and [train] sections; flags win on conflict.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic placed layout.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Preset name (tiny, small, n28) or a TOML profile file.
        #[arg(long, default_value = "small")]
        profile: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the feature stack and label map of a layout.
    Extract {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        out_dir: PathBuf,
        /// Append the sample to this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Sample id for the manifest line (defaults to the layout file stem).
        #[arg(long)]
        id: Option<String>,
    },
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        task: Option<Task>,
        /// Directory for metrics.csv and roc.csv (defaults to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        normalize: bool,
    },
    /// Predict a map from a feature stack.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check operator gradients against central differences.
    Gradcheck {
        /// Operator name, `model`, or `all`.
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter counts of ibUNet and the baseline.
    Params {
        /// Restrict the per-layer table to one model.
        #[arg(long)]
        model: Option<Arch>,
        #[arg(long)]
        task: Option<Task>,
        #[command(flatten)]
        overrides: ModelFlags,
    },
}

#[derive(Debug, Args)]
struct ModelFlags {
    #[arg(long)]
    base_width: Option<usize>,
}

impl ModelFlags {
    fn section(&self) -> ModelSection {
        ModelSection { base_width: self.base_width, ..ModelSection::default() }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    model: Option<Arch>,
    #[arg(long)]
    task: Option<Task>,
    /// Training manifest; omit to train on `--synthetic` generated samples.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Held-out manifest used for per-epoch evaluation.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    /// Number of synthetic samples when no manifest is given.
    #[arg(long)]
    synthetic: Option<u64>,
    #[arg(long, default_value = "small")]
    synthetic_profile: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    iterations_per_epoch: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    normalize: bool,
    #[command(flatten)]
    overrides: ModelFlags,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<NumericFailure>() {
            return 3;
        }
        if let Some(TrainError::NonFinite { .. }) = cause.downcast_ref::<TrainError>() {
            return 3;
        }
        if let Some(TensorError::NonFinite { .. }) = cause.downcast_ref::<TensorError>() {
            return 3;
        }
    }
    2
}

fn init_threads() -> Result<usize> {
    let n = match std::env::var("IBUNET_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| usage(format!("IBUNET_THREADS must be an integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    Ok(rayon::current_num_threads())
}

fn load_profile(name: &str) -> Result<SynthProfile> {
    if let Some(p) = SynthProfile::preset(name) {
        return Ok(p);
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(usage(format!("unknown profile `{name}` (tiny, small, n28 or a TOML file)")));
    }
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).with_context(|| format!("parsing profile {name}"))
}

fn cmd_synth(seed: u64, profile: &str, out: &Path) -> Result<()> {
    let prof = load_profile(profile)?;
    println!("seed = {seed}");
    print!("[profile]\n{}", toml::to_string(&prof)?);
    let layout = synth_layout(seed, &prof)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, write_layout(&layout)).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} ({} cells, {} nets, {} macros)", out.display(), layout.cells.len(), layout.nets.len(), layout.macros.len());
    Ok(())
}

fn cmd_extract(layout: &Path, task: Task, out_dir: &Path, manifest: Option<&Path>, id: Option<&str>) -> Result<()> {
    println!("task = \"{task}\"");
    let layout = read_layout_file(layout).with_context(|| format!("reading {}", layout.display()))?;
    let stack = stack_features(task, &layout, &layout.grid)?;
    let (c, h, w) = stack.shape();
    std::fs::create_dir_all(out_dir)?;
    let feat_path = out_dir.join("features.npy");
    write_npy_file(&feat_path, &NpyArray::new(vec![c, h, w], stack.to_f32()))?;
    println!("features {} shape ({c}, {h}, {w})", feat_path.display());
    for (k, name) in task.channel_names().iter().enumerate() {
        println!("  channel {k}: {name}");
    }
    let label_path = out_dir.join("label.npy");
    match label_map(task, &layout, &layout.grid) {
        Ok(label) => {
            write_npy_file(&label_path, &NpyArray::new(vec![h, w], label.data.iter().map(|&v| v as f32).collect()))?;
            println!("label {} shape ({h}, {w})", label_path.display());
        }
        Err(FeatureError::MissingCapacity) if manifest.is_none() => {
            println!("no capacity report: label not written");
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    }
    if let Some(m) = manifest {
        let stem = id.map(str::to_string).unwrap_or_else(|| out_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(m)?;
        writeln!(f, "{stem}\t{}\t{}", abs(&feat_path).display(), abs(&label_path).display())?;
        println!("appended `{stem}` to {}", m.display());
    }
    Ok(())
}

fn open_dataset(path: &Path, task: Task, normalize: bool) -> Result<ManifestDataset> {
    ManifestDataset::open(path, task, normalize).with_context(|| format!("opening manifest {}", path.display()))
}

const RESOLVED_FILE: &str = "config.toml";

fn cmd_train(file: &FileConfig, a: &TrainArgs) -> Result<()> {
    let saved = a.out.join(RESOLVED_FILE);
    let mut tc = if a.resume && file.train.is_none() && saved.exists() {
        FileConfig::load(Some(&saved))?.train_config()?
    } else {
        file.train_config()?
    };
    tc.seed = a.seed.unwrap_or(tc.seed);
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.iterations_per_epoch = a.iterations_per_epoch.unwrap_or(tc.iterations_per_epoch);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.learning_rate = a.learning_rate.unwrap_or(tc.learning_rate);
    tc.eval_every = a.eval_every.unwrap_or(tc.eval_every);
    tc.max_steps = a.max_steps.or(tc.max_steps);
    tc.checkpoint_dir = Some(a.out.clone());

    let mut state = if a.resume {
        let s = load_checkpoint(&a.out).with_context(|| format!("resuming from {}", a.out.display()))?;
        tc.seed = s.seed;
        s
    } else {
        let mc = file.model_config(a.model, a.task, &a.overrides.section());
        mc.validate()?;
        TrainState::new(Model::new(&mc, tc.seed)?, &tc)
    };
    let mc = *state.model.config();
    if a.task.is_some_and(|t| t != mc.task) {
        return Err(usage(format!("--task {} conflicts with checkpoint task {}", a.task.unwrap(), mc.task)));
    }
    println!("# resolved config (seed {})", tc.seed);
    print!("{}", resolved_toml(&mc, Some(&tc)));
    println!("# {} learnable parameters", state.model.param_count());

    let train_set: Box<dyn Dataset> = match (&a.manifest, a.synthetic) {
        (Some(m), None) => Box::new(open_dataset(m, mc.task, a.normalize)?),
        (None, Some(n)) => {
            let prof = load_profile(&a.synthetic_profile)?;
            Box::new(InMemoryDataset::synthetic(mc.task, &prof, 0..n)?)
        }
        _ => return Err(usage("give exactly one of --manifest or --synthetic")),
    };
    let test_set = a.test_manifest.as_ref().map(|m| open_dataset(m, mc.task, a.normalize)).transpose()?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(&saved, resolved_toml(&mc, Some(&tc)))?;
    let every = (tc.iterations_per_epoch / 10).max(1);
    let outcome = train::train(&mut state, train_set.as_ref(), test_set.as_ref().map(|d| d as &dyn Dataset), &tc, |step, loss| {
        if step % every == 0 {
            println!("step {step} loss {loss:.6}");
        }
    })?;
    save_checkpoint(&state, &a.out)?;
    if let Some(r) = state.history.last() {
        let auc = r.auc.map(|v| format!(" auc {v:.4}")).unwrap_or_default();
        println!("epoch {} loss {:.6} avg_nrmse {:.4} avg_ssim {:.4}{auc}", r.epoch, r.loss, r.avg_nrmse, r.avg_ssim);
    }
    println!("ran {} steps (total {}); checkpoint in {}", outcome.step_losses.len(), state.step, a.out.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, manifest: &Path, task: Option<Task>, out: Option<&Path>, normalize: bool) -> Result<()> {
    let state = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mc = state.model.config();
    let task = task.unwrap_or(mc.task);
    if task != mc.task {
        return Err(usage(format!("--task {task} conflicts with checkpoint task {}", mc.task)));
    }
    println!("# resolved config (seed {})", state.seed);
    print!("{}", resolved_toml(mc, None));
    let ds = open_dataset(manifest, task, normalize)?;
    let report = train::evaluate(&state.model, &ds)?;
    let out = out.unwrap_or(checkpoint);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.csv"), report.samples_csv())?;
    if let Some(roc) = report.roc_csv() {
        std::fs::write(out.join("roc.csv"), roc)?;
    }
    if let Some(d) = &report.drc {
        let c = d.confusion;
        println!("confusion at threshold {}: TP {} FP {} TN {} FN {}", d.optimal.threshold, c.tp, c.fp, c.tn, c.false_neg);
    }
    println!("{}", report.summary_line());
    Ok(())
}

fn cmd_predict(checkpoint: &Path, features: &Path, out: &Path) -> Result<()> {
    let state = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    println!("# resolved config (seed {})", state.seed);
    print!("{}", resolved_toml(state.model.config(), None));
    let arr = read_npy_file(features).with_context(|| format!("reading {}", features.display()))?;
    let (c, h, w) = match arr.shape[..] {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => bail!("features must be (c, h, w), got {:?}", arr.shape),
    };
    let x = Tensor4::new([1, c, h, w], arr.data)?;
    let y = state.model.predict(&x)?;
    write_npy_file(out, &NpyArray::new(vec![1, h, w], y.data))?;
    println!("wrote {} shape (1, {h}, {w})", out.display());
    Ok(())
}

fn cmd_gradcheck(op: &str, seed: u64) -> Result<()> {
    println!("seed = {seed}");
    let ops: Vec<&str> = match op {
        "all" => gradcheck::OPS.iter().copied().chain(["model"]).collect(),
        "model" => vec!["model"],
        name if gradcheck::OPS.contains(&name) => vec![name],
        other => return Err(usage(format!("unknown operator `{other}`; choose all, model, or one of {:?}", gradcheck::OPS))),
    };
    let mut failed = Vec::new();
    println!("{:<22} {:>12} {:>8} {:>8}  result", "op", "max_rel_err", "checked", "skipped");
    for name in ops {
        let (report, tol) = if name == "model" {
            let cfg = ModelConfig::ibunet(Task::Rc);
            let model = Model::new(&cfg, seed)?;
            (ibunet_core::model::gradcheck_model(&model, 2, 32, 150, seed)?, 1e-3)
        } else {
            (gradcheck::check_op(name, seed)?, 1e-4)
        };
        let ok = report.passed(tol);
        println!(
            "{:<22} {:>12.3e} {:>8} {:>8}  {}",
            report.name,
            report.max_rel_err,
            report.checked,
            report.skipped,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(report.name);
        }
    }
    if !failed.is_empty() {
        return Err(NumericFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

fn cmd_params(file: &FileConfig, only: Option<Arch>, task: Option<Task>, flags: &ModelSection) -> Result<()> {
    let build = |arch: Arch| -> Result<Model> {
        let same = file.model.model.is_none_or(|m| m == arch);
        let cfg = if same {
            file.model_config(Some(arch), task, &if only.is_none_or(|o| o == arch) { flags.clone() } else { ModelSection::default() })
        } else {
            ModelConfig::default_for(arch, task.or(file.model.task).unwrap_or(Task::Rc))
        };
        Ok(Model::new(&cfg, 0)?)
    };
    let ib = build(Arch::Ibunet)?;
    let bl = build(Arch::Baseline)?;
    for m in [&ib, &bl] {
        println!("# {}", m.config().arch);
        print!("{}", resolved_toml(m.config(), None));
    }
    let rows = |m: &Model| layer_param_counts(&m.spec).into_iter().filter(|(_, n)| *n > 0).collect::<Vec<_>>();
    let (ri, rb) = (rows(&ib), rows(&bl));
    let mut table = String::new();
    let _ = writeln!(table, "{:<12} {:>12}   {:<12} {:>12}", "ibunet", "params", "baseline", "params");
    for k in 0..ri.len().max(rb.len()) {
        let cell = |r: &[(String, usize)]| r.get(k).map(|(n, c)| (n.clone(), c.to_string())).unwrap_or_default();
        let (a, b) = (cell(&ri), cell(&rb));
        let _ = writeln!(table, "{:<12} {:>12}   {:<12} {:>12}", a.0, a.1, b.0, b.1);
    }
    if only.is_none() {
        print!("{table}");
    } else {
        let m = if only == Some(Arch::Ibunet) { &ri } else { &rb };
        for (n, c) in m {
            println!("{n:<12} {c:>12}");
        }
    }
    let (ni, nb) = (ib.param_count(), bl.param_count());
    println!("total ibunet {ni}");
    println!("total baseline {nb}");
    println!("ratio ibunet/baseline {:.4}", ni as f64 / nb as f64);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = init_threads()?;
    let file = FileConfig::load(cli.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    println!("# threads = {threads}");
    match &cli.command {
        Command::Synth { seed, profile, out } => cmd_synth(*seed, profile, out),
        Command::Extract { layout, task, out_dir, manifest, id } => cmd_extract(layout, *task, out_dir, manifest.as_deref(), id.as_deref()),
        Command::Train(a) => cmd_train(&file, a),
        Command::Eval { checkpoint, manifest, task, out, normalize } => cmd_eval(checkpoint, manifest, *task, out.as_deref(), *normalize),
        Command::Predict { checkpoint, features, out } => cmd_predict(checkpoint, features, out),
        Command::Gradcheck { op, seed } => cmd_gradcheck(op, *seed),
        Command::Params { model, task, overrides } => cmd_params(&file, *model, *task, &overrides.section()),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
