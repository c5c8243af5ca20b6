use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stunet::accounting::{self, golden, CellCheck, Convention};
use stunet::arch::{build, scale, ArchConfig, NetworkGraph, ScalePlan};
use stunet::harness::dataset_io::{list_cases, load_dataset, load_labels, load_volume, save_dataset, save_labels};
use stunet::harness::{evaluate, gen_dataset, sliding_window_infer, train_with, validation_dsc, InferOptions, MergeSpec, Scenario, SynthSpec, TrainPlan, Volume};
use stunet::weights::{self, init_weights, is_head, transfer, WeightStore};
use stunet::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_TOLERANCE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "stunet", version, about = "Scalable residual 3D U-Net workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the architecture summary and its cost row.
    Describe {
        /// Config file, or a built-in name such as stu-net-b.
        #[arg(long)]
        config: String,
        #[arg(long, value_parser = parse_triple, default_value = "128,128,128")]
        patch: [usize; 3],
        /// Also write the cost row as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compound-scale a config by depth and width multipliers.
    Scale {
        #[arg(long)]
        base: String,
        #[arg(long)]
        depth: f64,
        #[arg(long)]
        width: f64,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Reproduce a golden table and report the per-cell deltas.
    Tables {
        #[arg(long)]
        which: String,
        #[arg(long, value_parser = parse_triple, default_value = "128,128,128")]
        patch: [usize; 3],
    },
    /// Search the counting conventions against every golden cell.
    Calibrate {
        /// Write the full ranking as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    GenData {
        /// Synthesis spec file; defaults to a task of the built-in transfer scenario.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Built-in scenario task (a or b) used when --spec is absent.
        #[arg(long, default_value = "a")]
        task: String,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Train a network from a fresh initialization.
    Pretrain {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Transfer pretrained weights to a new task and fine-tune them.
    Finetune {
        /// Pretrained weight file.
        #[arg(long)]
        from: PathBuf,
        /// Input channels of the downstream network; the first-layer weights are replicated to match.
        #[arg(long)]
        replicate_channels: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Segment every case of a dataset with sliding-window inference.
    Infer {
        #[arg(long)]
        config: String,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_triple, default_value = "32,32,32")]
        patch: [usize; 3],
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        /// Uniform window weighting instead of the Gaussian importance map.
        #[arg(long)]
        uniform: bool,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Per-class DSC of predictions against a dataset's labels.
    Eval {
        /// Directory written by `infer`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON list of {"sources": [...], "target": id} rules applied to both maps.
        #[arg(long)]
        merge: Option<PathBuf>,
        /// Write the metrics as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: String,
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset evaluated after every epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 250)]
    iters: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, value_parser = parse_triple, default_value = "32,32,32")]
    patch: [usize; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_mirror: bool,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
    /// Per-epoch CSV history.
    #[arg(long)]
    history: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Format { .. } | Error::Checksum { .. } => EXIT_IO,
            Error::NonFiniteLoss { .. } => 1,
            _ => EXIT_CONFIG,
        };
        Failure { code, message: e.to_string() }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected D,H,W, got {s:?}"))
}

/// A config file path, or a built-in name when no such file exists.
fn load_config(arg: &str) -> CliResult<ArchConfig> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(c) = ArchConfig::preset(arg) {
            return Ok(c);
        }
    }
    let text = std::fs::read_to_string(path).map_err(|e| fail(EXIT_IO, format!("{arg}: {e}")))?;
    Ok(ArchConfig::from_json(&text)?)
}

fn config_label(cfg: &ArchConfig, arg: &str) -> String {
    cfg.preset_name()
        .map(String::from)
        .unwrap_or_else(|| Path::new(arg).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| arg.to_string()))
}

fn write(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| fail(EXIT_IO, format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))
}

fn describe(config: &str, patch: [usize; 3], csv: Option<&Path>) -> CliResult {
    let cfg = load_config(config)?;
    let g = build(&cfg)?;
    let report = accounting::count_flops(&g, patch)?;
    let label = config_label(&cfg, config);
    println!("{label}");
    println!("  block style:  {:?}", cfg.block_style);
    println!("  downsample:   {:?}", cfg.downsample_style);
    println!("  upsample:     {:?}", cfg.upsample_style);
    println!("  in channels:  {}", cfg.in_channels);
    println!("  classes:      {}", cfg.num_classes);
    println!("  deep supervision: {}", cfg.deep_supervision);
    println!("  stage  depth  width  ratio");
    for s in 0..cfg.num_stages {
        let ratio = if s == 0 { "-".to_string() } else { format!("{:?}", cfg.updown_ratios[s - 1]) };
        println!("  {s:>5}  {:>5}  {:>5}  {ratio}", cfg.depths[s], cfg.widths[s]);
    }
    println!("  parameter tensors: {}", g.params().len());
    println!("  params: {} ({:.4} M)", report.params, report.params_m);
    let flops = report.flops.unwrap_or(0);
    println!("  FLOPs at {}x{}x{}: {} ({:.4} G, {:.4} T)", patch[0], patch[1], patch[2], flops, flops as f64 / 1e9, flops as f64 / 1e12);
    println!();
    let rows = vec![(label, cfg)];
    print!("{}", accounting::emit_table(&rows, patch)?);
    if let Some(p) = csv {
        write(p, &accounting::emit_csv(&rows, patch)?)?;
    }
    Ok(())
}

fn scale_cmd(base: &str, depth: f64, width: f64, output: &Path) -> CliResult {
    let cfg = load_config(base)?;
    let scaled = scale(&cfg, ScalePlan::new(depth, width))?;
    write(output, &(scaled.to_json() + "\n"))?;
    println!("depths {:?} widths {:?} -> {}", scaled.depths, scaled.widths, output.display());
    Ok(())
}

fn print_cells(cells: &[CellCheck]) -> usize {
    let w = cells.iter().map(|c| c.row.len()).max().unwrap_or(5).max(5);
    println!("{:<8}  {:<w$}  {:<10}  {:>10}  {:>10}  {:>8}  ok", "table", "row", "column", "expected", "computed", "delta");
    let mut ok = 0;
    for c in cells {
        ok += c.within_tolerance as usize;
        println!(
            "{:<8}  {:<w$}  {:<10}  {:>10.2}  {:>10.4}  {:>+8.4}  {}",
            c.table,
            c.row,
            c.column,
            c.expected,
            c.computed,
            c.delta,
            if c.within_tolerance { "yes" } else { "NO" }
        );
    }
    ok
}

fn tables(which: &str, patch: [usize; 3]) -> CliResult {
    let cells = accounting::reproduce(which, patch)?
        .ok_or_else(|| fail(EXIT_CONFIG, format!("unknown table {which:?}; expected table2, table5 or table6")))?;
    let ok = print_cells(&cells);
    println!("{ok}/{} cells within tolerance (params ±{} M, FLOPs ±{} T)", cells.len(), golden::PARAMS_TOL_M, golden::FLOPS_TOL_T);
    if ok != cells.len() {
        return Err(fail(EXIT_TOLERANCE, format!("{} cells outside tolerance", cells.len() - ok)));
    }
    Ok(())
}

fn calibrate(report: Option<&Path>) -> CliResult {
    let candidates = Convention::candidates();
    let r = accounting::calibrate(&candidates)?;
    println!("candidates: {}", candidates.len());
    println!("survivors:  {}", r.survivors.len());
    for s in r.ranked.iter().take(5) {
        println!("  {}/{} cells, total |delta| {:.4}: {}", s.cells_ok, s.cells_total, s.total_error, s.convention.to_json());
    }
    println!("chosen: {}", r.chosen.to_json());
    println!("frozen: {}", accounting::frozen().to_json());
    if let Some(p) = report {
        let text = serde_json::to_string_pretty(&r).map_err(|e| fail(EXIT_IO, e.to_string()))?;
        write(p, &(text + "\n"))?;
    }
    if r.chosen != *accounting::frozen() {
        return Err(fail(EXIT_TOLERANCE, "the best convention differs from the committed one"));
    }
    let ok = r.chosen_cells.iter().filter(|c| c.within_tolerance).count();
    if ok != r.chosen_cells.len() {
        print_cells(&r.chosen_cells);
        return Err(fail(EXIT_TOLERANCE, format!("{ok}/{} cells within tolerance", r.chosen_cells.len())));
    }
    Ok(())
}

fn gen_data(spec: Option<&Path>, task: &str, n: usize, seed: u64, output: &Path) -> CliResult {
    let spec: SynthSpec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| fail(EXIT_IO, format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(Error::from)?
        }
        None => {
            let s = Scenario::builtin();
            match task {
                "a" => s.task_a.data,
                "b" => s.task_b.data,
                _ => return Err(fail(EXIT_CONFIG, format!("unknown task {task:?}; expected a or b"))),
            }
        }
    };
    let vols = gen_dataset(&spec, n, seed)?;
    save_dataset(output, &vols, spec.num_classes())?;
    println!("{n} cases with {} classes and {} channels -> {}", spec.num_classes(), spec.channels, output.display());
    Ok(())
}

fn load_data(dir: &Path, cfg: &ArchConfig) -> CliResult<Vec<Volume>> {
    let (vols, classes) = load_dataset(dir)?;
    if classes != cfg.num_classes {
        return Err(fail(EXIT_CONFIG, format!("{} has {classes} classes but the config has {}", dir.display(), cfg.num_classes)));
    }
    Ok(vols)
}

fn run_training(args: &TrainArgs, cfg: &ArchConfig, graph: &NetworkGraph, store: &WeightStore, lr: Option<&weights::LrMultiplierMap>) -> CliResult {
    let data = load_data(&args.data, cfg)?;
    let val = args.val.as_deref().map(|d| load_data(d, cfg)).transpose()?;
    let plan = TrainPlan {
        iters_per_epoch: args.iters,
        batch_size: args.batch,
        base_lr: args.lr,
        mirror: !args.no_mirror,
        ..TrainPlan::new(args.epochs, args.patch, args.seed)
    };
    let classes: Vec<u16> = (1..cfg.num_classes as u16).collect();
    let mut hook = |epoch: usize, st: &WeightStore| -> stunet::Result<Option<f64>> {
        let d = match &val {
            Some(v) => Some(validation_dsc(graph, st, v, &classes, args.patch)?),
            None => None,
        };
        match d {
            Some(d) => eprintln!("epoch {epoch}: val DSC {d:.4}"),
            None => eprintln!("epoch {epoch} done"),
        }
        Ok(d)
    };
    let (trained, history) = train_with(graph, store, &data, &plan, lr, &Default::default(), &mut hook)?;
    weights::save(&trained, &args.output)?;
    if let Some(h) = &args.history {
        write(h, &history.to_csv())?;
    }
    print!("{}", history.to_csv());
    println!("weights -> {}", args.output.display());
    Ok(())
}

fn pretrain(args: &TrainArgs) -> CliResult {
    let cfg = load_config(&args.config)?;
    let g = build(&cfg)?;
    let store = init_weights(&g, args.seed)?;
    run_training(args, &cfg, &g, &store, None)
}

fn finetune(from: &Path, replicate: Option<usize>, args: &TrainArgs) -> CliResult {
    let mut cfg = load_config(&args.config)?;
    if let Some(c) = replicate {
        cfg.in_channels = c;
        cfg.validate()?;
    }
    let g = build(&cfg)?;
    let pretrained = weights::load(from)?;
    let (store, lr) = transfer(&pretrained, &g, args.seed)?;
    let head = lr.iter().filter(|(n, _)| is_head(n)).count();
    let head_lr = lr.iter().find(|(n, _)| is_head(n)).map(|(_, v)| v).unwrap_or(1.0);
    let backbone_lr = lr.iter().find(|(n, _)| !is_head(n)).map(|(_, v)| v).unwrap_or(1.0);
    println!("lr multipliers: head {head_lr} ({head} tensors), backbone {backbone_lr} ({} tensors)", lr.len() - head);
    run_training(args, &cfg, &g, &store, Some(&lr))
}

fn prediction_path(pred_dir: &Path, case: &Path) -> PathBuf {
    let name = case.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    pred_dir.join(format!("{name}.labels.stuw"))
}

fn infer(config: &str, weights_path: &Path, data: &Path, patch: [usize; 3], opts: InferOptions, output: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let g = build(&cfg)?;
    let store = weights::load(weights_path)?;
    std::fs::create_dir_all(output).map_err(|e| fail(EXIT_IO, format!("{}: {e}", output.display())))?;
    let cases = list_cases(data)?;
    for case in &cases {
        let (vol, _) = load_volume(case)?;
        let pred = sliding_window_infer(&g, &store, &vol.image, patch, opts)?;
        save_labels(&prediction_path(output, case), &pred)?;
    }
    println!("{} predictions -> {}", cases.len(), output.display());
    Ok(())
}

fn eval(pred: &Path, data: &Path, merge: Option<&Path>, json: Option<&Path>) -> CliResult {
    let merge = match merge {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| fail(EXIT_IO, format!("{}: {e}", p.display())))?;
            Some(MergeSpec::from_json(&text)?)
        }
        None => None,
    };
    let cases = list_cases(data)?;
    if cases.is_empty() {
        return Err(fail(EXIT_CONFIG, format!("no cases under {}", data.display())));
    }
    let mut results = Vec::new();
    let mut sums: Vec<(u16, f64)> = Vec::new();
    for case in &cases {
        let (vol, meta) = load_volume(case)?;
        let p = load_labels(&prediction_path(pred, case))?;
        let classes: Vec<u16> = match &merge {
            Some(m) => m.surviving_classes(meta.classes as u16),
            None => (0..meta.classes as u16).collect(),
        };
        let e = evaluate(&p, &vol.labels, &classes, merge.as_ref())?;
        if sums.is_empty() {
            sums = e.per_class.iter().map(|&(c, _)| (c, 0.0)).collect();
        }
        for ((_, s), (_, d)) in sums.iter_mut().zip(&e.per_class) {
            *s += d;
        }
        let name = case.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        println!("{name}: mean DSC {:.4}", e.mean_foreground_dsc);
        results.push((name, e));
    }
    let n = results.len() as f64;
    for (c, s) in &sums {
        println!("class {c}: {:.4}", s / n);
    }
    let mean = results.iter().map(|(_, e)| e.mean_foreground_dsc).sum::<f64>() / n;
    println!("mean foreground DSC: {mean:.4}");
    if let Some(p) = json {
        let cases: Vec<_> = results.iter().map(|(n, e)| serde_json::json!({"case": n, "per_class": e.per_class, "mean": e.mean_foreground_dsc})).collect();
        let doc = serde_json::json!({"cases": cases, "per_class": sums.iter().map(|(c, s)| (c, s / n)).collect::<Vec<_>>(), "mean_foreground_dsc": mean});
        write(p, &(serde_json::to_string_pretty(&doc).map_err(|e| fail(EXIT_IO, e.to_string()))? + "\n"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Describe { config, patch, csv } => describe(&config, patch, csv.as_deref()),
        Command::Scale { base, depth, width, output } => scale_cmd(&base, depth, width, &output),
        Command::Tables { which, patch } => tables(&which, patch),
        Command::Calibrate { report } => calibrate(report.as_deref()),
        Command::GenData { spec, task, n, seed, output } => gen_data(spec.as_deref(), &task, n, seed, &output),
        Command::Pretrain { train } => pretrain(&train),
        Command::Finetune { from, replicate_channels, train } => finetune(&from, replicate_channels, &train),
        Command::Infer { config, weights, data, patch, overlap, uniform, output } => {
            infer(&config, &weights, &data, patch, InferOptions { overlap, gaussian: !uniform }, &output)
        }
        Command::Eval { pred, data, merge, json } => eval(&pred, &data, merge.as_deref(), json.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
