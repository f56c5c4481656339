//! The `unest` executable: training, inference, evaluation, architecture
//! inspection, and the built-in verification suites.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use unest::checkpoint;
use unest::infer::{argmax_labels, ensemble, sliding_window};
use unest::metrics::{volume_cm3, MetricsReport};
use unest::model::{Model, ModelConfig, Scale};
use unest::nifti::{read_auto, write_nifti, write_raw};
use unest::selftest::{gradcheck_model, gradcheck_ops, property_suite};
use unest::tensor::Element;
use unest::train::{fold_split, synthetic_volume, train, Sample, TrainConfig, TrainOptions};
use unest::volume::{Volume, VolumeKind};
use unest::{Error, Result};

#[derive(Parser)]
#[command(name = "unest", version, about = "Hierarchical 3D transformer for volumetric segmentation")]
struct Cli {
    /// Base random seed; takes precedence over a seed from a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for sliding-window inference.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Floating-point width for weights and activations.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a loss trace.
    Train(TrainArgs),
    /// Segment a volume with one checkpoint or an ensemble.
    Infer(InferArgs),
    /// Score predicted label volumes against references.
    Eval(EvalArgs),
    /// Print a configuration with its geometry, parameter, and FLOP reports.
    Inspect(InspectArgs),
    /// Check analytic gradients against finite differences (64-bit).
    Gradcheck(GradcheckArgs),
    /// Run the deterministic property suite.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config file: `key = value` lines with TrainConfig field names.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Model config file: `key = value` lines with ModelConfig field names.
    #[arg(long, conflicts_with = "scale")]
    model_config: Option<PathBuf>,

    /// Published model scale (S, B, or L) instead of a model config file.
    #[arg(long, value_parser = parse_scale)]
    scale: Option<Scale>,

    /// Directory holding images/ and labels/ with matching file names.
    #[arg(long, conflicts_with = "synthetic")]
    data_dir: Option<PathBuf>,

    /// Train on this many generated phantom volumes instead of files.
    #[arg(long)]
    synthetic: Option<usize>,

    /// Output directory for checkpoints and the loss trace.
    #[arg(long)]
    out_dir: PathBuf,

    /// Write a checkpoint every N steps (0 writes only the final one).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,

    /// Apply flip/rotation/intensity augmentation to training samples.
    #[arg(long)]
    augment: bool,

    /// Print a loss line every step.
    #[arg(long)]
    log: bool,

    /// Hold out one cross-validation fold by stable id hash.
    #[arg(long, requires = "folds")]
    fold: Option<usize>,

    /// Number of cross-validation folds.
    #[arg(long, requires = "fold")]
    folds: Option<usize>,

    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training window: "H,W,D" or one edge length for a cube.
    #[arg(long, value_parser = parse_extents)]
    window: Option<[usize; 3]>,
    #[arg(long)]
    dice_weight: Option<f64>,
    #[arg(long)]
    ce_weight: Option<f64>,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint to run; repeat the flag to ensemble several models.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,

    /// Input intensity volume (.nii, .nii.gz, or raw with sidecar).
    #[arg(long)]
    input: PathBuf,

    /// Output label volume path.
    #[arg(long)]
    output: PathBuf,

    /// Fraction of window overlap between neighboring tiles, in [0, 1).
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,

    /// Expected inference window; rejected if a checkpoint disagrees.
    #[arg(long, value_parser = parse_extents)]
    window: Option<[usize; 3]>,

    /// Directory to write per-class probability volumes into.
    #[arg(long)]
    probs: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted label volumes.
    #[arg(long)]
    pred_dir: PathBuf,

    /// Directory of reference label volumes with matching file names.
    #[arg(long)]
    true_dir: PathBuf,

    /// Declared class count including background 0.
    #[arg(long)]
    classes: usize,

    /// Directory for report.csv (the report always goes to standard output).
    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// Also write per-class scatter and Bland-Altman point files.
    #[arg(long, requires = "out_dir")]
    plot_data: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Published scale to describe.
    #[arg(long, value_parser = parse_scale)]
    scale: Option<Scale>,

    /// Model config file to describe.
    #[arg(long, conflicts_with = "scale")]
    config: Option<PathBuf>,

    /// Checkpoint whose stored config is described.
    #[arg(long, conflicts_with_all = ["scale", "config"])]
    checkpoint: Option<PathBuf>,

    /// Window for geometry and FLOP reporting (defaults to the config's own).
    #[arg(long, value_parser = parse_extents)]
    window: Option<[usize; 3]>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Probes per parameter tensor in the whole-model check (0 = all).
    #[arg(long, default_value_t = 4)]
    probes: usize,

    /// Run only the primitive suite, not the whole-model check.
    #[arg(long)]
    ops_only: bool,
}

fn parse_scale(s: &str) -> Result<Scale> {
    s.parse()
}

fn parse_extents(s: &str) -> Result<[usize; 3]> {
    let parse = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("bad extent {p:?} in {s:?}")))
    };
    let parts: Vec<&str> = s.split(',').collect();
    match parts.len() {
        1 => Ok([parse(parts[0])?; 3]),
        3 => Ok([parse(parts[0])?, parse(parts[1])?, parse(parts[2])?]),
        _ => Err(Error::config(format!(
            "expected one or three comma-separated extents, got {s:?}"
        ))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let (seed, threads, precision) = (cli.seed, cli.threads, cli.precision);
    match cli.command {
        Command::Train(args) => match precision {
            Precision::F32 => run_train::<f32>(args, seed),
            Precision::F64 => run_train::<f64>(args, seed),
        },
        Command::Infer(args) => match precision {
            Precision::F32 => run_infer::<f32>(args, threads),
            Precision::F64 => run_infer::<f64>(args, threads),
        },
        Command::Eval(args) => run_eval(args),
        Command::Inspect(args) => run_inspect(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Selftest => run_selftest(),
    }
}

/// Route by file extension: NIfTI for .nii/.nii.gz, raw with sidecar else.
fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        write_nifti(path, v)
    } else {
        write_raw(path, v)
    }
}

fn sorted_file_names(dir: &Path) -> Result<Vec<String>> {
    let entries =
        fs::read_dir(dir).map_err(|e| Error::config(format!("cannot list {}: {e}", dir.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|r| r.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.ends_with(".meta"))
        .collect();
    names.sort();
    Ok(names)
}

/// Loads image/label pairs from `dir/images` and `dir/labels`, matched by
/// file name; the sample id is the name up to its first dot.
fn load_pairs(dir: &Path) -> Result<Vec<Sample>> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    let names = sorted_file_names(&images)?;
    if names.is_empty() {
        return Err(Error::config(format!("no image volumes under {}", images.display())));
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let label_path = labels.join(&name);
        if !label_path.exists() {
            return Err(Error::config(format!(
                "image {name} has no label volume under {}",
                labels.display()
            )));
        }
        let image = read_auto(images.join(&name), VolumeKind::Intensity)?;
        let label = read_auto(&label_path, VolumeKind::Label)?;
        let id = name.split('.').next().unwrap_or(&name).to_string();
        out.push(Sample { id, image, label });
    }
    Ok(out)
}

fn run_train<E: Element>(args: TrainArgs, seed: Option<u64>) -> Result<ExitCode> {
    let model_config = match (&args.scale, &args.model_config) {
        (Some(s), _) => ModelConfig::scale(*s),
        (None, Some(p)) => ModelConfig::from_text(&fs::read_to_string(p)?)?,
        (None, None) => return Err(Error::config("pass --scale or --model-config")),
    };

    // Precedence: flag > config file > default.
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_text(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.peak_lr {
        cfg.peak_lr = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.warmup_steps {
        cfg.warmup_steps = v;
    }
    if let Some(v) = args.total_steps {
        cfg.total_steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.window {
        cfg.window = v;
    }
    if let Some(v) = args.dice_weight {
        cfg.dice_weight = v;
    }
    if let Some(v) = args.ce_weight {
        cfg.ce_weight = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    cfg.validate()?;

    let mut samples = if let Some(n) = args.synthetic {
        if n == 0 {
            return Err(Error::config("--synthetic needs at least one volume"));
        }
        (0..n)
            .map(|i| {
                let (image, label) =
                    synthetic_volume(cfg.window, model_config.classes, cfg.seed.wrapping_add(i as u64))?;
                Ok(Sample { id: format!("synth-{i}"), image, label })
            })
            .collect::<Result<Vec<_>>>()?
    } else if let Some(dir) = &args.data_dir {
        load_pairs(dir)?
    } else {
        return Err(Error::config("pass --data-dir or --synthetic"));
    };

    if let (Some(fold), Some(folds)) = (args.fold, args.folds) {
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let (train_idx, val_idx) = fold_split(&ids, fold, folds)?;
        eprintln!("fold {fold} of {folds}: {} training, {} held out", train_idx.len(), val_idx.len());
        let keep: HashSet<usize> = train_idx.into_iter().collect();
        samples = samples
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, s)| s)
            .collect();
    }

    fs::create_dir_all(&args.out_dir)?;
    let mut model = Model::<E>::build(&model_config, cfg.seed)?;
    eprintln!(
        "training a {}-parameter model on {} samples for {} steps",
        model.count_params(),
        samples.len(),
        cfg.total_steps
    );
    let opts = TrainOptions {
        augment: args.augment,
        checkpoint_every: args.checkpoint_every,
        checkpoint_dir: Some(args.out_dir.clone()),
        log: args.log,
        max_steps: None,
    };
    let report = train(&mut model, &samples, &cfg, &opts)?;

    let mut csv = String::from("step,lr,loss\n");
    for (i, (loss, lr)) in report.losses.iter().zip(&report.lrs).enumerate() {
        csv.push_str(&format!("{i},{lr:?},{loss:?}\n"));
    }
    fs::write(args.out_dir.join("loss.csv"), csv)?;

    println!(
        "trained {} steps, loss {:.6} -> {:.6}",
        report.losses.len(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", args.out_dir.join("final.unst").display());
    println!("loss trace: {}", args.out_dir.join("loss.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn run_infer<E: Element>(args: InferArgs, threads: usize) -> Result<ExitCode> {
    let volume = read_auto(&args.input, VolumeKind::Intensity)?;
    let mut maps = Vec::with_capacity(args.checkpoints.len());
    let mut classes = 0usize;
    for path in &args.checkpoints {
        let (model, step) = checkpoint::load::<E>(path)?;
        if let Some(w) = args.window {
            if w != model.config.window {
                return Err(Error::config(format!(
                    "{} was trained for window {:?}, not the requested {:?}",
                    path.display(),
                    model.config.window,
                    w
                )));
            }
        }
        if maps.is_empty() {
            classes = model.config.classes;
        } else if classes != model.config.classes {
            return Err(Error::config(format!(
                "cannot ensemble a {classes}-class model with the {}-class {}",
                model.config.classes,
                path.display()
            )));
        }
        eprintln!("{}: step {step}, window {:?}", path.display(), model.config.window);
        maps.push(sliding_window(&model, &volume, args.overlap, threads)?);
    }

    let fused = ensemble(&maps)?;
    let labels = argmax_labels(&fused, volume.spacing)?;
    write_volume(&args.output, &labels)?;
    println!("wrote {}", args.output.display());

    if let Some(dir) = &args.probs {
        fs::create_dir_all(dir)?;
        let data = fused.to_vec();
        let vox: usize = volume.extents.iter().product();
        for k in 0..classes {
            let slice: Vec<f64> = data[k * vox..(k + 1) * vox].iter().map(|v| v.to_f64()).collect();
            let v = Volume::new(volume.extents, volume.spacing, VolumeKind::Intensity, slice)?;
            let path = dir.join(format!("class-{k:03}.nii"));
            write_volume(&path, &v)?;
        }
        println!("wrote {classes} probability volumes under {}", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn csv_float(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:?}")
    }
}

fn run_eval(args: EvalArgs) -> Result<ExitCode> {
    if args.classes < 2 {
        return Err(Error::config("--classes must be at least 2 (background plus one class)"));
    }
    let names = sorted_file_names(&args.pred_dir)?;
    if names.is_empty() {
        return Err(Error::config(format!("no predictions under {}", args.pred_dir.display())));
    }
    let mut pairs = Vec::with_capacity(names.len());
    for name in &names {
        let truth_path = args.true_dir.join(name);
        if !truth_path.exists() {
            return Err(Error::config(format!(
                "prediction {name} has no reference under {}",
                args.true_dir.display()
            )));
        }
        let pred = read_auto(args.pred_dir.join(name), VolumeKind::Label)?;
        let truth = read_auto(&truth_path, VolumeKind::Label)?;
        pairs.push((pred, truth));
    }

    let report = MetricsReport::compute(&pairs, args.classes)?;
    let mut out = String::new();
    out.push_str(&format!(
        "# cohort of {} subjects, {} declared classes, {} present\n",
        pairs.len(),
        args.classes,
        report.classes.len()
    ));
    out.push_str("# hd_mm over six-connected boundary voxels; inf when exactly one side lacks the class\n");
    out.push_str("# volumes in cm^3; r_squared = 1 - SS_res/SS_tot with prediction estimating truth\n");
    out.push_str("# pct_diff averages 100|Vp - Vt| / ((Vp + Vt)/2); bland-altman differences are predicted - true\n");
    out.push_str(
        "class,dsc,hd_mm,r_squared,pearson_r,abs_dev_cm3,pct_diff,ba_mean_cm3,ba_sd_cm3,ba_lo_cm3,ba_hi_cm3\n",
    );
    for (i, &class) in report.classes.iter().enumerate() {
        let (v, b) = (&report.volumetrics[i], &report.bland_altman[i]);
        let vfields = match v {
            Some(v) => format!(
                "{},{},{},{}",
                csv_float(v.r_squared),
                csv_float(v.pearson_r),
                csv_float(v.abs_dev),
                csv_float(v.pct_diff)
            ),
            None => ",,,".into(),
        };
        let bfields = match b {
            Some(b) => format!(
                "{},{},{},{}",
                csv_float(b.mean_diff),
                csv_float(b.sd_diff),
                csv_float(b.limits.0),
                csv_float(b.limits.1)
            ),
            None => ",,,".into(),
        };
        out.push_str(&format!(
            "{class},{},{},{vfields},{bfields}\n",
            csv_float(report.dsc[i]),
            csv_float(report.hd[i])
        ));
    }
    out.push_str(&format!(
        "mean,{},{},,,,,,,,\n",
        csv_float(report.mean_dsc),
        csv_float(report.mean_hd)
    ));
    print!("{out}");

    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), &out)?;
        println!("wrote {}", dir.join("report.csv").display());
        if args.plot_data {
            for &class in &report.classes {
                let mut scatter = String::from("subject,pred_cm3,true_cm3\n");
                let mut points = String::from("subject,mean_cm3,diff_cm3\n");
                for (name, (pred, truth)) in names.iter().zip(&pairs) {
                    let (vp, vt) = (volume_cm3(pred, class), volume_cm3(truth, class));
                    scatter.push_str(&format!("{name},{},{}\n", csv_float(vp), csv_float(vt)));
                    points.push_str(&format!(
                        "{name},{},{}\n",
                        csv_float((vp + vt) / 2.0),
                        csv_float(vp - vt)
                    ));
                }
                fs::write(dir.join(format!("scatter-class{class}.csv")), scatter)?;
                fs::write(dir.join(format!("bland-altman-class{class}.csv")), points)?;
            }
            println!("wrote plot data for {} classes under {}", report.classes.len(), dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Published figures for the three scale presets, used as context lines.
fn published_reference(config: &ModelConfig) -> Option<(Scale, &'static str)> {
    for (scale, params) in [(Scale::S, "22.4M"), (Scale::B, "87.3M"), (Scale::L, "279.6M")] {
        let mut preset = ModelConfig::scale(scale);
        preset.window = config.window;
        if &preset == config {
            return Some((scale, params));
        }
    }
    None
}

fn run_inspect(args: InspectArgs) -> Result<ExitCode> {
    let (mut config, source) = if let Some(s) = args.scale {
        (ModelConfig::scale(s), format!("scale {s}"))
    } else if let Some(p) = &args.config {
        (ModelConfig::from_text(&fs::read_to_string(p)?)?, p.display().to_string())
    } else if let Some(p) = &args.checkpoint {
        let (c, step) = checkpoint::read_header(p)?;
        (c, format!("{} at step {step}", p.display()))
    } else {
        return Err(Error::config("pass --scale, --config, or --checkpoint"));
    };
    if let Some(w) = args.window {
        config.window = w;
    }
    config.validate()?;

    println!("configuration from {source}");
    for line in config.to_text().lines() {
        println!("  {line}");
    }

    let [w0, w1, w2] = config.window;
    println!();
    println!("hierarchy geometry at window {w0}x{w1}x{w2}");
    for level in 0..config.levels() {
        let (g, t, n) = config.block_geometry(level)?;
        println!(
            "  h{level}: block grid {g}, {t} blocks of {n} tokens, width {}, {} heads, depth {}",
            config.widths[level], config.heads[level], config.depths[level]
        );
    }

    let params = config.param_report()?;
    println!();
    println!("parameters");
    for (name, count) in &params.groups {
        println!("  {name:<22} {count:>14}");
    }
    println!("  {:<22} {:>14}  ({:.1}M)", "total", params.total, params.total as f64 / 1e6);

    let flops = config.flops_report()?;
    println!();
    println!("forward flops for one {w0}x{w1}x{w2} window, batch 1 (multiply-accumulate = 2)");
    for (name, count) in &flops.groups {
        println!("  {name:<22} {count:>14}");
    }
    println!("  {:<22} {:>14}  ({:.1}G)", "total", flops.total, flops.total as f64 / 1e9);
    println!("  attention flops per hierarchy: {:?}", flops.attention);

    if let Some((scale, published)) = published_reference(&config) {
        println!();
        println!("published reference for scale {scale}: {published} parameters");
        if scale == Scale::B && config.window == [96; 3] {
            println!("published reference for scale B at a 96x96x96 window: 261.7 GFLOPs");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let mut failures = 0usize;
    let mut total = 0usize;
    let mut show = |name: &str, report: &unest::tensor::GradCheckReport, tol: f64| {
        total += 1;
        let pass = report.max_rel_err < tol;
        if !pass {
            failures += 1;
        }
        println!(
            "{}  {name:<28} max rel err {:.3e} over {} probes (tolerance {tol:.0e})",
            if pass { "PASS" } else { "FAIL" },
            report.max_rel_err,
            report.probes
        );
    };

    for check in gradcheck_ops()? {
        show(check.name, &check.report, 1e-4);
    }
    if !args.ops_only {
        let model = gradcheck_model(args.probes)?;
        show(model.name, &model.report, 1e-3);
    }
    if failures == 0 {
        println!("gradcheck: all {total} checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck: {failures} of {total} checks failed");
        Ok(ExitCode::FAILURE)
    }
}

fn run_selftest() -> Result<ExitCode> {
    let checks = property_suite()?;
    let mut failures = 0usize;
    for c in &checks {
        if !c.pass {
            failures += 1;
        }
        println!("{}  {:<36} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failures == 0 {
        println!("selftest: all {} checks passed", checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("selftest: {failures} of {} checks failed", checks.len());
        Ok(ExitCode::FAILURE)
    }
}
