use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use marsseg::data::{
    self, class_frequency, colorize, convert_masks, load_manifest, parse_palette, synth, ManifestOptions, Split,
};
use marsseg::gradcheck::suite::{format_table, run_suite};
use marsseg::metrics::{ConfusionMatrix, EvalReport};
use marsseg::train::{parse_pairs, TrainConfig, TrainState, Trainer};
use marsseg::{Error, Result};

#[derive(Parser)]
#[command(name = "marsseg", version, about = "Mars terrain segmentation: train, evaluate and run the network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model. Trailing `--key value` pairs override config keys.
    Train(TrainArgs),
    /// Per-class IoU of a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Predict masks for images.
    Infer(InferArgs),
    /// Finite-difference gradient checks of every primitive and block.
    Gradcheck(GradcheckArgs),
    /// Class frequencies, split sizes and image extents of a dataset.
    Stats(StatsArgs),
    /// Convert palette-coloured masks to index masks.
    ConvertMasks(ConvertArgs),
    /// Write a synthetic dataset with a controlled rare-class share.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print every config key with its default and exit.
    #[arg(long)]
    list_keys: bool,
    /// Overrides such as `--optim.lr 0.01` or `--train.epochs=3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root; defaults to the one stored in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// CSV output; defaults to `<checkpoint stem>_<split>.csv` beside the checkpoint.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Pad images whose extents the network cannot take.
    #[arg(long)]
    auto_pad: bool,
    /// Also print the ids of the evaluated samples.
    #[arg(long)]
    list_ids: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image; repeat for several.
    #[arg(long, required = true)]
    image: Vec<PathBuf>,
    /// Output directory for `<stem>_mask.png` and `<stem>_overlay.png`.
    #[arg(long)]
    out: PathBuf,
    /// Edge-pad to an admissible extent and crop the prediction back.
    #[arg(long)]
    auto_pad: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum relative error per check.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, default_value_t = 0.8)]
    split_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct ConvertArgs {
    /// Lines of `R G B index`.
    #[arg(long)]
    palette: PathBuf,
    /// Directory of colour masks.
    #[arg(long)]
    src: PathBuf,
    /// Directory for index masks.
    #[arg(long)]
    dst: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Share of rare-class pixels over the whole set.
    #[arg(long, default_value_t = 0.02)]
    rare_share: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.04)]
    noise: f64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFiniteLoss { .. } => 3,
        Error::Empty(_) => 4,
        Error::Geometry(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Stats(a) => stats(a),
        Command::ConvertMasks(a) => convert(a),
        Command::Synth(a) => synth_cmd(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

const PATH_KEYS: [&str; 3] = ["data.root", "train.checkpoint", "train.history"];

/// Makes relative path values absolute against `base`.
fn anchor(pairs: &mut [(String, String)], base: &Path) {
    for (k, v) in pairs.iter_mut() {
        if PATH_KEYS.contains(&k.as_str()) && v != "none" && !v.is_empty() {
            *v = base.join(&*v).display().to_string();
        }
    }
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key =
            arg.strip_prefix("--").ok_or_else(|| Error::Config(format!("expected `--key value`, got {arg:?}")))?;
        match key.split_once('=') {
            Some((k, v)) => pairs.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("key `{key}`: missing value")))?;
                pairs.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(pairs)
}

fn cwd() -> Result<PathBuf> {
    Ok(std::env::current_dir()?)
}

fn train(a: TrainArgs) -> Result<u8> {
    if a.list_keys {
        for (k, d, help) in marsseg::train::KEYS {
            println!("{k:<28} {d:<12} {help}");
        }
        return Ok(0);
    }
    let cwd = cwd()?;
    let (mut pairs, base) = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let dir = cwd.join(path.parent().unwrap_or(Path::new("")));
            let mut pairs = parse_pairs(&text)?;
            anchor(&mut pairs, &dir);
            (pairs, dir)
        }
        None => (Vec::new(), cwd.clone()),
    };
    if !pairs.iter().any(|(k, _)| k == "data.root") {
        pairs.push(("data.root".into(), base.display().to_string()));
    }
    let mut overrides = parse_overrides(&a.overrides)?;
    anchor(&mut overrides, &cwd);
    pairs.extend(overrides);
    let mut config = TrainConfig::from_pairs(&pairs, Path::new(""))?;
    config.checkpoint.get_or_insert_with(|| base.join("checkpoint.mseg"));
    config.history.get_or_insert_with(|| base.join("history.csv"));

    let mut trainer = Trainer::from_config(config)?;
    println!("# resolved config");
    print!("{}", trainer.state.config.to_canonical_text());
    println!("# {} training entries, {} classes", trainer.train_len(), trainer.class_names.len());
    trainer.run()?;
    let last = trainer.state.history.last().expect("at least one epoch ran");
    println!(
        "finished {} epochs: train_loss {:.6}, val_mIoU {}",
        trainer.state.epoch,
        last.train_loss,
        last.val_miou.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
    );
    if let Some(p) = &trainer.state.config.checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<u8> {
    let state = TrainState::load(&a.checkpoint)?;
    let split = Split::parse(&a.split)?;
    let dc = &state.config.data;
    let root = a.data.clone().unwrap_or_else(|| dc.root.clone());
    let manifest = load_manifest(
        &root,
        &ManifestOptions {
            split_ratio: dc.split_ratio,
            val_fraction: dc.val_fraction,
            seed: dc.split_seed,
            classes: None,
        },
    )?;
    if manifest.num_classes() != state.config.network.num_classes {
        return Err(Error::Config(format!(
            "dataset lists {} classes but the checkpoint predicts {}",
            manifest.num_classes(),
            state.config.network.num_classes
        )));
    }
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(Error::Empty(format!("split `{}` of {} has no samples", split.name(), root.display())));
    }
    let model = &state.model;
    let mut conf = ConfusionMatrix::new(manifest.num_classes());
    for e in &entries {
        let sample = data::load_sample(e)?;
        let pred = model.predict_image(&sample.image, a.auto_pad)?;
        conf.accumulate(&pred, &sample.mask)?;
    }
    let report = EvalReport::new(&manifest.class_names, &conf)?;
    println!("# {} split: {} images", split.name(), entries.len());
    if a.list_ids {
        for e in &entries {
            println!("id {}", e.id);
        }
    }
    print!("{}", report.to_table());
    let csv = a.csv.unwrap_or_else(|| {
        let stem = a.checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        a.checkpoint.with_file_name(format!("{stem}_{}.csv", split.name()))
    });
    std::fs::write(&csv, report.to_csv())?;
    info!("wrote {}", csv.display());
    Ok(0)
}

fn infer(a: InferArgs) -> Result<u8> {
    let state = TrainState::load(&a.checkpoint)?;
    std::fs::create_dir_all(&a.out)?;
    for path in &a.image {
        let image = data::read_image(path)?;
        let mask = state.model.predict_image(&image, a.auto_pad)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let mask_path = a.out.join(format!("{stem}_mask.png"));
        let overlay_path = a.out.join(format!("{stem}_overlay.png"));
        data::write_mask(&mask_path, &mask)?;
        colorize(&mask, Some(&image))?.save(&overlay_path)?;
        println!("{} -> {}, {}", path.display(), mask_path.display(), overlay_path.display());
    }
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    let rows = run_suite(a.seed, a.tol)?;
    print!("{}", format_table(&rows));
    let failed = rows.iter().filter(|r| !r.report.passed).count();
    println!("{} of {} checks passed at tol {:e} (seed {})", rows.len() - failed, rows.len(), a.tol, a.seed);
    Ok(if failed == 0 { 0 } else { 1 })
}

fn stats(a: StatsArgs) -> Result<u8> {
    let opts = ManifestOptions {
        split_ratio: a.split.split_ratio,
        val_fraction: a.split.val_fraction,
        seed: a.split.split_seed,
        classes: None,
    };
    let manifest = load_manifest(&a.data, &opts)?;
    if manifest.entries.is_empty() {
        return Err(Error::Empty(format!("no image/mask pairs under {}", a.data.display())));
    }
    let freq = class_frequency(&manifest, None);
    let width = manifest.class_names.iter().map(String::len).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:>14}", "class", "pixel_fraction");
    for (name, f) in manifest.class_names.iter().zip(&freq) {
        println!("{name:<width$}  {f:>14.6}");
    }
    println!();
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{:<6} {}", split.name(), manifest.count(split));
    }
    let heights = manifest.entries.iter().map(|e| e.extent.0);
    let widths = manifest.entries.iter().map(|e| e.extent.1);
    println!(
        "extent min {}x{}, max {}x{}",
        heights.clone().min().unwrap_or(0),
        widths.clone().min().unwrap_or(0),
        heights.max().unwrap_or(0),
        widths.max().unwrap_or(0)
    );
    Ok(0)
}

fn convert(a: ConvertArgs) -> Result<u8> {
    let text = std::fs::read_to_string(&a.palette)?;
    let palette = parse_palette(&text)?;
    let summary = convert_masks(&a.src, &a.dst, &palette)?;
    println!(
        "converted {} masks; {} pixels had no palette entry and were set to ignore",
        summary.files, summary.unmapped_pixels
    );
    Ok(0)
}

fn synth_cmd(a: SynthArgs) -> Result<u8> {
    let cfg = synth::SynthConfig {
        count: a.count,
        size: a.size,
        rare_share: a.rare_share,
        noise: a.noise,
        seed: a.seed,
        ..Default::default()
    };
    synth::write_dataset(&a.out, &cfg)?;
    println!("wrote {} images of {}x{} to {}", a.count, a.size, a.size, a.out.display());
    Ok(0)
}
