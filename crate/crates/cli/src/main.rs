//! `quan`: train, evaluate, gradient-check, benchmark, map images and run ablations.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quan::ablation::run_ablation;
use quan::bench::{bench_conv, default_cases};
use quan::data::{load_checkpoint, load_cifar10, save_checkpoint, synth_orientation_classes, ImageSet, MappedImages};
use quan::engine::evaluate;
use quan::engine::registry::{run_all, GRADCHECK_TOLERANCE};
use quan::mapping::map_image;
use quan::models::{count_params, train_classifier, ClassifierConfig, QuanClassifier};
use quan::{QTensor, QuanError, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{DatasetKind, RunConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "quan", version, about = "Quaternion networks with separable Hamilton-product convolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; explicit flags override the config file.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// `key = value` settings file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset directory (CIFAR-10 binary batches)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// separable or full_hamilton
    #[arg(long)]
    mode: Option<String>,
    /// poincare, luminance, mean_brightness, raw_normalized or hamilton
    #[arg(long)]
    mapping: Option<String>,
    /// silu, relu or qprelu
    #[arg(long)]
    activation: Option<String>,
    /// Worker threads for layer kernels; 1 also zeroes the seconds column
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the classifier; writes metrics.csv, model.quan and config.txt
    Train(Common),
    /// Evaluate a checkpoint on the test (or train) split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/model.quan
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["test", "train"])]
        split: String,
    },
    /// Finite-difference check of every registered layer and loss
    Gradcheck(Common),
    /// Time fused, multi-pass and full-Hamilton convolutions; writes bench.csv
    Bench(Common),
    /// Map an image to quaternions and write its four component planes
    Map {
        image: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train every mapping × activation pair
    Ablate(Common),
}

fn exit_code(e: &QuanError) -> u8 {
    match e {
        QuanError::Config(_) | QuanError::Range(_) => EXIT_USAGE,
        QuanError::Io { .. } | QuanError::Format { .. } | QuanError::Shape(_) | QuanError::Index { .. } => EXIT_DATA,
        QuanError::Numeric(_) | QuanError::Domain(_) | QuanError::NoForward(_) => EXIT_NUMERIC,
    }
}

fn resolve(common: &Common, fallback_config: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, fallback_config) {
        (Some(p), _) => RunConfig::from_file(p)?,
        (None, Some(p)) if p.is_file() => RunConfig::from_file(p)?,
        _ => RunConfig::default(),
    };
    let flags: [(&str, Option<String>); 8] = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("epochs", common.epochs.map(|v| v.to_string())),
        ("data", common.data.as_ref().map(|p| p.display().to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
        ("mode", common.mode.clone()),
        ("mapping", common.mapping.clone()),
        ("activation", common.activation.clone()),
        ("threads", common.threads.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v).map_err(|e| QuanError::Config(format!("--{key}: {e}")))?;
        }
    }
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        // Fails only if a pool already exists, which cannot happen in a fresh process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| QuanError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| QuanError::io(path, e))
}

/// Training and test images for the configured dataset.
fn load_data(cfg: &RunConfig) -> Result<(ImageSet, ImageSet)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Cifar10 => {
            let dir = cfg
                .data
                .as_ref()
                .ok_or_else(|| QuanError::Config("the cifar10 dataset needs --data <dir>".into()))?;
            let c = load_cifar10(dir)?;
            (c.train, c.test)
        }
        DatasetKind::Synthetic => (
            synth_orientation_classes(cfg.synth_train, 2 * cfg.data_seed, cfg.synth_size, cfg.synth_classes)?,
            synth_orientation_classes(cfg.synth_test, 2 * cfg.data_seed + 1, cfg.synth_size, cfg.synth_classes)?,
        ),
    };
    let limit = |s: ImageSet, n: Option<usize>| n.map_or(s.clone(), |n| s.truncated(n));
    Ok((limit(train, cfg.train_limit), limit(test, cfg.test_limit)))
}

fn train(common: &Common) -> Result<()> {
    let cfg = resolve(common, None)?;
    let (train, test) = load_data(&cfg)?;
    create_dir(&cfg.out)?;
    let metrics = cfg.out.join("metrics.csv");
    let mut sink = quan::engine::MetricsSink::create(&metrics)?;
    let tc = cfg.train_config();
    println!(
        "training on {} images ({} test), {} epochs, {} / {} / {}",
        train.len(),
        test.len(),
        tc.epochs,
        tc.mapping,
        tc.activation,
        tc.mode
    );
    let (net, history) = train_classifier(&train, Some(&test), cfg.model, &tc, cfg.augment_config(), &mut sink)?;
    for m in &history {
        println!("{}", m.csv_row());
    }
    let ckpt = cfg.out.join("model.quan");
    save_checkpoint(&ckpt, &net.state())?;
    write_file(&cfg.out.join("config.txt"), cfg.to_text())?;
    let c = count_params(&net.params());
    println!(
        "parameters: {} ({} real-equivalent); wrote {}, {}",
        c.total,
        c.real_equivalent,
        metrics.display(),
        ckpt.display()
    );
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<&Path>, split: &str) -> Result<()> {
    let out = common.out.clone().unwrap_or_else(|| RunConfig::default().out);
    let ckpt = checkpoint.map_or_else(|| out.join("model.quan"), Path::to_path_buf);
    let saved_config = ckpt.parent().map(|d| d.join("config.txt"));
    let cfg = resolve(common, saved_config.as_deref())?;
    let tensors = load_checkpoint(&ckpt)?;
    let (train, test) = load_data(&cfg)?;
    let set = if split == "train" { &train } else { &test };
    let model = ClassifierConfig {
        classes: set.classes,
        mode: cfg.train.mode,
        activation: cfg.train.activation,
        ..cfg.model
    };
    let mut net = QuanClassifier::<f32>::new(model, &mut ChaCha8Rng::seed_from_u64(0))?;
    net.load_state(&tensors)?;
    let data = MappedImages::new(set, cfg.train.mapping, None);
    let s = evaluate(&mut net, &data, cfg.train.batch_size)?;
    println!(
        "split={split} samples={} loss={} accuracy={}",
        s.count,
        s.mean_loss(),
        s.mean_metric()
    );
    Ok(())
}

fn gradcheck(common: &Common) -> Result<()> {
    let cfg = resolve(common, None)?;
    let rows = run_all(cfg.train.seed);
    println!(
        "{:<22} {:<5} {:>11} {:>11} {:>7} {:>6}  result (tolerance {GRADCHECK_TOLERANCE:e})",
        "case", "kind", "max_rel", "max_abs", "checked", "inert"
    );
    let mut failed = 0;
    for r in &rows {
        let verdict = match (&r.error, r.passed()) {
            (Some(e), _) => format!("FAIL ({e})"),
            (None, true) => "PASS".to_string(),
            (None, false) => "FAIL".to_string(),
        };
        failed += usize::from(!r.passed());
        println!(
            "{:<22} {:<5} {:>11.3e} {:>11.3e} {:>7} {:>6}  {verdict}",
            r.name,
            r.kind.name(),
            r.max_rel_error,
            r.max_abs_error,
            r.checked,
            r.inert
        );
    }
    if failed > 0 {
        return Err(QuanError::Numeric(format!("{failed} of {} gradient checks failed", rows.len())));
    }
    println!("all {} gradient checks passed", rows.len());
    Ok(())
}

fn bench(common: &Common) -> Result<()> {
    let cfg = resolve(common, None)?;
    let report = bench_conv(&default_cases(), cfg.repeats, cfg.train.seed)?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join("bench.csv");
    write_file(&path, report.to_csv())?;
    print!("{}", report.to_csv());
    print!("{}", report.summary());
    println!("wrote {}", path.display());
    Ok(())
}

fn image_error(path: &Path, e: image::ImageError) -> QuanError {
    match e {
        image::ImageError::IoError(io) => QuanError::io(path, io),
        other => QuanError::format(path.display(), other.to_string()),
    }
}

/// Writes `<stem>.<c>.f32` (raw little-endian planes) and `<stem>.<c>.pgm`
/// previews with [-1, 1] scaled to [0, 255], for c in r, i, j, k.
fn map(image_path: &Path, common: &Common) -> Result<()> {
    let cfg = resolve(common, None)?;
    let img = image::open(image_path).map_err(|e| image_error(image_path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let q: QTensor<f32> = map_image(img.as_raw(), h, w, cfg.train.mapping)?;
    create_dir(&cfg.out)?;
    let stem = image_path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    for (c, name) in ["r", "i", "j", "k"].into_iter().enumerate() {
        let plane = q.component_slice(c)?.to_vec();
        let raw: Vec<u8> = plane.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_file(&cfg.out.join(format!("{stem}.{name}.f32")), raw)?;
        let preview: Vec<u8> = plane
            .iter()
            .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect();
        let pgm = image::GrayImage::from_raw(w as u32, h as u32, preview).expect("plane has H×W values");
        let path = cfg.out.join(format!("{stem}.{name}.pgm"));
        pgm.save(&path).map_err(|e| image_error(&path, e))?;
    }
    println!(
        "mapped {w}x{h} image with {} into {}/{stem}.{{r,i,j,k}}.{{f32,pgm}}",
        cfg.train.mapping,
        cfg.out.display()
    );
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let cfg = resolve(common, None)?;
    let (train, test) = load_data(&cfg)?;
    create_dir(&cfg.out)?;
    let report = run_ablation(&train, Some(&test), cfg.model, &cfg.train_config(), cfg.augment_config(), &cfg.out)?;
    print!("{}", report.summary_csv());
    for c in report.cells.iter().filter(|c| c.failure.is_some()) {
        eprintln!(
            "warning: {} / {} diverged: {}",
            c.mapping,
            c.activation,
            c.failure.as_deref().unwrap_or_default()
        );
    }
    println!("mapping ranking (mean final accuracy over activations):");
    for (rank, (m, acc)) in report.ranked_mappings().into_iter().enumerate() {
        println!("{}. {m} {acc}", rank + 1);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(c) => train(c),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => eval(common, checkpoint.as_deref(), split),
        Command::Gradcheck(c) => gradcheck(c),
        Command::Bench(c) => bench(c),
        Command::Map { image, common } => map(image, common),
        Command::Ablate(c) => ablate(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
