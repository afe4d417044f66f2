use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use frcnn::ablation::run_ablation;
use frcnn::boxfile::{self, BoxRecord};
use frcnn::checkpoint::{compress_layer, Checkpoint};
use frcnn::config::{init_global_threads, threads_from_env, Settings};
use frcnn::dataset::{load_dataset, write_dataset, Manifest};
use frcnn::detect::{evaluate_ap, Detection};
use frcnn::gradcheck;
use frcnn::net::{FcLayer, Linear};
use frcnn::svd::{bench_compression, compress, reconstruction_error};
use frcnn::synth::{generate_dataset, generate_split, DEFAULT_TEST_IMAGES, DEFAULT_TRAIN_IMAGES};
use frcnn::train::{detect_dataset, train, write_loss_log};

/// Region-based detection head: synthetic data, training, detection,
/// evaluation and layer compression.
#[derive(Parser, Debug)]
#[command(name = "frcnn", version)]
struct Cli {
    /// Settings file with `key = value` lines; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (features, ground truth, proposals).
    GenData(GenDataArgs),
    /// Train a detection head on a dataset.
    Train(TrainArgs),
    /// Run detection and write one box file per image.
    Detect(DetectArgs),
    /// Score detections against ground truth; prints per-class AP.
    Eval(EvalArgs),
    /// Replace a fully connected layer with its truncated-SVD factorization.
    Compress(CompressArgs),
    /// Time a dense layer against its truncated-SVD factorization.
    BenchSvd(BenchSvdArgs),
    /// Compare training regimes across seeds.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = DEFAULT_TRAIN_IMAGES)]
    images: usize,
    /// Index of the first scene; sets generated from the same seed with
    /// disjoint index ranges are disjoint.
    #[arg(long, default_value_t = 0)]
    first: usize,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// multitask, cls-only or stage-wise.
    #[arg(long)]
    mode: Option<String>,
    /// Iterations per training phase.
    #[arg(long)]
    iterations: Option<usize>,
    /// Weight of the box regression loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Iteration at which the learning rate drops.
    #[arg(long)]
    lr_step: Option<usize>,
    /// Loss log path (default: `<out>/loss.tsv`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `<image id>.txt` box files.
    #[arg(long)]
    out: PathBuf,
    /// single or pyramid.
    #[arg(long)]
    scale: Option<String>,
    /// NMS IoU threshold.
    #[arg(long)]
    nms: Option<f64>,
    /// Keep proposals as predicted boxes instead of applying box regression.
    #[arg(long)]
    no_bbox: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of `<image id>.txt` detection files.
    #[arg(long)]
    detections: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// IoU needed for a true positive.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trunk layer name, e.g. fc6.
    #[arg(long)]
    layer: String,
    /// Rank kept.
    #[arg(long)]
    rank: usize,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchSvdArgs {
    /// Output width.
    #[arg(long, default_value_t = 1024)]
    u: usize,
    /// Input width.
    #[arg(long, default_value_t = 1024)]
    v: usize,
    /// Rank kept.
    #[arg(long, default_value_t = 64)]
    t: usize,
    /// RoIs per batch.
    #[arg(long, default_value_t = 2000)]
    rois: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Training manifest; a synthetic set is generated when omitted.
    #[arg(long, requires = "test")]
    train: Option<PathBuf>,
    /// Test manifest.
    #[arg(long, requires = "train")]
    test: Option<PathBuf>,
    /// Iterations per training phase.
    #[arg(long)]
    iterations: Option<usize>,
    /// Seed for the generated synthetic sets.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn settings(cli: &Cli) -> Result<Settings> {
    let mut s = match &cli.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::new(),
    };
    s.set_opt("seed", cli.seed)?;
    Ok(s)
}

fn gen_data(s: &mut Settings, args: &GenDataArgs) -> Result<()> {
    s.set_opt("classes", args.classes)?;
    s.set_opt("channels", args.channels)?;
    let cfg = s.synth_config()?;
    let seed = s.get_or("seed", 0u64)?;
    let dataset = generate_dataset(args.images, &cfg, seed, args.first)?;
    let manifest = write_dataset(&args.out, &dataset)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train_cmd(s: &mut Settings, args: &TrainArgs) -> Result<()> {
    s.set_opt("mode", args.mode.as_ref())?;
    s.set_opt("iterations", args.iterations)?;
    s.set_opt("lambda", args.lambda)?;
    s.set_opt("base_lr", args.lr)?;
    s.set_opt("lr_step", args.lr_step)?;
    let run = s.run_config()?;
    let dataset = load_dataset(&args.data)?;
    let outcome = train(&run, &dataset)?;
    let ckpt = Checkpoint {
        net: outcome.net,
        normalizer: outcome.normalizer,
        iteration: outcome.log.len(),
        state: Some(outcome.state),
    };
    ckpt.save(&args.out)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.join("loss.tsv"));
    write_loss_log(&log_path, &outcome.log)?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!(
            "{} iterations, loss {:.4} -> {:.4}",
            outcome.log.len(),
            first.total,
            last.total
        );
    }
    Ok(())
}

fn manifest_ids(path: &Path) -> Result<Vec<String>> {
    Ok(Manifest::read(path)?
        .entries
        .into_iter()
        .map(|e| e.id)
        .collect())
}

fn detect_cmd(s: &mut Settings, args: &DetectArgs) -> Result<()> {
    s.set_opt("scale", args.scale.as_ref())?;
    s.set_opt("nms", args.nms)?;
    let run = s.run_config()?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    if dataset.channels() != ckpt.net.channels {
        bail!(
            "dataset has {} feature channels, checkpoint expects {}",
            dataset.channels(),
            ckpt.net.channels
        );
    }
    let cfg = run.detect_config(dataset.stride, !args.no_bbox);
    let dets = detect_dataset(&ckpt.net, &ckpt.normalizer, &dataset, &run.scale, &cfg)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut total = 0;
    for (scene, image_dets) in dataset.scenes.iter().zip(&dets) {
        let records: Vec<BoxRecord> = image_dets
            .iter()
            .map(|d| BoxRecord {
                bbox: d.bbox,
                label: Some(d.class),
                score: Some(d.score),
            })
            .collect();
        total += records.len();
        boxfile::write(&args.out.join(format!("{}.txt", scene.image.id)), &records)?;
    }
    println!("{total} detections in {} images", dets.len());
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let ids = manifest_ids(&args.data)?;
    let mut dets = Vec::with_capacity(ids.len());
    for id in &ids {
        let path = args.detections.join(format!("{id}.txt"));
        let records = boxfile::read(&path)?;
        let image_dets = records
            .into_iter()
            .map(|r| match (r.label, r.score) {
                (Some(class), Some(score)) => Ok(Detection {
                    bbox: r.bbox,
                    class,
                    score,
                }),
                _ => bail!(
                    "{}: detections need label and score columns",
                    path.display()
                ),
            })
            .collect::<Result<Vec<_>>>()?;
        dets.push(image_dets);
    }
    let report = evaluate_ap(
        &dets,
        &dataset.ground_truth(),
        dataset.num_classes,
        args.iou,
    )?;
    println!("class\tap");
    for (k, ap) in report.per_class.iter().enumerate() {
        match ap {
            Some(ap) => println!("{}\t{ap:.4}", k + 1),
            None => println!("{}\tundefined", k + 1),
        }
    }
    println!("mAP\t{:.4}", report.map);
    Ok(())
}

fn compress_cmd(args: &CompressArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let before = ckpt
        .net
        .trunk
        .iter()
        .find(|l| l.name == args.layer)
        .map(|l| l.op.clone());
    let net = compress_layer(&ckpt.net, &args.layer, args.rank)?;
    let after = net
        .trunk
        .iter()
        .find(|l| l.name == args.layer)
        .map(|l| l.op.clone());
    if let (Some(Linear::Dense(d)), Some(Linear::Factored(f))) = (&before, &after) {
        println!(
            "{}: {} -> {} parameters, relative reconstruction error {:.4e}",
            args.layer,
            d.param_count(),
            f.param_count(),
            reconstruction_error(d, f)?
        );
    }
    Checkpoint {
        net,
        normalizer: ckpt.normalizer,
        iteration: ckpt.iteration,
        state: None,
    }
    .save(&args.out)?;
    Ok(())
}

fn bench_svd(s: &Settings, args: &BenchSvdArgs) -> Result<()> {
    let seed = s.get_or("seed", 0u64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = FcLayer::gaussian(args.u, args.v, 0.01, &mut rng);
    let compressed = compress(&layer, args.t)?;
    let x = Array2::from_shape_fn((args.rois, args.v), |_| rng.random_range(-1.0..1.0));
    let pool = frcnn::config::thread_pool(1)?;
    let report = pool.install(|| bench_compression(&layer, &compressed, x.view(), args.repeats))?;
    println!("flop_ratio\t{:.4}", report.flop_ratio());
    println!("full_ms\t{:.3}", report.full.median.as_secs_f64() * 1e3);
    println!(
        "compressed_ms\t{:.3}",
        report.compressed.median.as_secs_f64() * 1e3
    );
    println!("speedup\t{:.2}", report.speedup());
    Ok(())
}

fn ablate_cmd(s: &mut Settings, args: &AblateArgs) -> Result<()> {
    s.set_opt("iterations", args.iterations)?;
    s.set_opt("data_seed", args.data_seed)?;
    let run = s.run_config()?;
    let (train_set, test_set) = match (&args.train, &args.test) {
        (Some(train), Some(test)) => (load_dataset(train)?, load_dataset(test)?),
        _ => generate_split(
            s.get_or("train_images", DEFAULT_TRAIN_IMAGES)?,
            s.get_or("test_images", DEFAULT_TEST_IMAGES)?,
            &s.synth_config()?,
            s.get_or("data_seed", 0u64)?,
        )?,
    };
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| run.seed + i).collect();
    let report = run_ablation(&run, &train_set, &test_set, &seeds, threads_from_env()?)?;
    let text = report.format();
    print!("{text}");
    if let Some(path) = &args.out {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    if !report.is_complete() {
        bail!("some ablation cells failed");
    }
    Ok(())
}

fn gradcheck_cmd(s: &Settings) -> Result<()> {
    let report = gradcheck::run_all(s.get_or("seed", 0u64)?)?;
    print!("{}", report.format());
    if !report.all_passed() {
        bail!("gradient check failed");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let mut s = settings(cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(&mut s, a),
        Command::Train(a) => train_cmd(&mut s, a),
        Command::Detect(a) => detect_cmd(&mut s, a),
        Command::Eval(a) => eval_cmd(a),
        Command::Compress(a) => compress_cmd(a),
        Command::BenchSvd(a) => bench_svd(&s, a),
        Command::Ablate(a) => ablate_cmd(&mut s, a),
        Command::Gradcheck => gradcheck_cmd(&s),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_global_threads() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
