use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dmlseg::checkpoint::{self, Container};
use dmlseg::config::{
    check_known_keys, data_config_from_kv, format_kv, model_config_from_kv, model_config_to_kv,
    read_kv_file, KvMap, Precision, TrainConfig,
};
use dmlseg::gt::{LabelMask, IGNORE};
use dmlseg::metrics;
use dmlseg::netpbm::{self, RgbImage};
use dmlseg::synth::{self, Sample, SceneSpec, Split};
use dmlseg::tensor::DType;
use dmlseg::train::{self, ExperimentConfig, TrainOptions};
use dmlseg::{Element, Error, Model, ModelConfig, Result};

#[derive(Parser, Debug)]
#[command(
    name = "dmlseg",
    version,
    about = "Segmentation with dense multi-label blocks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run everything on the calling thread.
    #[arg(long)]
    serial: bool,
    /// Log progress at info level (overridden by RUST_LOG).
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct ModelFlags {
    /// Number of DML levels (0 = plain FCN).
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Exponent of the `lr·(1 − t/T)^p` decay; constant rate when absent.
    #[arg(long)]
    lr_poly: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// train32 or check64.
    #[arg(long)]
    precision: Option<Precision>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (PPM images, PGM masks, manifest).
    GenData {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Precompute segmentation and multi-label targets into a cache file.
    GenGt {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Train on the corpus's train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Target cache written by `gen-gt`.
        #[arg(long)]
        gt_cache: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[command(flatten)]
        common: Common,
    },
    /// Write colour-coded PPM and raw PGM label maps.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus to predict on; alternatively pass `--image`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        /// A single PPM image.
        #[arg(long, conflicts_with = "data")]
        image: Option<PathBuf>,
        /// Predict at most this many images of the split.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare autodiff gradients with central finite differences (64-bit).
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate the baseline and 1/2/3-level variants per seed.
    Experiment {
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated level counts.
        #[arg(long, value_delimiter = ',')]
        level_set: Option<Vec<usize>>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
}

fn load_kv(common: &Common) -> Result<KvMap> {
    let kv = match &common.config {
        Some(p) => read_kv_file(p)?,
        None => KvMap::new(),
    };
    check_known_keys(&kv)?;
    Ok(kv)
}

fn model_config(kv: &KvMap, base: &ModelConfig, flags: &ModelFlags) -> Result<ModelConfig> {
    let mut c = model_config_from_kv(kv, base)?;
    if let Some(l) = flags.lambda {
        c.lambda = l;
    }
    if let Some(levels) = flags.levels {
        c = c.with_levels(levels)?;
    }
    c.validate()?;
    Ok(c)
}

fn train_config(
    kv: &KvMap,
    common: &Common,
    flags: &TrainFlags,
    base: TrainConfig,
) -> Result<TrainConfig> {
    let mut c = base;
    c.apply_kv(kv)?;
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(v) = flags.iterations {
        c.iterations = v;
    }
    if let Some(v) = flags.lr {
        c.lr = v;
    }
    if flags.lr_poly.is_some() {
        c.lr_poly = flags.lr_poly;
    }
    if let Some(v) = flags.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = flags.eval_every {
        c.eval_every = v;
    }
    if let Some(v) = flags.precision {
        c.precision = v;
    }
    c.validate()?;
    Ok(c)
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::usage("this command needs --out"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Model config matching a corpus when the config file does not set the
/// input size or class count.
fn base_for_corpus(spec: &SceneSpec) -> ModelConfig {
    ModelConfig {
        num_classes: spec.num_classes,
        input_size: (spec.height, spec.width),
        ..ModelConfig::default()
    }
}

fn stored_dtype(c: &Container) -> Result<DType> {
    c.entries
        .first()
        .map(|e| e.dtype)
        .ok_or_else(|| Error::data("checkpoint holds no parameters"))
}

fn gen_data(n_train: Option<usize>, n_val: Option<usize>, common: &Common) -> Result<()> {
    let kv = load_kv(common)?;
    let (mut spec, mut nt, mut nv) = data_config_from_kv(&kv, &SceneSpec::default(), (500, 100))?;
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    nt = n_train.unwrap_or(nt);
    nv = n_val.unwrap_or(nv);
    let out = require_out(common)?;
    synth::check_class_balance(&spec, (nt + nv).max(500) as u64)?;
    let corpus = synth::write_corpus(&spec, nt, nv, out)?;
    println!(
        "wrote {} train + {} val scenes to {} (content hash {})",
        corpus.n_train,
        corpus.n_val,
        out.display(),
        corpus.content_hash
    );
    Ok(())
}

fn load_all(corpus: &synth::Corpus) -> Result<Vec<Sample>> {
    let mut all = corpus.load(Split::Train)?;
    all.extend(corpus.load(Split::Val)?);
    Ok(all)
}

fn gen_gt(data: &Path, flags: &ModelFlags, common: &Common) -> Result<()> {
    let kv = load_kv(common)?;
    let corpus = synth::read_corpus(data)?;
    let config = model_config(&kv, &base_for_corpus(&corpus.spec), flags)?;
    let samples = load_all(&corpus)?;
    let targets = train::prepare_all_targets(&samples, &config, common.serial)?;
    let items: Vec<_> = samples.iter().map(|s| &s.mask).zip(&targets).collect();
    let container = checkpoint::targets_container(&config, &items);
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| data.join("targets.dmls"));
    container.write(&out)?;
    println!(
        "cached targets of {} masks in {}",
        samples.len(),
        out.display()
    );
    Ok(())
}

fn run_train<T: Element>(
    samples: &[Sample],
    targets: Vec<dmlseg::gt::ImageTargets>,
    config: ModelConfig,
    cfg: &TrainConfig,
    out: &Path,
    serial: bool,
) -> Result<()> {
    let model = Model::<T>::new(config, cfg.seed)?;
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        serial,
    };
    let result = train::train_model(model, samples, &targets, cfg, &opts)?;
    let first = result.losses.first().map(|r| r.total).unwrap_or(f64::NAN);
    let last = result.losses.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "trained {} iterations: objective {first:.4} -> {last:.4}; checkpoint {}",
        cfg.iterations,
        out.join("model.dmls").display()
    );
    Ok(())
}

fn train_cmd(
    data: &Path,
    gt_cache: Option<&Path>,
    mflags: &ModelFlags,
    tflags: &TrainFlags,
    common: &Common,
) -> Result<()> {
    let kv = load_kv(common)?;
    let corpus = synth::read_corpus(data)?;
    let config = model_config(&kv, &base_for_corpus(&corpus.spec), mflags)?;
    let cfg = train_config(&kv, common, tflags, TrainConfig::default())?;
    let out = require_out(common)?;
    create_dir(out)?;
    let samples = corpus.load(Split::Train)?;
    let targets = match gt_cache {
        Some(path) => {
            let cache = Container::read(path)?;
            let mut v = Vec::with_capacity(samples.len());
            for s in &samples {
                match checkpoint::cached_targets(&cache, &config, &s.mask)? {
                    Some(t) => v.push(t),
                    None => v.push(dmlseg::gt::prepare_targets(&s.mask, &config)?),
                }
            }
            v
        }
        None => train::prepare_all_targets(&samples, &config, common.serial)?,
    };
    let mut echo = model_config_to_kv(&config);
    echo.extend(cfg.to_kv());
    echo.push(("data.content_hash".into(), corpus.content_hash.clone()));
    write_text(&out.join("train.cfg"), &format_kv(&echo))?;
    info!(
        "architecture:\n{}",
        Model::<f32>::new(config.clone(), cfg.seed)?.architecture()
    );
    match cfg.precision {
        Precision::Train32 => run_train::<f32>(&samples, targets, config, &cfg, out, common.serial),
        Precision::Check64 => run_train::<f64>(&samples, targets, config, &cfg, out, common.serial),
    }
}

fn eval_with<T: Element>(
    c: &Container,
    samples: &[Sample],
    serial: bool,
) -> Result<metrics::EvalReport> {
    let model: Model<T> = checkpoint::model_from_container(c, None)?;
    train::evaluate(&model, samples, serial)
}

fn eval_cmd(ckpt: &Path, data: &Path, split: Split, common: &Common) -> Result<()> {
    let corpus = synth::read_corpus(data)?;
    let samples = corpus.load(split)?;
    let c = Container::read(ckpt)?;
    let report = match stored_dtype(&c)? {
        DType::F32 => eval_with::<f32>(&c, &samples, common.serial)?,
        DType::F64 => eval_with::<f64>(&c, &samples, common.serial)?,
        DType::U8 => {
            return Err(Error::data(
                "checkpoint does not hold floating-point parameters",
            ))
        }
    };
    let name = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    print!("{}", metrics::table(&[(name, &report)]));
    println!(
        "pixel accuracy {:.4} over {} images",
        report.pixel_accuracy(),
        report.image_count
    );
    if let Some(out) = &common.out {
        create_dir(out)?;
        write_text(&out.join(format!("eval_{split}.csv")), &report.to_csv())?;
    }
    Ok(())
}

fn class_color(k: u8) -> [u8; 3] {
    const COLORS: [[u8; 3]; 12] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 190],
        [0, 128, 128],
    ];
    if k == IGNORE {
        return [255, 255, 255];
    }
    match COLORS.get(k as usize) {
        Some(&c) => c,
        None => {
            let h = (k as u32).wrapping_mul(2_654_435_761);
            [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
        }
    }
}

fn colorize(mask: &LabelMask) -> RgbImage {
    let mut img = RgbImage::new(mask.height(), mask.width());
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            img.set(y, x, class_color(mask.get(y, x)));
        }
    }
    img
}

fn predict_with<T: Element>(
    c: &Container,
    images: &[Sample],
    serial: bool,
) -> Result<Vec<LabelMask>> {
    let model: Model<T> = checkpoint::model_from_container(c, None)?;
    train::predict_all(&model, images, serial)
}

fn predict_cmd(
    ckpt: &Path,
    data: Option<&Path>,
    split: Split,
    image: Option<&Path>,
    limit: Option<usize>,
    common: &Common,
) -> Result<()> {
    let out = require_out(common)?;
    let c = Container::read(ckpt)?;
    let (names, samples): (Vec<String>, Vec<Sample>) = match (data, image) {
        (_, Some(path)) => {
            let img = netpbm::read_ppm(path)?;
            let mask = LabelMask::filled(img.height, img.width, IGNORE);
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string();
            (vec![name], vec![Sample { image: img, mask }])
        }
        (Some(dir), None) => {
            let corpus = synth::read_corpus(dir)?;
            let mut samples = corpus.load(split)?;
            samples.truncate(limit.unwrap_or(usize::MAX));
            let names = (0..samples.len())
                .map(|i| format!("{split}_{i:05}"))
                .collect();
            (names, samples)
        }
        (None, None) => return Err(Error::usage("predict needs --data or --image")),
    };
    let preds = match stored_dtype(&c)? {
        DType::F32 => predict_with::<f32>(&c, &samples, common.serial)?,
        DType::F64 => predict_with::<f64>(&c, &samples, common.serial)?,
        DType::U8 => {
            return Err(Error::data(
                "checkpoint does not hold floating-point parameters",
            ))
        }
    };
    create_dir(out)?;
    for (name, pred) in names.iter().zip(&preds) {
        netpbm::write_ppm(&out.join(format!("{name}_pred.ppm")), &colorize(pred))?;
        netpbm::write_pgm(
            &out.join(format!("{name}_pred.pgm")),
            pred.height(),
            pred.width(),
            pred.data(),
        )?;
    }
    println!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}

fn grad_check_cmd(tolerance: f64, step: f64, flags: &ModelFlags, common: &Common) -> Result<()> {
    let kv = load_kv(common)?;
    let config = model_config(&kv, &ModelConfig::grad_check(), flags)?;
    let report = train::grad_check(&config, tolerance, step, common.seed.unwrap_or(1))?;
    print!("{}", report.render());
    if let Some(out) = &common.out {
        create_dir(out)?;
        write_text(&out.join("grad_check.txt"), &report.render())?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "gradient check failed: max relative error {:.3e} exceeds {tolerance:.1e}",
            report.max_rel_err
        )))
    }
}

#[allow(clippy::too_many_arguments)]
fn experiment_cmd(
    seeds: Option<Vec<u64>>,
    level_set: Option<Vec<usize>>,
    n_train: Option<usize>,
    n_val: Option<usize>,
    tflags: &TrainFlags,
    common: &Common,
) -> Result<()> {
    let kv = load_kv(common)?;
    let defaults = ExperimentConfig::default();
    let (scene, nt, nv) =
        data_config_from_kv(&kv, &defaults.scene, (defaults.n_train, defaults.n_val))?;
    let model = model_config_from_kv(&kv, &base_for_corpus(&scene))?;
    let train = train_config(&kv, common, tflags, defaults.train.clone())?;
    let seeds = match (seeds, kv.get("experiment.seeds")) {
        (Some(v), _) => v,
        (None, Some(v)) => v
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad seed `{s}` in experiment.seeds")))
            })
            .collect::<Result<_>>()?,
        (None, None) => defaults.seeds.clone(),
    };
    let cfg = ExperimentConfig {
        scene,
        n_train: n_train.unwrap_or(nt),
        n_val: n_val.unwrap_or(nv),
        model,
        train,
        seeds,
        levels: level_set.unwrap_or(defaults.levels),
    };
    let out = require_out(common)?;
    let rows = train::run_experiment(&cfg, Some(out), common.serial)?;
    print!("{}", train::experiment_table(&rows));
    println!("rows written to {}", out.join("experiment.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            n_train,
            n_val,
            common,
        } => gen_data(n_train, n_val, &common),
        Command::GenGt {
            data,
            model,
            common,
        } => gen_gt(&data, &model, &common),
        Command::Train {
            data,
            gt_cache,
            model,
            train,
            common,
        } => train_cmd(&data, gt_cache.as_deref(), &model, &train, &common),
        Command::Eval {
            checkpoint,
            data,
            split,
            common,
        } => eval_cmd(&checkpoint, &data, split, &common),
        Command::Predict {
            checkpoint,
            data,
            split,
            image,
            limit,
            common,
        } => predict_cmd(
            &checkpoint,
            data.as_deref(),
            split,
            image.as_deref(),
            limit,
            &common,
        ),
        Command::GradCheck {
            tolerance,
            step,
            model,
            common,
        } => grad_check_cmd(tolerance, step, &model, &common),
        Command::Experiment {
            seeds,
            level_set,
            n_train,
            n_val,
            train,
            common,
        } => experiment_cmd(seeds, level_set, n_train, n_val, &train, &common),
    }
}

fn verbose(cli: &Cli) -> bool {
    match &cli.command {
        Command::GenData { common, .. }
        | Command::GenGt { common, .. }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Predict { common, .. }
        | Command::GradCheck { common, .. }
        | Command::Experiment { common, .. } => common.verbose,
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
    let default_level = if verbose(&cli) { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
