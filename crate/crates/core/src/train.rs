//! Training loop, evaluation, finite-difference gradient check and the
//! baseline-versus-DML experiment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint::{model_container, save_model};
use crate::config::{format_kv, model_config_to_kv, TrainConfig};
use crate::error::{Error, Result};
use crate::gt::{prepare_targets, ImageTargets};
use crate::losses::{total_objective, LossReport};
use crate::metrics::{self, EvalReport};
use crate::model::{predict_labels, Model, ModelConfig};
use crate::param::sgd_step;
use crate::synth::{generate_samples, image_tensor, Sample, SceneSpec};
use crate::tensor::{Element, Tensor};

/// Applies `f` to every item, on all cores unless `serial`. Output order
/// always follows input order.
pub fn par_map<I, O, F>(items: &[I], serial: bool, f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync,
{
    let threads = if serial {
        1
    } else {
        thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    };
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<O>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<O>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::usage("worker thread panicked")))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Segmentation and multi-label targets for every sample.
pub fn prepare_all_targets(
    samples: &[Sample],
    config: &ModelConfig,
    serial: bool,
) -> Result<Vec<ImageTargets>> {
    par_map(samples, serial, |s| prepare_targets(&s.mask, config))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints and `loss.csv` go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub serial: bool,
}

#[derive(Clone, Debug)]
pub struct TrainResult<T> {
    pub model: Model<T>,
    pub losses: Vec<LossReport>,
}

impl<T> TrainResult<T> {
    pub fn loss_csv(&self, levels: usize) -> String {
        loss_csv(&self.losses, levels)
    }
}

pub fn loss_csv(losses: &[LossReport], levels: usize) -> String {
    let mut s = LossReport::csv_header(levels);
    s.push('\n');
    for (i, r) in losses.iter().enumerate() {
        s.push_str(&r.csv_row(i));
        s.push('\n');
    }
    s
}

/// Seeded without-replacement batches, reshuffled at every epoch.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        if self.cursor + batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + batch].to_vec();
        self.cursor += batch;
        b
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains a freshly initialised model (seeded by `cfg.seed`).
pub fn train<T: Element>(
    samples: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainResult<T>> {
    let targets = prepare_all_targets(samples, model_cfg, opts.serial)?;
    let model = Model::<T>::new(model_cfg.clone(), cfg.seed)?;
    train_model(model, samples, &targets, cfg, opts)
}

/// Runs `cfg.iterations` SGD steps on `model` over the given samples and
/// their precomputed targets.
pub fn train_model<T: Element>(
    mut model: Model<T>,
    samples: &[Sample],
    targets: &[ImageTargets],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainResult<T>> {
    cfg.validate()?;
    if samples.len() != targets.len() {
        return Err(Error::usage(format!(
            "{} samples but {} target sets",
            samples.len(),
            targets.len()
        )));
    }
    if cfg.batch_size > samples.len() {
        return Err(Error::config(format!(
            "batch_size {} exceeds the {} training images",
            cfg.batch_size,
            samples.len()
        )));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let levels = model.config().levels;
    let lambda = model.config().lambda;
    // distinct stream from parameter initialisation, which also uses cfg.seed
    let mut sampler = BatchSampler::new(samples.len(), cfg.seed ^ 0x5eed_ba7c);
    let mut losses = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let batch = sampler.next(cfg.batch_size);
        let images: Vec<_> = batch.iter().map(|&i| &samples[i].image).collect();
        let batch_targets: Vec<_> = batch.iter().map(|&i| &targets[i]).collect();
        let x = image_tensor::<T>(&images)?;

        let before = model.params.clone();
        let step = (|| -> Result<LossReport> {
            let mut graph = Graph::new();
            let out = model.forward(&mut graph, &x)?;
            let obj = model.objective(&mut graph, &out, &batch_targets)?;
            graph.backward(obj.total)?;
            let l_seg = graph.value(obj.l_seg).item()?.to_f64().unwrap_or(f64::NAN);
            let l_mul: Vec<f64> = obj
                .l_mul
                .iter()
                .map(|&v| {
                    graph
                        .value(v)
                        .item()
                        .map(|x| x.to_f64().unwrap_or(f64::NAN))
                })
                .collect::<Result<_>>()?;
            let valid = graph.softmax_valid_count(obj.l_seg).unwrap_or(0);
            let report = total_objective(l_seg, &l_mul, lambda, valid);
            if !report.total.is_finite() {
                return Err(Error::numeric(format!("objective is {}", report.total)));
            }
            model.params.absorb_grads(&graph, &out.params)?;
            sgd_step(
                model.params.as_mut_slice(),
                cfg.lr_at(it),
                cfg.momentum,
                cfg.weight_decay,
            )?;
            if let Some(p) = model.params.iter().find(|p| !p.value.is_finite()) {
                return Err(Error::numeric(format!(
                    "parameter `{}` became non-finite",
                    p.name
                )));
            }
            Ok(report)
        })();

        let report = match step {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => {
                model.params = before;
                let mut detail = format!("iteration {it}: {msg}");
                if let Some(dir) = &opts.out_dir {
                    let path = dir.join("last_good.dmls");
                    save_model(&model, &path)?;
                    write_file(&dir.join("loss.csv"), &loss_csv(&losses, levels))?;
                    let _ = write!(
                        detail,
                        "; parameters before this step saved to {}",
                        path.display()
                    );
                }
                return Err(Error::numeric(detail));
            }
            Err(e) => return Err(e),
        };
        if report.no_valid_pixels {
            warn!("iteration {it}: batch has no supervised pixel");
        }
        if it % 50 == 0 || it + 1 == cfg.iterations {
            info!(
                "iter {it:>6}  l_seg {:.4}  total {:.4}",
                report.l_seg, report.total
            );
        }
        losses.push(report);

        if let Some(dir) = &opts.out_dir {
            if cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 && it + 1 < cfg.iterations {
                save_model(&model, &dir.join(format!("checkpoint_{:06}.dmls", it + 1)))?;
                write_file(&dir.join("loss.csv"), &loss_csv(&losses, levels))?;
            }
        }
    }

    if let Some(dir) = &opts.out_dir {
        let mut meta = cfg.to_kv();
        meta.push(("iterations_done".into(), cfg.iterations.to_string()));
        model_container(&model, &meta).write(&dir.join("model.dmls"))?;
        write_file(&dir.join("loss.csv"), &loss_csv(&losses, levels))?;
    }
    Ok(TrainResult { model, losses })
}

/// Label maps at full mask resolution for every sample.
pub fn predict_all<T: Element>(
    model: &Model<T>,
    samples: &[Sample],
    serial: bool,
) -> Result<Vec<crate::gt::LabelMask>> {
    const CHUNK: usize = 16;
    let chunks: Vec<&[Sample]> = samples.chunks(CHUNK).collect();
    let parts = par_map(&chunks, serial, |chunk| {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = image_tensor::<T>(&images)?;
        let p = model.infer(&x)?;
        predict_labels(&p, model.config().input_size)
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Accumulates IoU and wrong-class/label counts over `samples`; the model is
/// only read.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    samples: &[Sample],
    serial: bool,
) -> Result<EvalReport> {
    let k = model.config().num_classes;
    for (i, s) in samples.iter().enumerate() {
        if (s.mask.height(), s.mask.width()) != model.config().input_size {
            return Err(Error::config(format!(
                "sample {i} is {}x{}, model expects {:?}",
                s.mask.height(),
                s.mask.width(),
                model.config().input_size
            )));
        }
    }
    let preds = predict_all(model, samples, serial)?;
    let mut report = EvalReport::new(k);
    for (pred, s) in preds.iter().zip(samples) {
        report.accumulate(pred, &s.mask)?;
    }
    report.finalize()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for p in &self.params {
            let flag = if p.max_rel_err <= self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            let _ = writeln!(
                s,
                "{:<20} {:>6} scalars  max rel err {:.3e}  {flag}",
                p.name, p.scalars, p.max_rel_err
            );
        }
        let _ = writeln!(
            s,
            "overall max rel err {:.3e} (tolerance {:.1e}): {}",
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        s
    }
}

/// Denominator floor for relative errors, so gradients that are zero up to
/// rounding compare by absolute difference instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Two synthetic images and their targets at `config`'s input size.
pub fn probe_batch(
    config: &ModelConfig,
    seed: u64,
    n: usize,
) -> Result<(Tensor<f64>, Vec<ImageTargets>)> {
    let spec = SceneSpec::for_model(config, seed)?;
    let (samples, _) = generate_samples(&spec, n, 0)?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let x = image_tensor::<f64>(&images)?;
    let targets = samples
        .iter()
        .map(|s| prepare_targets(&s.mask, config))
        .collect::<Result<_>>()?;
    Ok((x, targets))
}

/// Central-difference check of every parameter scalar in 64-bit.
pub fn grad_check(
    config: &ModelConfig,
    tolerance: f64,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut model = Model::<f64>::new(config.clone(), seed)?;
    let (x, targets) = probe_batch(config, seed, 2)?;
    let target_refs: Vec<&ImageTargets> = targets.iter().collect();

    let mut graph = Graph::new();
    let out = model.forward(&mut graph, &x)?;
    let obj = model.objective(&mut graph, &out, &target_refs)?;
    graph.backward(obj.total)?;
    model.params.absorb_grads(&graph, &out.params)?;
    let analytic: Vec<Tensor<f64>> = model
        .params
        .iter()
        .map(|p| p.grad.clone().expect("absorbed above"))
        .collect();

    let mut params = Vec::with_capacity(model.params.len());
    let mut overall = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        let name = model.params.as_slice()[pi].name.clone();
        let mut worst = 0.0f64;
        for i in 0..grad.numel() {
            let orig = model.params.as_slice()[pi].value.data()[i];
            model.params.as_mut_slice()[pi].value.data_mut()[i] = orig + step;
            let plus = model.loss_value(&x, &target_refs)?;
            model.params.as_mut_slice()[pi].value.data_mut()[i] = orig - step;
            let minus = model.loss_value(&x, &target_refs)?;
            model.params.as_mut_slice()[pi].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        overall = overall.max(worst);
        params.push(ParamCheck {
            name,
            scalars: grad.numel(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport {
        params,
        tolerance,
        max_rel_err: overall,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
    /// Model with the largest number of levels; smaller variants keep its
    /// leading windows.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub levels: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: SceneSpec::default(),
            n_train: 500,
            n_val: 100,
            model: ModelConfig::default(),
            train: TrainConfig {
                iterations: 1000,
                ..TrainConfig::default()
            },
            seeds: vec![1, 2, 3],
            levels: vec![0, 1, 2, 3],
        }
    }
}

impl ExperimentConfig {
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = model_config_to_kv(&self.model);
        kv.extend(self.train.to_kv());
        let scene: Vec<(String, String)> = self
            .scene
            .to_kv()
            .into_iter()
            .map(|(k, v)| (format!("data.{k}"), v))
            .collect();
        kv.extend(scene);
        kv.push(("data.n_train".into(), self.n_train.to_string()));
        kv.push(("data.n_val".into(), self.n_val.to_string()));
        kv.push((
            "experiment.seeds".into(),
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ));
        kv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRow {
    pub seed: u64,
    pub levels: usize,
    pub report: EvalReport,
    pub final_total: f64,
}

pub fn experiment_csv(rows: &[ExperimentRow]) -> String {
    let mut s =
        String::from("seed,levels,mean_iou,mean_wrong_class,mean_wrong_label,pixel_accuracy\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.seed,
            r.levels,
            r.report.mean_iou,
            r.report.mean_wrong_class,
            r.report.mean_wrong_label,
            r.report.pixel_accuracy()
        );
    }
    s
}

/// Per-seed tables with one row per level count.
pub fn experiment_table(rows: &[ExperimentRow]) -> String {
    let mut s = String::new();
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    for seed in seeds {
        let _ = writeln!(s, "seed {seed}");
        let names: Vec<String> = rows
            .iter()
            .filter(|r| r.seed == seed)
            .map(|r| {
                if r.levels == 0 {
                    "baseline".to_string()
                } else {
                    format!("DML {}-level", r.levels)
                }
            })
            .collect();
        let table_rows: Vec<(&str, &EvalReport)> = rows
            .iter()
            .filter(|r| r.seed == seed)
            .zip(&names)
            .map(|(r, n)| (n.as_str(), &r.report))
            .collect();
        s.push_str(&metrics::table(&table_rows));
        s.push('\n');
    }
    s
}

/// Trains and evaluates every (seed, levels) variant on one shared corpus.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    serial: bool,
) -> Result<Vec<ExperimentRow>> {
    let max_levels = cfg.levels.iter().copied().max().unwrap_or(0);
    let full = cfg.model.with_levels(max_levels)?;
    if (cfg.scene.height, cfg.scene.width) != full.input_size
        || cfg.scene.num_classes != full.num_classes
    {
        return Err(Error::config(format!(
            "scene {}x{} with {} classes does not match the model input {:?} with {} classes",
            cfg.scene.height,
            cfg.scene.width,
            cfg.scene.num_classes,
            full.input_size,
            full.num_classes
        )));
    }
    let (train_set, val_set) = generate_samples(&cfg.scene, cfg.n_train, cfg.n_val)?;
    let targets = prepare_all_targets(&train_set, &full, serial)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("experiment.cfg"), &format_kv(&cfg.to_kv()))?;
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &levels in &cfg.levels {
            let model_cfg = full.with_levels(levels)?;
            let level_targets: Vec<ImageTargets> = targets
                .iter()
                .map(|t| ImageTargets {
                    seg: t.seg.clone(),
                    mul: t.mul[..levels].to_vec(),
                })
                .collect();
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let opts = TrainOptions {
                out_dir: out_dir.map(|d| d.join(format!("seed{seed}_levels{levels}"))),
                serial,
            };
            info!("experiment: seed {seed}, {levels} levels");
            let model = Model::<f32>::new(model_cfg, seed)?;
            let result = train_model(model, &train_set, &level_targets, &train_cfg, &opts)?;
            let report = evaluate(&result.model, &val_set, serial)?;
            info!(
                "  mean IoU {:.4}, wrong class {:.3}, wrong label {:.1}",
                report.mean_iou, report.mean_wrong_class, report.mean_wrong_label
            );
            rows.push(ExperimentRow {
                seed,
                levels,
                report,
                final_total: result.losses.last().map(|r| r.total).unwrap_or(f64::NAN),
            });
        }
    }
    if let Some(dir) = out_dir {
        write_file(&dir.join("experiment.csv"), &experiment_csv(&rows))?;
        write_file(&dir.join("experiment.txt"), &experiment_table(&rows))?;
    }
    Ok(rows)
}
