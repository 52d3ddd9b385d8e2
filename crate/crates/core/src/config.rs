//! `key = value` configuration files and their mapping onto the model,
//! training and scene settings.
//!
//! Model and training keys are unprefixed; scene generator keys carry a
//! `data.` prefix so that `data.seed` and the training `seed` stay distinct.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LowStage, ModelConfig, SegStage};
use crate::synth::SceneSpec;

pub type KvMap = BTreeMap<String, String>;

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                i + 1
            ))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::config(format!(
                "line {}: duplicate key `{k}`",
                i + 1
            )));
        }
    }
    Ok(map)
}

pub fn read_kv_file(path: &Path) -> Result<KvMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

pub fn format_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
}

fn set<T: FromStr>(kv: &KvMap, key: &str, slot: &mut T) -> Result<()> {
    if let Some(v) = kv.get(key) {
        *slot = parse_value(key, v)?;
    }
    Ok(())
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_value(key, x)).collect()
}

/// Parses `16s2,32s2` style stage lists: width, a letter, then stride or dilation.
fn stages(key: &str, v: &str, sep: char) -> Result<Vec<(usize, usize)>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let (a, b) = item.trim().split_once(sep).ok_or_else(|| {
                Error::config(format!("`{key}` entry `{item}` should look like 32{sep}2"))
            })?;
            Ok((parse_value(key, a)?, parse_value(key, b)?))
        })
        .collect()
}

const MODEL_KEYS: &[&str] = &[
    "classes",
    "input_height",
    "input_width",
    "low_level",
    "seg_block",
    "dml_block",
    "dml_extra_stride",
    "windows",
    "lambda",
    "levels",
];

const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "momentum",
    "weight_decay",
    "lr",
    "lr_poly",
    "iterations",
    "seed",
    "eval_every",
    "precision",
];

const DATA_KEYS: &[&str] = &[
    "data.seed",
    "data.height",
    "data.width",
    "data.classes",
    "data.pools",
    "data.shapes_min",
    "data.shapes_max",
    "data.size_min",
    "data.size_max",
    "data.jitter",
    "data.noise",
    "data.n_train",
    "data.n_val",
];

const EXPERIMENT_KEYS: &[&str] = &["experiment.seeds"];

/// Rejects keys no section understands.
pub fn check_known_keys(kv: &KvMap) -> Result<()> {
    for k in kv.keys() {
        let known = [MODEL_KEYS, TRAIN_KEYS, DATA_KEYS, EXPERIMENT_KEYS]
            .iter()
            .any(|keys| keys.contains(&k.as_str()));
        if !known {
            return Err(Error::config(format!("unknown configuration key `{k}`")));
        }
    }
    Ok(())
}

pub fn model_config_to_kv(c: &ModelConfig) -> Vec<(String, String)> {
    let join = |v: Vec<String>| v.join(",");
    vec![
        ("classes".into(), c.num_classes.to_string()),
        ("input_height".into(), c.input_size.0.to_string()),
        ("input_width".into(), c.input_size.1.to_string()),
        (
            "low_level".into(),
            join(
                c.low_level
                    .iter()
                    .map(|s| format!("{}s{}", s.width, s.stride))
                    .collect(),
            ),
        ),
        (
            "seg_block".into(),
            join(
                c.seg_block
                    .iter()
                    .map(|s| format!("{}d{}", s.width, s.dilation))
                    .collect(),
            ),
        ),
        (
            "dml_block".into(),
            join(c.dml_block.iter().map(|w| w.to_string()).collect()),
        ),
        ("dml_extra_stride".into(), c.dml_extra_stride.to_string()),
        (
            "windows".into(),
            join(c.window_sizes.iter().map(|w| w.to_string()).collect()),
        ),
        ("lambda".into(), c.lambda.to_string()),
        ("levels".into(), c.levels.to_string()),
    ]
}

/// Overrides fields of `base` with the model keys present in `kv`.
///
/// Setting `levels` below the number of windows keeps the largest windows.
pub fn model_config_from_kv(kv: &KvMap, base: &ModelConfig) -> Result<ModelConfig> {
    let mut c = base.clone();
    set(kv, "classes", &mut c.num_classes)?;
    set(kv, "input_height", &mut c.input_size.0)?;
    set(kv, "input_width", &mut c.input_size.1)?;
    if let Some(v) = kv.get("low_level") {
        c.low_level = stages("low_level", v, 's')?
            .into_iter()
            .map(|(width, stride)| LowStage { width, stride })
            .collect();
    }
    if let Some(v) = kv.get("seg_block") {
        c.seg_block = stages("seg_block", v, 'd')?
            .into_iter()
            .map(|(width, dilation)| SegStage { width, dilation })
            .collect();
    }
    if let Some(v) = kv.get("dml_block") {
        c.dml_block = list("dml_block", v)?;
    }
    set(kv, "dml_extra_stride", &mut c.dml_extra_stride)?;
    set(kv, "lambda", &mut c.lambda)?;
    if let Some(v) = kv.get("windows") {
        c.window_sizes = list("windows", v)?;
        c.levels = c.window_sizes.len();
    }
    if let Some(v) = kv.get("levels") {
        let levels: usize = parse_value("levels", v)?;
        c = c.with_levels(levels)?;
    }
    c.validate()?;
    Ok(c)
}

/// Hex digest identifying a model configuration.
pub fn model_config_hash(c: &ModelConfig) -> String {
    hex::encode(Sha256::digest(format_kv(&model_config_to_kv(c)).as_bytes()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// 32-bit training and inference.
    Train32,
    /// 64-bit everything; used for gradient checks.
    Check64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Train32 => "train32",
            Precision::Check64 => "check64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train32" => Ok(Precision::Train32),
            "check64" => Ok(Precision::Check64),
            other => Err(Error::config(format!(
                "unknown precision `{other}` (train32|check64)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    /// Exponent of the optional `lr · (1 − t/T)^p` decay; constant when `None`.
    pub lr_poly: Option<f64>,
    pub iterations: usize,
    pub seed: u64,
    /// Checkpoint (and validation, when a split is given) period; 0 disables.
    pub eval_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr: 0.01,
            lr_poly: None,
            iterations: 1000,
            seed: 1,
            eval_every: 0,
            precision: Precision::Train32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if let Some(p) = self.lr_poly {
            if !(p > 0.0 && p.is_finite()) {
                return fail(format!("lr_poly must be positive, got {p}"));
            }
        }
        if self.iterations == 0 {
            return fail("iterations must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("batch_size".into(), self.batch_size.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("lr".into(), self.lr.to_string()),
        ];
        if let Some(p) = self.lr_poly {
            v.push(("lr_poly".into(), p.to_string()));
        }
        v.extend([
            ("iterations".into(), self.iterations.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
            ("precision".into(), self.precision.to_string()),
        ]);
        v
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        set(kv, "batch_size", &mut self.batch_size)?;
        set(kv, "momentum", &mut self.momentum)?;
        set(kv, "weight_decay", &mut self.weight_decay)?;
        set(kv, "lr", &mut self.lr)?;
        if let Some(v) = kv.get("lr_poly") {
            self.lr_poly = Some(parse_value("lr_poly", v)?);
        }
        set(kv, "iterations", &mut self.iterations)?;
        set(kv, "seed", &mut self.seed)?;
        set(kv, "eval_every", &mut self.eval_every)?;
        set(kv, "precision", &mut self.precision)?;
        Ok(())
    }

    /// Learning rate at zero-based iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        match self.lr_poly {
            Some(p) => self.lr * (1.0 - it as f64 / self.iterations as f64).powf(p),
            None => self.lr,
        }
    }
}

/// Scene generator settings and corpus sizes from `data.`-prefixed keys.
pub fn data_config_from_kv(
    kv: &KvMap,
    base: &SceneSpec,
    counts: (usize, usize),
) -> Result<(SceneSpec, usize, usize)> {
    let stripped: KvMap = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("data.").map(|k| (k.to_string(), v.clone())))
        .collect();
    let mut spec = base.clone();
    spec.apply_kv(&stripped)?;
    let (mut n_train, mut n_val) = counts;
    set(&stripped, "n_train", &mut n_train)?;
    set(&stripped, "n_val", &mut n_val)?;
    spec.validate()?;
    Ok((spec, n_train, n_val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("# comment\n a = 1 \n\nb=two # trailing\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "two");
        assert!(parse_kv("a = 1\na = 2").is_err());
        assert!(parse_kv("just words").is_err());
    }

    #[test]
    fn model_config_round_trip() {
        for c in [
            ModelConfig::default(),
            ModelConfig::full_scale(),
            ModelConfig::grad_check(),
        ] {
            let kv: KvMap = model_config_to_kv(&c).into_iter().collect();
            assert_eq!(
                model_config_from_kv(&kv, &ModelConfig::default()).unwrap(),
                c
            );
        }
    }

    #[test]
    fn levels_truncate_windows() {
        let kv = parse_kv("levels = 1").unwrap();
        let c = model_config_from_kv(&kv, &ModelConfig::default()).unwrap();
        assert_eq!(c.window_sizes, vec![11]);
        let kv = parse_kv("levels = 0").unwrap();
        assert!(model_config_from_kv(&kv, &ModelConfig::default())
            .unwrap()
            .window_sizes
            .is_empty());
    }

    #[test]
    fn invalid_model_keys_rejected() {
        let kv = parse_kv("windows = 5,7").unwrap();
        assert!(model_config_from_kv(&kv, &ModelConfig::default()).is_err());
        let kv = parse_kv("low_level = 16x2").unwrap();
        assert!(model_config_from_kv(&kv, &ModelConfig::default()).is_err());
    }

    #[test]
    fn train_config_round_trip() {
        let c = TrainConfig {
            lr_poly: Some(0.9),
            precision: Precision::Check64,
            seed: 77,
            ..TrainConfig::default()
        };
        let kv: KvMap = c.to_kv().into_iter().collect();
        let mut back = TrainConfig::default();
        back.apply_kv(&kv).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_rejected() {
        let kv = parse_kv("learning_rate = 0.1").unwrap();
        assert!(check_known_keys(&kv).is_err());
        let kv = parse_kv("lr = 0.1\ndata.seed = 3").unwrap();
        check_known_keys(&kv).unwrap();
    }

    #[test]
    fn poly_schedule() {
        let c = TrainConfig {
            lr: 0.1,
            lr_poly: Some(1.0),
            iterations: 10,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(0), 0.1);
        assert!((c.lr_at(5) - 0.05).abs() < 1e-15);
    }
}
